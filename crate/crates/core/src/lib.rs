//! Knowledge-boundary probing for autoregressive language models.
//!
//! A fact is inside a model's knowledge boundary when some prompt that keeps
//! the question's meaning makes the model produce one of the fact's answers.
//! This crate searches for such prompts with projected gradient descent on
//! prompt embeddings under a semantic constraint, compares the search against
//! fixed-prompt and trigger-token baselines, and classifies facts as
//! prompt-agnostic, prompt-sensitive or unanswerable.
//!
//! Everything runs against [`tinylm`], a small transformer trained on a
//! synthetic world ([`corpus`]) whose facts are known by construction.

pub mod baselines;
pub mod boundary;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod pgdc;
pub mod prompt;
pub mod tinylm;

pub use error::{Error, Result};
pub use prompt::{PromptState, Slot};
