//! Prompts as mixed sequences of discrete tokens and free embedding vectors.

use serde::{Deserialize, Serialize};

use crate::tinylm::tokenizer::{TokenId, TokenSeq, BOS};
use crate::tinylm::{nearest_row, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    /// A vocabulary token; its embedding is the matching row of the table.
    Discrete(TokenId),
    /// A free vector in embedding space.
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub slots: Vec<Slot>,
    pub origin_question: TokenSeq,
}

impl PromptState {
    /// `<bos>` followed by the question tokens, all discrete.
    pub fn from_question(question: &TokenSeq) -> Self {
        let slots = std::iter::once(BOS)
            .chain(question.ids.iter().copied())
            .map(Slot::Discrete)
            .collect();
        PromptState {
            slots,
            origin_question: question.clone(),
        }
    }

    /// Discrete prompt made of exactly `ids` (no `<bos>` added).
    pub fn from_ids(ids: &[TokenId], origin_question: TokenSeq) -> Self {
        PromptState {
            slots: ids.iter().copied().map(Slot::Discrete).collect(),
            origin_question,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slot embeddings, `[len × d_model]` row-major.
    pub fn embeddings(&self, params: &ModelParams) -> Vec<f64> {
        let d = params.d_model();
        let mut out = Vec::with_capacity(self.len() * d);
        for slot in &self.slots {
            match slot {
                Slot::Discrete(id) => out.extend_from_slice(params.embedding(*id)),
                Slot::Continuous(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    /// Token ids when every slot is discrete.
    pub fn token_ids(&self) -> Option<Vec<TokenId>> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Discrete(id) => Some(*id),
                Slot::Continuous(_) => None,
            })
            .collect()
    }

    pub fn is_discrete(&self) -> bool {
        self.slots.iter().all(|s| matches!(s, Slot::Discrete(_)))
    }

    pub fn continuous_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Continuous(_)))
            .count()
    }

    /// Every slot snapped to its nearest embedding row, regardless of distance.
    pub fn snapped(&self, params: &ModelParams) -> PromptState {
        let slots = self
            .slots
            .iter()
            .map(|s| match s {
                Slot::Discrete(id) => Slot::Discrete(*id),
                Slot::Continuous(v) => Slot::Discrete(nearest_row(params.embedding_table(), v).0),
            })
            .collect();
        PromptState {
            slots,
            origin_question: self.origin_question.clone(),
        }
    }
}
