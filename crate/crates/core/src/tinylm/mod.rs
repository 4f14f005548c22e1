//! Miniature decoder-only transformer: tokenizer, forward pass, greedy decoding,
//! training, checkpoints and exact gradients with respect to input embeddings.
//!
//! Inputs are embedding vectors rather than token ids, so prompts whose slots
//! have drifted off the vocabulary are first-class. The id path is a thin
//! wrapper that looks up rows of the embedding table.

pub mod checkpoint;
pub mod model;
pub mod tokenizer;
pub mod trace;
pub mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};
pub use model::{Layout, ModelConfig, ModelParams};
pub use tokenizer::{TokenId, TokenSeq, Tokenizer};
pub use trace::{Trace, Upstream};
pub use train::{train, train_examples, TrainConfig, TrainReport, TrainingExample};

use crate::error::{Error, Result};
use crate::prompt::PromptState;

use tokenizer::EOS;

/// Parameters together with the vocabulary they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub params: ModelParams,
    pub tokenizer: Tokenizer,
}

/// Logits for every position and the residual stream after every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[len × vocab]`; row i scores the token at position i + 1.
    pub logits: Vec<f64>,
    /// `n_layers + 1` blocks of `[len × d_model]`: the output of each layer,
    /// then the final layer-normed hidden state.
    pub hidden: Vec<Vec<f64>>,
}

/// A scalar function of the model's forward pass over some input.
pub trait InputFunctional {
    /// Returns the value, the gradients it sends into the trace, and any
    /// gradient it takes directly from the input rows (`[len × d]`).
    fn evaluate(&self, model: &TinyLm, input: &[f64], trace: &Trace) -> (f64, Upstream, Option<Vec<f64>>);
}

impl TinyLm {
    pub fn new(params: ModelParams, tokenizer: Tokenizer) -> Result<Self> {
        if params.vocab_size() != tokenizer.vocab_size() {
            return Err(Error::ShapeMismatch(format!(
                "model vocabulary {} does not match tokenizer vocabulary {}",
                params.vocab_size(),
                tokenizer.vocab_size()
            )));
        }
        Ok(TinyLm { params, tokenizer })
    }

    pub fn d_model(&self) -> usize {
        self.params.d_model()
    }

    pub fn max_context(&self) -> usize {
        self.params.config().max_context
    }

    /// Embedding rows for `ids`, `[len × d_model]`.
    pub fn embed_ids(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len() * self.d_model());
        for &id in ids {
            if id >= self.params.vocab_size() {
                return Err(Error::UnknownToken(id));
            }
            out.extend_from_slice(self.params.embedding(id));
        }
        Ok(out)
    }

    /// Run the model over `input` (`[len × d_model]`) and keep every activation.
    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        let mut t = Trace::new(&self.params);
        self.extend(&mut t, input)?;
        Ok(t)
    }

    /// Append rows to an existing trace.
    pub fn extend(&self, trace: &mut Trace, input: &[f64]) -> Result<()> {
        let d = self.d_model();
        if !input.len().is_multiple_of(d) {
            return Err(Error::Precondition(format!(
                "input length {} is not a multiple of d_model {d}",
                input.len()
            )));
        }
        let len = trace.len() + input.len() / d;
        if len > self.max_context() {
            return Err(Error::LengthOverflow {
                len,
                max: self.max_context(),
            });
        }
        trace.push_rows(&self.params, input);
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardOutput> {
        if input.is_empty() {
            return Err(Error::EmptyInput("forward input"));
        }
        let trace = self.trace(input)?;
        let n = trace.len();
        let mut logits = Vec::with_capacity(n * self.params.vocab_size());
        for row in 0..n {
            logits.extend(trace.logits(&self.params, row));
        }
        let cfg = self.params.config();
        let mut hidden: Vec<Vec<f64>> = (0..cfg.n_layers)
            .map(|l| trace.layer_output(l).to_vec())
            .collect();
        hidden.push((0..n).flat_map(|r| trace.hidden(r).to_vec()).collect());
        Ok(ForwardOutput { logits, hidden })
    }

    /// Convenience path through token ids; identical to `forward(embed_ids(ids))`.
    pub fn forward_ids(&self, ids: &[TokenId]) -> Result<ForwardOutput> {
        self.forward(&self.embed_ids(ids)?)
    }

    /// Last-layer hidden state at the `<eos>` position appended after `prompt`.
    pub fn hidden_repr(&self, prompt: &PromptState) -> Result<Vec<f64>> {
        let (_, h) = self.hidden_repr_trace(&prompt.embeddings(&self.params))?;
        Ok(h)
    }

    /// Trace of `input ⊕ <eos>` and the hidden state at its last row.
    pub fn hidden_repr_trace(&self, input: &[f64]) -> Result<(Trace, Vec<f64>)> {
        let mut trace = self.trace(input)?;
        self.extend(&mut trace, self.params.embedding(EOS))?;
        let h = trace.hidden(trace.len() - 1).to_vec();
        Ok((trace, h))
    }

    /// Greedy decoding of `m` tokens; ties go to the lowest token id.
    pub fn greedy_decode(&self, prompt: &PromptState, m: usize) -> Result<TokenSeq> {
        let (_, ids) = self.decode_trace(&prompt.embeddings(&self.params), m)?;
        Ok(self.tokenizer.seq_from_ids(ids))
    }

    /// Decode `m` tokens after `input`; the returned trace covers the input and
    /// the first `m - 1` generated tokens, so its last row scores token `m`.
    pub fn decode_trace(&self, input: &[f64], m: usize) -> Result<(Trace, Vec<TokenId>)> {
        let (trace, ids, _) = self.decode_with_logits(input, m)?;
        Ok((trace, ids))
    }

    /// As [`TinyLm::decode_trace`], also returning the logits each token was chosen from.
    pub fn decode_with_logits(&self, input: &[f64], m: usize) -> Result<(Trace, Vec<TokenId>, Vec<Vec<f64>>)> {
        if m == 0 {
            return Err(Error::Precondition("decode length must be at least 1".into()));
        }
        let d = self.d_model();
        let n = input.len() / d;
        if n == 0 {
            return Err(Error::EmptyInput("decode prompt"));
        }
        if n + m > self.max_context() {
            return Err(Error::LengthOverflow {
                len: n + m,
                max: self.max_context(),
            });
        }
        let mut trace = self.trace(input)?;
        let mut out = Vec::with_capacity(m);
        let mut all_logits = Vec::with_capacity(m);
        for step in 0..m {
            let logits = trace.logits(&self.params, trace.len() - 1);
            let next = argmax(&logits);
            out.push(next);
            all_logits.push(logits);
            if step + 1 < m {
                trace.push(&self.params, self.params.embedding(next));
            }
        }
        Ok((trace, out, all_logits))
    }

    /// Value and exact gradient of `functional` with respect to every input coordinate.
    pub fn grad_wrt_input(
        &self,
        input: &[f64],
        functional: &dyn InputFunctional,
    ) -> Result<(f64, Vec<f64>)> {
        let trace = self.trace(input)?;
        let (value, upstream, direct) = functional.evaluate(self, input, &trace);
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grad = trace.backward(&self.params, &upstream, None);
        if let Some(direct) = direct {
            for (g, x) in grad.iter_mut().zip(direct) {
                *g += x;
            }
        }
        Ok((value, grad))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Nearest row of a `[rows × d]` table to `x` by L2 distance; ties go to the lowest row.
pub fn nearest_row(table: &[f64], x: &[f64]) -> (TokenId, f64) {
    let d = x.len();
    let mut best = (0, f64::INFINITY);
    for (i, row) in table.chunks_exact(d).enumerate() {
        let sq: f64 = row.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if sq < best.1 {
            best = (i, sq);
        }
    }
    (best.0, best.1.sqrt())
}

/// For each row of the table, the distance to its nearest other row.
pub fn nearest_neighbor_distances(table: &[f64], d: usize) -> Vec<f64> {
    let rows: Vec<&[f64]> = table.chunks_exact(d).collect();
    rows.iter()
        .enumerate()
        .map(|(i, a)| {
            rows.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| a.iter().zip(*b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}
