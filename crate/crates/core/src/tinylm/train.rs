//! Next-token cross-entropy training with AdamW.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::ModelParams;
use super::tokenizer::{TokenSeq, BOS, EOS};
use super::trace::{Trace, Upstream};
use super::log_softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub warmup_steps: usize,
    /// Learning rate at the end of the cosine schedule, as a fraction of the peak.
    pub final_lr_fraction: f64,
    /// Multiplier on the learning rate of the token and position embeddings.
    pub embedding_lr_scale: f64,
    /// Seed for the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            learning_rate: 3e-3,
            batch_size: 16,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            grad_clip: 1.0,
            warmup_steps: 20,
            final_lr_fraction: 0.1,
            embedding_lr_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    /// Mean next-token loss (nats/token) over the last epoch.
    pub final_loss: f64,
    pub final_perplexity: f64,
    pub epoch_losses: Vec<f64>,
}

/// A training sequence whose loss starts at content token `loss_start`;
/// earlier tokens only serve as context.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub tokens: TokenSeq,
    pub loss_start: usize,
}

impl TrainingExample {
    pub fn full(tokens: TokenSeq) -> Self {
        TrainingExample {
            tokens,
            loss_start: 0,
        }
    }
}

/// Trains on each corpus entry as `<bos> tokens <eos>`.
pub fn train(
    params: &ModelParams,
    corpus: &[TokenSeq],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let examples: Vec<TrainingExample> = corpus.iter().cloned().map(TrainingExample::full).collect();
    train_examples(params, &examples, cfg)
}

/// Like [`train`], with the loss restricted to each example's tail.
pub fn train_examples(
    params: &ModelParams,
    corpus: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut params = params.clone();
    let max_ctx = params.config().max_context;
    let vocab = params.vocab_size();
    let examples: Vec<(Vec<usize>, usize)> = corpus
        .iter()
        .map(|ex| {
            let mut ids = Vec::with_capacity(ex.tokens.len() + 2);
            ids.push(BOS);
            ids.extend_from_slice(&ex.tokens.ids);
            ids.push(EOS);
            ids.truncate(max_ctx);
            (ids, ex.loss_start)
        })
        .filter(|(ids, start)| ids.len() >= start + 2)
        .collect();
    if examples.is_empty() {
        return Err(Error::EmptyInput("training targets"));
    }
    if let Some(bad) = examples.iter().flat_map(|(ids, _)| ids).find(|&&id| id >= vocab) {
        return Err(Error::UnknownToken(*bad));
    }

    let n = params.as_slice().len();
    let decay = {
        let mut decay = vec![0.0; n];
        for (off, len) in params.layout().matrix_blocks(params.config()) {
            decay[off..off + len].fill(cfg.weight_decay);
        }
        decay
    };
    let lr_scale = {
        let mut scale = vec![1.0; n];
        let d = params.d_model();
        let off = params.layout().token_embedding;
        scale[off..off + vocab * d].fill(cfg.embedding_lr_scale);
        let off = params.layout().position_embedding;
        scale[off..off + max_ctx * d].fill(cfg.embedding_lr_scale);
        scale
    };
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let batch_tokens: usize = batch
                .iter()
                .map(|&i| examples[i].0.len() - 1 - examples[i].1)
                .sum();
            let norm = 1.0 / batch_tokens as f64;
            for &i in batch {
                let (ids, start) = &examples[i];
                let loss = accumulate_example(&params, ids, *start, norm, &mut grad);
                epoch_loss += loss;
            }
            epoch_tokens += batch_tokens;
            if !epoch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: epoch_loss,
                });
            }

            if cfg.grad_clip > 0.0 {
                let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if gnorm > cfg.grad_clip {
                    let s = cfg.grad_clip / gnorm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }

            step += 1;
            let lr = schedule(cfg, step, total_steps);
            let bc1 = 1.0 - cfg.beta1.powi(step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(step as i32);
            let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
            let w = params.as_mut_slice();
            for ((((wj, &g), (mj, vj)), &scale), &wd) in w
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(&lr_scale)
                .zip(&decay)
            {
                *mj = b1 * *mj + (1.0 - b1) * g;
                *vj = b2 * *vj + (1.0 - b2) * g * g;
                let update = (*mj / bc1) / ((*vj / bc2).sqrt() + eps);
                let lr_j = lr * scale;
                *wj -= lr_j * wd * *wj;
                *wj -= lr_j * update;
            }
        }
        epoch_losses.push(epoch_loss / epoch_tokens as f64);
    }

    if !params.all_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            loss: f64::NAN,
        });
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(f64::NAN);
    let report = TrainReport {
        epochs: cfg.epochs,
        steps: step,
        final_loss,
        final_perplexity: final_loss.exp(),
        epoch_losses,
    };
    Ok((params, report))
}

fn schedule(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if step <= cfg.warmup_steps {
        return cfg.learning_rate * step as f64 / cfg.warmup_steps.max(1) as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    let floor = cfg.final_lr_fraction;
    cfg.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adds `norm × d(sum of token losses)/dparams` into `grad` for targets at
/// positions `loss_start + 1..`; returns the summed loss.
fn accumulate_example(
    params: &ModelParams,
    ids: &[usize],
    loss_start: usize,
    norm: f64,
    grad: &mut [f64],
) -> f64 {
    let mut trace = Trace::new(params);
    let input: Vec<f64> = ids.iter().flat_map(|&id| params.embedding(id).iter().copied()).collect();
    trace.push_rows(params, &input);
    let mut upstream = Upstream::default();
    let mut loss = 0.0;
    let rows = loss_start..ids.len() - 1;
    for (t, logits) in rows.clone().zip(trace.logits_rows(params, rows)) {
        let lp = log_softmax(&logits);
        let target = ids[t + 1];
        loss -= lp[target];
        let mut dl: Vec<f64> = lp.iter().map(|l| l.exp() * norm).collect();
        dl[target] -= norm;
        upstream.logits.push((t, dl));
    }
    let dinput = trace.backward(params, &upstream, Some(grad));
    let d = params.d_model();
    let off = params.layout().token_embedding;
    for (row, &id) in ids.iter().enumerate() {
        let g = &dinput[row * d..(row + 1) * d];
        for (a, b) in grad[off + id * d..off + (id + 1) * d].iter_mut().zip(g) {
            *a += b;
        }
    }
    loss
}
