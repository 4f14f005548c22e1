//! Model configuration and the flat parameter store.
//!
//! All weights live in one `Vec<f64>`; [`Layout`] records where each block
//! starts. The block order is also the on-disk order of a checkpoint:
//!
//! 1. token embedding table `[vocab × d_model]`
//! 2. position embedding table `[max_context × d_model]`
//! 3. per layer: `ln1.gain [d]`, `ln1.bias [d]`, `attn.qkv [d × 3d]`,
//!    `attn.qkv_bias [3d]`, `attn.out [d × d]`, `attn.out_bias [d]`,
//!    `ln2.gain [d]`, `ln2.bias [d]`, `mlp.fc [d × d_ff]`, `mlp.fc_bias [d_ff]`,
//!    `mlp.proj [d_ff × d]`, `mlp.proj_bias [d]`
//! 4. `ln_f.gain [d]`, `ln_f.bias [d]`
//! 5. untied output head `[vocab × d_model]` (absent when tied)
//!
//! Matrices used as `x · W` are stored `[in × out]` row-major.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub seed: u64,
    /// Share the output projection with the token embedding table.
    #[serde(default = "default_tied")]
    pub tied: bool,
    /// Initial standard deviation of the token and position embeddings.
    #[serde(default = "default_embedding_init_std")]
    pub embedding_init_std: f64,
}

fn default_tied() -> bool {
    true
}

fn default_embedding_init_std() -> f64 {
    INIT_STD
}

impl ModelConfig {
    /// Default shape: 2 layers, 4 heads, d_model 64, d_ff 256, context 64,
    /// untied output head, token and position embeddings initialised at
    /// [`EMBEDDING_INIT_STD`].
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_context: 64,
            seed,
            tied: false,
            embedding_init_std: EMBEDDING_INIT_STD,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size < super::tokenizer::SPECIAL_TOKENS.len() {
            return bad("vocab_size must include the four special tokens");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads, n_layers and d_ff must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_context < 2 {
            return bad("max_context must be at least 2");
        }
        if !(self.embedding_init_std.is_finite() && self.embedding_init_std >= 0.0) {
            return bad("embedding_init_std must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub qkv: usize,
    pub qkv_bias: usize,
    pub attn_out: usize,
    pub attn_out_bias: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub fc: usize,
    pub fc_bias: usize,
    pub proj: usize,
    pub proj_bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_gain: usize,
    pub lnf_bias: usize,
    pub output_head: Option<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let token_embedding = take(cfg.vocab_size * d);
        let position_embedding = take(cfg.max_context * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerOffsets {
                ln1_gain: take(d),
                ln1_bias: take(d),
                qkv: take(d * 3 * d),
                qkv_bias: take(3 * d),
                attn_out: take(d * d),
                attn_out_bias: take(d),
                ln2_gain: take(d),
                ln2_bias: take(d),
                fc: take(d * cfg.d_ff),
                fc_bias: take(cfg.d_ff),
                proj: take(cfg.d_ff * d),
                proj_bias: take(d),
            })
            .collect();
        let lnf_gain = take(d);
        let lnf_bias = take(d);
        let output_head = (!cfg.tied).then(|| take(cfg.vocab_size * d));
        Layout {
            token_embedding,
            position_embedding,
            layers,
            lnf_gain,
            lnf_bias,
            output_head,
            total: at,
        }
    }

    /// `(offset, len)` of every block that weight decay applies to (the matrices).
    pub fn matrix_blocks(&self, cfg: &ModelConfig) -> Vec<(usize, usize)> {
        let d = cfg.d_model;
        let mut out = vec![
            (self.token_embedding, cfg.vocab_size * d),
            (self.position_embedding, cfg.max_context * d),
        ];
        for l in &self.layers {
            out.push((l.qkv, d * 3 * d));
            out.push((l.attn_out, d * d));
            out.push((l.fc, d * cfg.d_ff));
            out.push((l.proj, cfg.d_ff * d));
        }
        if let Some(o) = self.output_head {
            out.push((o, cfg.vocab_size * d));
        }
        out
    }
}

/// Weights of the miniature transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f64>,
}

/// Standard deviation of the initial weights.
pub const INIT_STD: f64 = 0.02;

/// Default initial standard deviation of the embedding tables. Small rows
/// keep embedding-space steps of a few hundredths large enough to move a
/// prompt slot from one token to another.
pub const EMBEDDING_INIT_STD: f64 = 0.005;

impl ModelParams {
    /// Seeded Gaussian initialisation; gains start at one and biases at zero.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let residual = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt())
            .expect("valid std");
        let embedding = Normal::new(0.0, config.embedding_init_std).expect("valid std");
        for (off, len) in layout.matrix_blocks(&config) {
            let is_residual_proj = layout
                .layers
                .iter()
                .any(|l| l.attn_out == off || l.proj == off);
            let is_embedding = off == layout.token_embedding || off == layout.position_embedding;
            let dist = if is_residual_proj {
                &residual
            } else if is_embedding {
                &embedding
            } else {
                &normal
            };
            for x in &mut data[off..off + len] {
                *x = dist.sample(&mut rng);
            }
        }
        let d = config.d_model;
        for l in &layout.layers {
            data[l.ln1_gain..l.ln1_gain + d].fill(1.0);
            data[l.ln2_gain..l.ln2_gain + d].fill(1.0);
        }
        data[layout.lnf_gain..layout.lnf_gain + d].fill(1.0);
        Ok(ModelParams {
            config,
            layout,
            data,
        })
    }

    /// Wrap raw weights; the length must match the layout of `config`.
    pub fn from_raw(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "expected {} weights, found {}",
                layout.total,
                data.len()
            )));
        }
        Ok(ModelParams {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, offset: usize, len: usize) -> &[f64] {
        &self.data[offset..offset + len]
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// The token embedding table `W`, `[vocab × d_model]` row-major.
    pub fn embedding_table(&self) -> &[f64] {
        let n = self.config.vocab_size * self.config.d_model;
        self.block(self.layout.token_embedding, n)
    }

    /// Row `id` of the embedding table.
    pub fn embedding(&self, id: TokenId) -> &[f64] {
        let d = self.config.d_model;
        let off = self.layout.token_embedding + id * d;
        &self.data[off..off + d]
    }

    /// The output projection, `[vocab × d_model]`; equals the embedding table when tied.
    pub fn output_table(&self) -> &[f64] {
        let n = self.config.vocab_size * self.config.d_model;
        match self.layout.output_head {
            Some(off) => self.block(off, n),
            None => self.embedding_table(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
