//! Projected gradient descent with constraints over prompt embeddings.
//!
//! Each iteration takes one Adam step on every prompt slot (the leading
//! `<bos>` stays fixed), then snaps any slot that landed within the
//! projection ceiling of an embedding row back onto that row. After every
//! iteration a fully snapped copy of the prompt is decoded greedily; the run
//! succeeds when an answer alias appears in the decode and the snapped prompt
//! stays within the semantic gate of the original question.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::KnowledgeRecord;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights, Objective};
use crate::prompt::{PromptState, Slot};
use crate::tinylm::tokenizer::{TokenId, TokenSeq, EOS, PAD};
use crate::tinylm::{nearest_neighbor_distances, nearest_row, ModelParams, TinyLm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdcConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Iterations between learning-rate decays.
    pub decay_step: usize,
    pub decay_factor: f64,
    /// Snap distance `c`; `None` uses [`default_ceil`] of the checkpoint.
    pub projection_ceil: Option<f64>,
    pub weights: LossWeights,
    pub decode_horizon: usize,
    /// Largest `R` a successful prompt may have; `None` disables the gate.
    pub semantic_gate: Option<f64>,
    /// `<pad>` slots appended after the question as extra free slots.
    pub extra_slots: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for PgdcConfig {
    fn default() -> Self {
        PgdcConfig {
            learning_rate: 1e-2,
            iterations: 25,
            decay_step: 5,
            decay_factor: 0.9,
            projection_ceil: None,
            weights: LossWeights::default(),
            decode_horizon: 10,
            semantic_gate: None,
            extra_slots: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl PgdcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.decay_step == 0 {
            return bad("decay_step must be at least 1");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if let Some(c) = self.projection_ceil {
            if !(c.is_finite() && c > 0.0) {
                return bad("projection ceil must be positive");
            }
        }
        if let Some(g) = self.semantic_gate {
            if g.is_nan() || g < 0.0 {
                return bad("semantic gate must be non-negative");
            }
        }
        if self.decode_horizon == 0 {
            return bad("decode horizon must be at least 1");
        }
        self.weights.validate()
    }

    /// Learning rate for 1-based iteration `t`.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        let decays = (t.saturating_sub(1) / self.decay_step) as i32;
        self.learning_rate * self.decay_factor.powi(decays)
    }

    pub fn ceil_for(&self, params: &ModelParams) -> f64 {
        self.projection_ceil.unwrap_or_else(|| default_ceil(params))
    }
}

/// Half the median nearest-neighbour distance between embedding rows.
pub fn default_ceil(params: &ModelParams) -> f64 {
    let mut d = nearest_neighbor_distances(params.embedding_table(), params.d_model());
    0.5 * median(&mut d)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn percentile(xs: &mut [f64], q: f64) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let rank = (q * xs.len() as f64).ceil() as usize;
    Some(xs[rank.clamp(1, xs.len()) - 1])
}

/// The 95th percentile of `R(Q′, Q)` over pairs of paraphrases of the same
/// non-counterfactual record that the model already answers greedily within
/// `horizon` tokens. `None` when no such pair exists.
pub fn calibrate_semantic_gate(
    model: &TinyLm,
    records: &[KnowledgeRecord],
    horizon: usize,
) -> Result<Option<f64>> {
    let mut dists = Vec::new();
    for r in records.iter().filter(|r| !r.counterfactual) {
        let answers: Vec<Vec<TokenId>> = r.aliases.iter().map(|a| model.tokenizer.tokenize(a).ids).collect();
        let mut known = Vec::new();
        for p in &r.paraphrases {
            let q = PromptState::from_question(&model.tokenizer.tokenize(p));
            let decoded = model.greedy_decode(&q, horizon)?;
            if match_answer(&decoded.ids, &answers).is_some() {
                known.push(model.hidden_repr(&q)?);
            }
        }
        for i in 0..known.len() {
            for j in i + 1..known.len() {
                let d: f64 = known[i]
                    .iter()
                    .zip(&known[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                dists.push(d);
            }
        }
    }
    Ok(percentile(&mut dists, 0.95))
}

/// Snap continuous slots within distance `< ceil` of a row onto that row.
pub fn proximal_project(prompt: &PromptState, table: &[f64], ceil: f64) -> PromptState {
    let slots = prompt
        .slots
        .iter()
        .map(|s| match s {
            Slot::Continuous(v) => {
                let (id, dist) = nearest_row(table, v);
                if dist < ceil {
                    Slot::Discrete(id)
                } else {
                    Slot::Continuous(v.clone())
                }
            }
            Slot::Discrete(id) => Slot::Discrete(*id),
        })
        .collect();
    PromptState {
        slots,
        origin_question: prompt.origin_question.clone(),
    }
}

/// First alias, in order, found as a contiguous window of `decoded` before
/// any `<eos>`: `(alias index, start)`.
pub fn match_answer(decoded: &[TokenId], answers: &[Vec<TokenId>]) -> Option<(usize, usize)> {
    let end = decoded.iter().position(|&t| t == EOS).unwrap_or(decoded.len());
    let text = &decoded[..end];
    answers.iter().enumerate().find_map(|(a, ans)| {
        if ans.is_empty() || ans.len() > text.len() {
            return None;
        }
        text.windows(ans.len()).position(|w| w == ans.as_slice()).map(|j| (a, j))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update on every slot except the first, then projection with `ceil`.
/// Returns the new prompt and the objective before the update.
pub fn pgdc_step(
    objective: &Objective,
    model: &TinyLm,
    prompt: &PromptState,
    config: &PgdcConfig,
    ceil: f64,
    state: &mut AdamState,
) -> Result<(PromptState, LossBreakdown)> {
    let (b, grad) = objective.evaluate_with_grad(prompt)?;
    let params = &model.params;
    let d = params.d_model();
    if state.m.len() != grad.len() {
        return Err(Error::Precondition(format!(
            "optimizer state holds {} values, prompt has {}",
            state.m.len(),
            grad.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = config.learning_rate_at(state.step);
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let x = prompt.embeddings(params);
    let mut next = prompt.clone();
    for i in 1..prompt.len() {
        let mut v = x[i * d..(i + 1) * d].to_vec();
        for (k, vk) in v.iter_mut().enumerate() {
            let j = i * d + k;
            let g = grad[j];
            state.m[j] = config.beta1 * state.m[j] + (1.0 - config.beta1) * g;
            state.v[j] = config.beta2 * state.v[j] + (1.0 - config.beta2) * g * g;
            *vk -= lr * (state.m[j] / bc1) / ((state.v[j] / bc2).sqrt() + config.adam_eps);
        }
        next.slots[i] = Slot::Continuous(v);
    }
    Ok((proximal_project(&next, params.embedding_table(), ceil), b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub success: bool,
    /// The fully snapped prompt from the last success check.
    pub final_prompt: PromptState,
    /// `R` of `final_prompt` against the question.
    pub final_semantic: f64,
    pub iterations_used: usize,
    /// Objective at iterations `0..=iterations_used`.
    pub trace: Vec<LossBreakdown>,
    pub decoded: TokenSeq,
    pub matched_answer: Option<TokenSeq>,
    pub matched_window: Option<usize>,
}

struct Check {
    prompt: PromptState,
    decoded: Vec<TokenId>,
    matched: Option<(usize, usize)>,
    semantic: f64,
}

fn success_check(
    model: &TinyLm,
    objective: &Objective,
    prompt: &PromptState,
    answers: &[Vec<TokenId>],
    config: &PgdcConfig,
) -> Result<Check> {
    let snapped = prompt.snapped(&model.params);
    let (_, decoded) = model.decode_trace(&snapped.embeddings(&model.params), config.decode_horizon)?;
    let semantic = objective.semantic(&snapped)?;
    let gate_ok = config.semantic_gate.is_none_or(|g| semantic <= g);
    let matched = if gate_ok { match_answer(&decoded, answers) } else { None };
    Ok(Check {
        prompt: snapped,
        decoded,
        matched,
        semantic,
    })
}

pub fn optimize_prompt(
    model: &TinyLm,
    question: &TokenSeq,
    answers: &[TokenSeq],
    config: &PgdcConfig,
) -> Result<ProbeResult> {
    config.validate()?;
    if question.is_empty() {
        return Err(Error::EmptyInput("question"));
    }
    let q = PromptState::from_question(question);
    let mut x = q.clone();
    x.slots.extend((0..config.extra_slots).map(|_| Slot::Discrete(PAD)));
    let need = x.len() + config.decode_horizon;
    if need > model.max_context() {
        return Err(Error::LengthOverflow {
            len: need,
            max: model.max_context(),
        });
    }
    let answer_ids: Vec<Vec<TokenId>> = answers.iter().map(|a| a.ids.clone()).collect();
    let objective = Objective::new(model, &q, answer_ids.clone(), config.weights, config.decode_horizon)?;
    let ceil = config.ceil_for(&model.params);
    let mut state = AdamState::new(x.len() * model.d_model());
    let mut trace = Vec::with_capacity(config.iterations + 1);

    let mut check = success_check(model, &objective, &x, &answer_ids, config)?;
    let mut used = 0;
    if check.matched.is_none() {
        for it in 1..=config.iterations {
            let (next, before) = pgdc_step(&objective, model, &x, config, ceil, &mut state)?;
            trace.push(before);
            x = next;
            used = it;
            check = success_check(model, &objective, &x, &answer_ids, config)?;
            if check.matched.is_some() {
                break;
            }
        }
    }
    trace.push(objective.evaluate(&x)?);

    let (matched_answer, matched_window) = match check.matched {
        Some((a, j)) => (Some(answers[a].clone()), Some(j)),
        None => (None, None),
    };
    Ok(ProbeResult {
        success: check.matched.is_some(),
        final_prompt: check.prompt,
        final_semantic: check.semantic,
        iterations_used: used,
        trace,
        decoded: model.tokenizer.seq_from_ids(check.decoded),
        matched_answer,
        matched_window,
    })
}

/// One independent run per paraphrase of `record`.
pub fn probe_knowledge(
    model: &TinyLm,
    record: &KnowledgeRecord,
    config: &PgdcConfig,
) -> Result<Vec<ProbeResult>> {
    if record.paraphrases.is_empty() {
        return Err(Error::Precondition(format!("record {} has no paraphrase", record.id)));
    }
    if record.aliases.is_empty() {
        return Err(Error::Precondition(format!("record {} has no alias", record.id)));
    }
    let answers: Vec<TokenSeq> = record.aliases.iter().map(|a| model.tokenizer.tokenize(a)).collect();
    record
        .paraphrases
        .iter()
        .map(|p| optimize_prompt(model, &model.tokenizer.tokenize(p), &answers, config))
        .collect()
}

/// Random continuous prompt near the question, for tests and oracles.
pub fn jitter_prompt(params: &ModelParams, prompt: &PromptState, scale: f64, seed: u64) -> PromptState {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("finite scale");
    let d = params.d_model();
    let x = prompt.embeddings(params);
    let mut out = prompt.clone();
    for i in 1..prompt.len() {
        out.slots[i] = Slot::Continuous(
            x[i * d..(i + 1) * d]
                .iter()
                .map(|v| v + normal.sample(&mut rng))
                .collect(),
        );
    }
    out
}
