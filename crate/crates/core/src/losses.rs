//! The prompt objective Φ = L + λ₁·R + λ₂·δ and its gradient.
//!
//! * `L` is the answer loss: the smallest teacher-forced negative
//!   log-likelihood of any answer alias placed at any start position inside
//!   an `m`-token greedy continuation of the prompt.
//! * `R` is the distance between the `<eos>` hidden states of the prompt and
//!   of the original question.
//! * `δ` sums, over continuous slots, the distance to the nearest embedding row.
//!
//! Greedily decoded tokens that precede a window are treated as constants:
//! they change only where the argmax flips, so the objective is piecewise
//! smooth and the gradient below is exact inside each piece.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{PromptState, Slot};
use crate::tinylm::tokenizer::{TokenId, EOS};
use crate::tinylm::trace::{Trace, Upstream};
use crate::tinylm::{log_softmax, nearest_row, softmax, TinyLm};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// `ln(max(p, PROB_FLOOR))` given `ln p`.
pub fn floored_log(log_p: f64) -> f64 {
    log_p.max(PROB_FLOOR.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub target: f64,
    pub semantic: f64,
    pub discreteness: f64,
    pub total: f64,
    pub best_window_start: usize,
    pub best_answer_index: usize,
}

impl LossBreakdown {
    fn compose(target: f64, semantic: f64, discreteness: f64, w: &LossWeights, j: usize, a: usize) -> Self {
        LossBreakdown {
            target,
            semantic,
            discreteness,
            total: target + w.lambda1 * semantic + w.lambda2 * discreteness,
            best_window_start: j,
            best_answer_index: a,
        }
    }
}

/// Next-token log-probabilities over `horizon()` output positions.
pub trait WindowScorer {
    /// Number of output positions `t`.
    fn horizon(&self) -> usize;
    /// `ln P(answer[i])` for an answer starting at output position `start`,
    /// each conditioned on the answer prefix before it.
    fn window_log_probs(&self, start: usize, answer: &[TokenId]) -> Vec<f64>;
    /// The window's negative log-likelihood, or any value `>= bound` once it
    /// is known to reach `bound`.
    fn window_nll(&self, start: usize, answer: &[TokenId], bound: f64) -> f64 {
        let _ = bound;
        window_nll(&self.window_log_probs(start, answer))
    }
}

/// Independent per-position distributions given as log-probability rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable {
    pub log_probs: Vec<Vec<f64>>,
}

impl PositionTable {
    pub fn from_probs(probs: &[Vec<f64>]) -> Self {
        PositionTable {
            log_probs: probs
                .iter()
                .map(|row| row.iter().map(|p| p.ln()).collect())
                .collect(),
        }
    }
}

impl WindowScorer for PositionTable {
    fn horizon(&self) -> usize {
        self.log_probs.len()
    }

    fn window_log_probs(&self, start: usize, answer: &[TokenId]) -> Vec<f64> {
        answer
            .iter()
            .enumerate()
            .map(|(i, &a)| self.log_probs[start + i][a])
            .collect()
    }
}

fn window_nll(log_probs: &[f64]) -> f64 {
    let mut s = 0.0;
    for &lp in log_probs {
        s -= floored_log(lp);
    }
    s
}

/// Minimum over window starts of the answer's negative log-likelihood, with
/// the first minimising start.
pub fn window_loss(scorer: &dyn WindowScorer, answer: &[TokenId]) -> Result<(f64, usize)> {
    window_loss_below(scorer, answer, f64::INFINITY)
}

/// [`window_loss`] restricted to windows scoring below `bound`; `(inf, 0)` if none does.
fn window_loss_below(scorer: &dyn WindowScorer, answer: &[TokenId], bound: f64) -> Result<(f64, usize)> {
    let t = scorer.horizon();
    let k = answer.len();
    if k == 0 {
        return Err(Error::EmptyInput("answer"));
    }
    if k > t {
        return Err(Error::Precondition(format!(
            "answer of {k} tokens does not fit in {t} output positions"
        )));
    }
    let mut best = (f64::INFINITY, 0);
    for j in 0..=t - k {
        let limit = best.0.min(bound);
        let v = scorer.window_nll(j, answer, limit);
        if v < limit {
            best = (v, j);
        }
    }
    Ok(best)
}

/// Minimum of [`window_loss`] over aliases: `(loss, answer index, window start)`.
pub fn multi_answer_loss(
    scorer: &dyn WindowScorer,
    answers: &[Vec<TokenId>],
) -> Result<(f64, usize, usize)> {
    if answers.is_empty() {
        return Err(Error::EmptyInput("answer set"));
    }
    let mut best = (f64::INFINITY, 0, 0);
    for (a, ans) in answers.iter().enumerate() {
        let (v, j) = window_loss_below(scorer, ans, best.0)?;
        if v < best.0 {
            best = (v, a, j);
        }
    }
    Ok(best)
}

/// Windows over a model's greedy continuation of a prompt.
pub struct ModelScorer<'a> {
    model: &'a TinyLm,
    /// Prompt plus the first `m - 1` decoded tokens.
    trace: Trace,
    prompt_len: usize,
    decoded: Vec<TokenId>,
    /// Log-probabilities each decoded token was chosen from.
    decode_log_probs: Vec<Vec<f64>>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a TinyLm, input: &[f64], horizon: usize) -> Result<Self> {
        let (trace, decoded, logits) = model.decode_with_logits(input, horizon)?;
        Ok(ModelScorer {
            model,
            trace,
            prompt_len: input.len() / model.d_model(),
            decoded,
            decode_log_probs: logits.iter().map(|l| log_softmax(l)).collect(),
        })
    }

    /// Trace of the prompt alone; bit-identical to tracing it afresh.
    pub fn prompt_trace(&self) -> Trace {
        self.trace.truncated(self.prompt_len)
    }

    pub fn decoded(&self) -> &[TokenId] {
        &self.decoded
    }

    /// Trace covering the prompt, decoded tokens before `start`, and all but
    /// the last answer token. Row `prompt_len + start - 1 + i` scores `answer[i]`.
    fn window_trace(&self, start: usize, answer: &[TokenId]) -> Trace {
        let p = &self.model.params;
        let mut t = self.trace.truncated(self.prompt_len + start);
        for &a in &answer[..answer.len() - 1] {
            t.push(p, p.embedding(a));
        }
        t
    }

    fn row(&self, start: usize, i: usize) -> usize {
        self.prompt_len + start - 1 + i
    }
}

impl WindowScorer for ModelScorer<'_> {
    fn horizon(&self) -> usize {
        self.decoded.len()
    }

    fn window_log_probs(&self, start: usize, answer: &[TokenId]) -> Vec<f64> {
        // While the answer agrees with the decode, its context is the decode's
        // own, so those distributions are already known exactly.
        let agree = answer
            .iter()
            .zip(&self.decoded[start..])
            .take_while(|(a, b)| a == b)
            .count();
        let cached = (agree + 1).min(answer.len());
        let mut out: Vec<f64> = (0..cached)
            .map(|i| self.decode_log_probs[start + i][answer[i]])
            .collect();
        if cached < answer.len() {
            let p = &self.model.params;
            let mut t = self.trace.truncated(self.prompt_len + start + agree);
            for i in cached..answer.len() {
                t.push(p, p.embedding(answer[i - 1]));
                out.push(log_softmax(&t.logits(p, t.len() - 1))[answer[i]]);
            }
        }
        out
    }

    fn window_nll(&self, start: usize, answer: &[TokenId], bound: f64) -> f64 {
        // Same summation order as the free `window_nll`; every term is
        // non-negative, so a partial sum at or above `bound` settles it.
        let agree = answer
            .iter()
            .zip(&self.decoded[start..])
            .take_while(|(a, b)| a == b)
            .count();
        let cached = (agree + 1).min(answer.len());
        let mut s = 0.0;
        for i in 0..cached {
            s -= floored_log(self.decode_log_probs[start + i][answer[i]]);
        }
        if cached == answer.len() || s >= bound {
            return s;
        }
        let p = &self.model.params;
        let mut t = self.trace.truncated(self.prompt_len + start + agree);
        for i in cached..answer.len() {
            t.push(p, p.embedding(answer[i - 1]));
            s -= floored_log(log_softmax(&t.logits(p, t.len() - 1))[answer[i]]);
            if s >= bound {
                break;
            }
        }
        s
    }
}

/// `‖h(X) − h(Q)‖₂` over `<eos>` hidden states.
pub fn semantic_loss(model: &TinyLm, prompt: &PromptState, question: &PromptState) -> Result<f64> {
    Ok(l2_distance(&model.hidden_repr(prompt)?, &model.hidden_repr(question)?))
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum over continuous slots of the distance to the nearest row of `table`.
pub fn discreteness_loss(prompt: &PromptState, table: &[f64]) -> f64 {
    let mut s = 0.0;
    for slot in &prompt.slots {
        if let Slot::Continuous(v) = slot {
            s += nearest_row(table, v).1;
        }
    }
    s
}

/// Φ with all components, for a one-off evaluation.
pub fn total_loss(
    model: &TinyLm,
    prompt: &PromptState,
    question: &PromptState,
    answers: &[Vec<TokenId>],
    weights: &LossWeights,
    horizon: usize,
) -> Result<LossBreakdown> {
    Objective::new(model, question, answers.to_vec(), *weights, horizon)?.evaluate(prompt)
}

/// Φ for one question and answer set, with `h(Q)` cached.
pub struct Objective<'a> {
    model: &'a TinyLm,
    question_hidden: Vec<f64>,
    answers: Vec<Vec<TokenId>>,
    weights: LossWeights,
    horizon: usize,
}

impl<'a> Objective<'a> {
    pub fn new(
        model: &'a TinyLm,
        question: &PromptState,
        answers: Vec<Vec<TokenId>>,
        weights: LossWeights,
        horizon: usize,
    ) -> Result<Self> {
        weights.validate()?;
        if answers.is_empty() {
            return Err(Error::EmptyInput("answer set"));
        }
        if answers.iter().any(|a| a.is_empty()) {
            return Err(Error::EmptyInput("answer"));
        }
        if let Some(a) = answers.iter().find(|a| a.len() > horizon) {
            return Err(Error::Precondition(format!(
                "answer of {} tokens exceeds decode horizon {horizon}",
                a.len()
            )));
        }
        Ok(Objective {
            model,
            question_hidden: model.hidden_repr(question)?,
            answers,
            weights,
            horizon,
        })
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn answers(&self) -> &[Vec<TokenId>] {
        &self.answers
    }

    pub fn question_hidden(&self) -> &[f64] {
        &self.question_hidden
    }

    /// `R` for an arbitrary prompt against the cached question.
    pub fn semantic(&self, prompt: &PromptState) -> Result<f64> {
        Ok(l2_distance(&self.model.hidden_repr(prompt)?, &self.question_hidden))
    }

    /// Append `<eos>` to a prompt trace and read its final hidden state.
    fn eos_trace(&self, mut trace: Trace) -> Result<(Trace, Vec<f64>)> {
        let params = &self.model.params;
        self.model.extend(&mut trace, params.embedding(EOS))?;
        let h = trace.hidden(trace.len() - 1).to_vec();
        Ok((trace, h))
    }

    pub fn evaluate(&self, prompt: &PromptState) -> Result<LossBreakdown> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt"));
        }
        let input = prompt.embeddings(&self.model.params);
        let scorer = ModelScorer::new(self.model, &input, self.horizon)?;
        let (target, a, j) = multi_answer_loss(&scorer, &self.answers)?;
        let (_, h) = self.eos_trace(scorer.prompt_trace())?;
        let semantic = l2_distance(&h, &self.question_hidden);
        let delta = discreteness_loss(prompt, self.model.params.embedding_table());
        let b = LossBreakdown::compose(target, semantic, delta, &self.weights, j, a);
        check_finite(&b)?;
        Ok(b)
    }

    /// Breakdown and `dΦ/dX` for every slot, `[len × d_model]`.
    pub fn evaluate_with_grad(&self, prompt: &PromptState) -> Result<(LossBreakdown, Vec<f64>)> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt"));
        }
        let model = self.model;
        let params = &model.params;
        let d = model.d_model();
        let n = prompt.len();
        let input = prompt.embeddings(params);
        let mut grad = vec![0.0; n * d];

        let scorer = ModelScorer::new(model, &input, self.horizon)?;
        let (target, a, j) = multi_answer_loss(&scorer, &self.answers)?;
        let answer = &self.answers[a];
        let trace = scorer.window_trace(j, answer);
        let mut up = Upstream::default();
        for (i, &tok) in answer.iter().enumerate() {
            let row = scorer.row(j, i);
            let logits = trace.logits(params, row);
            let lp = log_softmax(&logits)[tok];
            if floored_log(lp) != lp {
                continue;
            }
            let mut g = softmax(&logits);
            g[tok] -= 1.0;
            up.logits.push((row, g));
        }
        let dinput = trace.backward(params, &up, None);
        for (g, x) in grad.iter_mut().zip(&dinput[..n * d]) {
            *g += x;
        }

        let (htrace, h) = self.eos_trace(scorer.prompt_trace())?;
        let semantic = l2_distance(&h, &self.question_hidden);
        if self.weights.lambda1 > 0.0 && semantic > 0.0 {
            let s = self.weights.lambda1 / semantic;
            let dh: Vec<f64> = h
                .iter()
                .zip(&self.question_hidden)
                .map(|(x, q)| s * (x - q))
                .collect();
            let up = Upstream {
                logits: Vec::new(),
                hidden: vec![(n, dh)],
            };
            let dinput = htrace.backward(params, &up, None);
            for (g, x) in grad.iter_mut().zip(&dinput[..n * d]) {
                *g += x;
            }
        }

        let table = params.embedding_table();
        let mut delta = 0.0;
        for (i, slot) in prompt.slots.iter().enumerate() {
            if let Slot::Continuous(v) = slot {
                let (id, dist) = nearest_row(table, v);
                delta += dist;
                if self.weights.lambda2 > 0.0 && dist > 0.0 {
                    let row = params.embedding(id);
                    let s = self.weights.lambda2 / dist;
                    for k in 0..d {
                        grad[i * d + k] += s * (v[k] - row[k]);
                    }
                }
            }
        }

        let b = LossBreakdown::compose(target, semantic, delta, &self.weights, j, a);
        check_finite(&b)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("prompt gradient".into()));
        }
        Ok((b, grad))
    }
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    if b.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("objective {b:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{ModelConfig, ModelParams, Tokenizer};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(table: &PositionTable, answers: &[Vec<TokenId>]) -> (f64, usize, usize) {
        let mut best = (f64::INFINITY, 0, 0);
        for (a, ans) in answers.iter().enumerate() {
            for j in 0..=table.log_probs.len() - ans.len() {
                let mut s = 0.0;
                for (i, &tok) in ans.iter().enumerate() {
                    s -= table.log_probs[j + i][tok].max(PROB_FLOOR.ln());
                }
                if s < best.0 {
                    best = (s, a, j);
                }
            }
        }
        best
    }

    fn random_table(rng: &mut ChaCha8Rng, t: usize, v: usize) -> PositionTable {
        let rows = (0..t)
            .map(|_| {
                let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-4.0..4.0)).collect();
                log_softmax(&logits)
            })
            .collect();
        PositionTable { log_probs: rows }
    }

    #[test]
    fn certainty_case() {
        let probs = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let (v, j) = window_loss(&PositionTable::from_probs(&probs), &[1]).unwrap();
        assert_eq!((v, j), (0.0, 2));
    }

    #[test]
    fn uniform_case() {
        let v = 7;
        let probs = vec![vec![1.0 / v as f64; v]; 4];
        let table = PositionTable::from_probs(&probs);
        for k in 1..=3 {
            let answer: Vec<usize> = (0..k).collect();
            let (loss, j) = window_loss(&table, &answer).unwrap();
            assert!((loss - k as f64 * (v as f64).ln()).abs() < 1e-12);
            assert_eq!(j, 0);
        }
    }

    #[test]
    fn zero_probability_is_floored() {
        let probs = vec![vec![1.0, 0.0]];
        let (v, _) = window_loss(&PositionTable::from_probs(&probs), &[1]).unwrap();
        assert_eq!(v, -PROB_FLOOR.ln());
    }

    #[test]
    fn answer_longer_than_horizon_is_rejected() {
        let table = PositionTable::from_probs(&[vec![0.5, 0.5]]);
        assert!(window_loss(&table, &[0, 1]).is_err());
        assert!(multi_answer_loss(&table, &[]).is_err());
    }

    #[test]
    fn single_and_duplicate_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = random_table(&mut rng, 5, 6);
        let ans = vec![2, 4];
        let (v, j) = window_loss(&table, &ans).unwrap();
        assert_eq!(multi_answer_loss(&table, std::slice::from_ref(&ans)).unwrap(), (v, 0, j));
        assert_eq!(
            multi_answer_loss(&table, &[ans.clone(), ans.clone()]).unwrap(),
            (v, 0, j)
        );
    }

    proptest! {
        #[test]
        fn matches_exhaustive_enumeration(seed in any::<u64>(), t in 1usize..=8, n_ans in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = 6;
            let table = random_table(&mut rng, t, v);
            let answers: Vec<Vec<usize>> = (0..n_ans)
                .map(|_| {
                    let k = rng.gen_range(1..=3.min(t));
                    (0..k).map(|_| rng.gen_range(0..v)).collect()
                })
                .collect();
            let got = multi_answer_loss(&table, &answers).unwrap();
            let want = brute_force(&table, &answers);
            prop_assert_eq!(got.0.to_bits(), want.0.to_bits());
            prop_assert_eq!((got.1, got.2), (want.1, want.2));
        }
    }

    fn toy_model() -> TinyLm {
        let tok = Tokenizer::from_words(["the capital of Ka is Lo Mi Ra"]);
        let mut cfg = ModelConfig::new(tok.vocab_size(), 4);
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ff = 32;
        cfg.max_context = 24;
        let mut params = ModelParams::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for w in params.as_mut_slice() {
            *w += rng.gen_range(-0.3..0.3);
        }
        TinyLm::new(params, tok).unwrap()
    }

    fn question(m: &TinyLm) -> PromptState {
        PromptState::from_question(&m.tokenizer.tokenize("the capital of Ka is"))
    }

    fn perturbed(m: &TinyLm, q: &PromptState, rng: &mut ChaCha8Rng) -> PromptState {
        let mut p = q.clone();
        let emb = q.embeddings(&m.params);
        let d = m.d_model();
        for i in 1..p.len() {
            let v: Vec<f64> = emb[i * d..(i + 1) * d]
                .iter()
                .map(|x| x + rng.gen_range(-0.2..0.2))
                .collect();
            p.slots[i] = Slot::Continuous(v);
        }
        p
    }

    #[test]
    fn semantic_loss_identity_and_symmetry() {
        let m = toy_model();
        let q = question(&m);
        assert_eq!(semantic_loss(&m, &q, &q).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = perturbed(&m, &q, &mut rng);
        let a = semantic_loss(&m, &x, &q).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, semantic_loss(&m, &q, &x).unwrap());
    }

    #[test]
    fn discreteness_cases() {
        let m = toy_model();
        let q = question(&m);
        let table = m.params.embedding_table();
        assert_eq!(discreteness_loss(&q, table), 0.0);
        let d = m.d_model();
        let id = q.token_ids().unwrap()[2];
        let mut u = vec![0.0; d];
        u[3] = 1.0;
        let eps = 1e-4;
        let v: Vec<f64> = m.params.embedding(id).iter().zip(&u).map(|(a, b)| a + eps * b).collect();
        let mut p = q.clone();
        p.slots[2] = Slot::Continuous(v.clone());
        assert!((discreteness_loss(&p, table) - eps).abs() < 1e-12);
        assert_eq!(nearest_row(table, &v).0, id);
    }

    #[test]
    fn breakdown_composition() {
        let m = toy_model();
        let q = question(&m);
        let answers = vec![m.tokenizer.tokenize("Lo").ids, m.tokenizer.tokenize("Mi Ra").ids];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = perturbed(&m, &q, &mut rng);
        let w = LossWeights { lambda1: 0.7, lambda2: 0.3 };
        let b = total_loss(&m, &x, &q, &answers, &w, 6).unwrap();
        assert_eq!(b.total, b.target + 0.7 * b.semantic + 0.3 * b.discreteness);
        assert!(b.target >= 0.0 && b.semantic >= 0.0 && b.discreteness >= 0.0);
        let z = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        let b0 = total_loss(&m, &x, &q, &answers, &z, 6).unwrap();
        assert_eq!(b0.total, b0.target);
        let (bg, _) = Objective::new(&m, &q, answers, w, 6).unwrap().evaluate_with_grad(&x).unwrap();
        assert_eq!(bg, b);
    }

    #[test]
    fn model_windows_match_fresh_forward_passes() {
        let m = toy_model();
        let q = question(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = m.params.vocab_size();
        for _ in 0..20 {
            let x = perturbed(&m, &q, &mut rng);
            let input = x.embeddings(&m.params);
            let scorer = ModelScorer::new(&m, &input, 6).unwrap();
            let decoded = scorer.decoded().to_vec();
            for start in 0..6 {
                for k in 1..=(6 - start).min(3) {
                    // Half the answers follow the decode for a while, then diverge.
                    let answer: Vec<usize> = (0..k)
                        .map(|i| if rng.gen_bool(0.5) { decoded[start + i] } else { rng.gen_range(0..v) })
                        .collect();
                    let mut ids = input.clone();
                    for &t in &decoded[..start] {
                        ids.extend_from_slice(m.params.embedding(t));
                    }
                    let mut expected = Vec::new();
                    for (i, &a) in answer.iter().enumerate() {
                        let out = m.forward(&ids).unwrap();
                        let rows = ids.len() / m.d_model();
                        expected.push(log_softmax(&out.logits[(rows - 1) * v..rows * v])[a]);
                        if i + 1 < k {
                            ids.extend_from_slice(m.params.embedding(a));
                        }
                    }
                    let got = scorer.window_log_probs(start, &answer);
                    let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                    assert_eq!(bits(&got), bits(&expected), "start {start} answer {answer:?}");
                }
            }
            // The pruned search agrees with scoring every window in full.
            let answers: Vec<Vec<usize>> = (0..4)
                .map(|_| (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..v)).collect())
                .chain([decoded[2..4].to_vec()])
                .collect();
            let mut full = (f64::INFINITY, 0, 0);
            for (a, ans) in answers.iter().enumerate() {
                for j in 0..=6 - ans.len() {
                    let nll = window_nll(&scorer.window_log_probs(j, ans));
                    if nll < full.0 {
                        full = (nll, a, j);
                    }
                }
            }
            let got = multi_answer_loss(&scorer, &answers).unwrap();
            assert_eq!((got.0.to_bits(), got.1, got.2), (full.0.to_bits(), full.1, full.2));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = toy_model();
        let q = question(&m);
        let answers = vec![m.tokenizer.tokenize("Lo").ids, m.tokenizer.tokenize("Mi Ra").ids];
        let obj = Objective::new(&m, &q, answers, LossWeights { lambda1: 0.5, lambda2: 0.1 }, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = perturbed(&m, &q, &mut rng);
        let (_, g) = obj.evaluate_with_grad(&x).unwrap();
        let d = m.d_model();
        let h = 1e-5;
        for i in 1..x.len() {
            for k in [0, 5, 11] {
                let shift = |s: f64| {
                    let mut p = x.clone();
                    if let Slot::Continuous(v) = &mut p.slots[i] {
                        v[k] += s;
                    }
                    obj.evaluate(&p).unwrap().total
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                let a = g[i * d + k];
                assert!((a - fd).abs() <= 1e-6 * a.abs().max(1e-2), "slot {i} coord {k}: {a} vs {fd}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn lambda1_monotone(seed in any::<u64>(), l1 in 0.0f64..3.0, extra in 0.0f64..3.0) {
            let m = toy_model();
            let q = question(&m);
            let answers = vec![m.tokenizer.tokenize("Lo").ids];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = perturbed(&m, &q, &mut rng);
            let lo = total_loss(&m, &x, &q, &answers, &LossWeights { lambda1: l1, lambda2: 0.01 }, 4).unwrap();
            let hi = total_loss(&m, &x, &q, &answers, &LossWeights { lambda1: l1 + extra, lambda2: 0.01 }, 4).unwrap();
            prop_assert!(hi.total >= lo.total);
        }
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights { lambda1: -1.0, lambda2: 0.0 }.validate().is_err());
        assert!(LossWeights { lambda1: 0.0, lambda2: f64::NAN }.validate().is_err());
    }
}
