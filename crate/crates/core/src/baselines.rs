//! Fixed-prompt baselines and the unconstrained trigger-token search.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::KnowledgeRecord;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Objective};
use crate::pgdc::{match_answer, ProbeResult};
use crate::prompt::{PromptState, Slot};
use crate::tinylm::tokenizer::{TokenId, TokenSeq, TAB};
use crate::tinylm::TinyLm;

pub const DISCRIMINATOR_PREFIX: &str = "Check whether the following statement is correct:";
pub const DISCRIMINATOR_SUFFIX: &str = ". The statement is (True/False):";
pub const TRUE_WORD: &str = "True";
pub const FALSE_WORD: &str = "False";

/// Words the discriminator prompt needs in the vocabulary.
pub const DISCRIMINATOR_WORDS: [&str; 12] = [
    "Check",
    "whether",
    "the",
    "following",
    "statement",
    "is",
    "correct:",
    ".",
    "The",
    "(True/False):",
    TRUE_WORD,
    FALSE_WORD,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    SingleRandomParaphrase,
    AnyParaphrase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    Zero,
    Few { exemplars: usize },
    Dis,
    TriggerToken { triggers: usize, rounds: usize },
}

fn decode_matches(model: &TinyLm, prompt: &PromptState, answers: &[TokenSeq], m: usize) -> Result<bool> {
    if answers.is_empty() {
        return Err(Error::Precondition("empty answer set".into()));
    }
    let decoded = model.greedy_decode(prompt, m)?;
    let ids: Vec<Vec<TokenId>> = answers.iter().map(|a| a.ids.clone()).collect();
    Ok(match_answer(&decoded.ids, &ids).is_some())
}

/// Greedy decode from the bare paraphrase.
pub fn zero_shot_probe(model: &TinyLm, paraphrase: &TokenSeq, answers: &[TokenSeq], m: usize) -> Result<bool> {
    if paraphrase.is_empty() {
        return Err(Error::EmptyInput("paraphrase"));
    }
    decode_matches(model, &PromptState::from_question(paraphrase), answers, m)
}

/// `q₁ a₁ \t q₂ a₂ \t … \t query`.
pub fn few_shot_prompt(exemplars: &[(String, String)], paraphrase: &str) -> String {
    let mut parts: Vec<String> = exemplars.iter().map(|(q, a)| format!("{q} {a}")).collect();
    parts.push(paraphrase.to_string());
    parts.join(&format!(" {TAB} "))
}

pub fn few_shot_probe(
    model: &TinyLm,
    paraphrase: &str,
    answers: &[TokenSeq],
    exemplars: &[(String, String)],
    m: usize,
) -> Result<bool> {
    let q = model.tokenizer.tokenize(&few_shot_prompt(exemplars, paraphrase));
    zero_shot_probe(model, &q, answers, m)
}

/// Up to `count` exemplars as `(question, answer)`: same-relation facts first,
/// then others, each group in seeded random order. The exemplar question uses
/// the same template position as the query paraphrase where it exists.
pub fn select_exemplars(
    records: &[KnowledgeRecord],
    query: &KnowledgeRecord,
    paraphrase_index: usize,
    count: usize,
    seed: u64,
) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&query.id));
    let pool = |same: bool| {
        records
            .iter()
            .filter(move |r| !r.counterfactual && r.id != query.id && (r.relation == query.relation) == same)
            .collect::<Vec<_>>()
    };
    let mut same = pool(true);
    let mut other = pool(false);
    same.shuffle(&mut rng);
    other.shuffle(&mut rng);
    same.into_iter()
        .chain(other)
        .take(count)
        .map(|r| {
            let q = &r.paraphrases[paraphrase_index.min(r.paraphrases.len() - 1)];
            (q.clone(), r.object.clone())
        })
        .collect()
}

/// 64-bit FNV-1a, used to derive per-record seeds that do not depend on record order.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn discriminator_prompt(paraphrase: &str, answer: &str) -> String {
    format!("{DISCRIMINATOR_PREFIX} {paraphrase} {answer} {DISCRIMINATOR_SUFFIX}")
}

/// True iff the model scores `True` above `False` right after the statement prompt.
pub fn discriminator_probe(model: &TinyLm, paraphrase: &str, answer: &str) -> Result<bool> {
    if answer.trim().is_empty() {
        return Err(Error::Precondition("discriminator needs an answer".into()));
    }
    let tok = &model.tokenizer;
    let (t, f) = match (tok.id(TRUE_WORD), tok.id(FALSE_WORD)) {
        (Some(t), Some(f)) => (t, f),
        _ => {
            return Err(Error::Precondition(
                "vocabulary lacks the True/False tokens".into(),
            ))
        }
    };
    let q = tok.tokenize(&discriminator_prompt(paraphrase, answer));
    let prompt = PromptState::from_question(&q);
    let trace = model.trace(&prompt.embeddings(&model.params))?;
    let logits = trace.logits(&model.params, trace.len() - 1);
    Ok(logits[t] > logits[f])
}

/// Record-level success from per-paraphrase outcomes.
pub fn p_aggregate(successes: &[bool], aggregate: Aggregate, seed: u64) -> Result<bool> {
    if successes.is_empty() {
        return Err(Error::EmptyInput("paraphrase results"));
    }
    Ok(match aggregate {
        Aggregate::AnyParaphrase => successes.iter().any(|&s| s),
        Aggregate::SingleRandomParaphrase => {
            let i = ChaCha8Rng::seed_from_u64(seed).gen_range(0..successes.len());
            successes[i]
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerConfig {
    pub triggers: usize,
    pub rounds: usize,
    pub decode_horizon: usize,
    /// Candidates per position re-scored exactly; 1 takes the first-order best.
    pub candidates: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            triggers: 5,
            rounds: 3,
            decode_horizon: 10,
            candidates: 10,
        }
    }
}

/// Append triggers initialised to the paraphrase's last token and improve
/// them by first-order token substitution, with no semantic constraint.
/// `iterations_used` counts completed rounds.
pub fn trigger_token_probe(
    model: &TinyLm,
    paraphrase: &TokenSeq,
    answers: &[TokenSeq],
    config: &TriggerConfig,
) -> Result<ProbeResult> {
    if config.triggers == 0 {
        return Err(Error::InvalidConfig("trigger count must be at least 1".into()));
    }
    if config.candidates == 0 {
        return Err(Error::InvalidConfig("candidate count must be at least 1".into()));
    }
    let last = *paraphrase.ids.last().ok_or(Error::EmptyInput("paraphrase"))?;
    let q = PromptState::from_question(paraphrase);
    let mut x = q.clone();
    x.slots.extend((0..config.triggers).map(|_| Slot::Discrete(last)));
    let need = x.len() + config.decode_horizon;
    if need > model.max_context() {
        return Err(Error::LengthOverflow {
            len: need,
            max: model.max_context(),
        });
    }
    let ids: Vec<Vec<TokenId>> = answers.iter().map(|a| a.ids.clone()).collect();
    let weights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
    };
    let objective = Objective::new(model, &q, ids.clone(), weights, config.decode_horizon)?;
    let params = &model.params;
    let d = params.d_model();
    let vocab = params.vocab_size();
    let first_trigger = q.len();

    let check = |p: &PromptState| -> Result<(Vec<TokenId>, Option<(usize, usize)>)> {
        let (_, decoded) = model.decode_trace(&p.embeddings(params), config.decode_horizon)?;
        let m = match_answer(&decoded, &ids);
        Ok((decoded, m))
    };

    let (mut decoded, mut matched) = check(&x)?;
    let mut current = objective.evaluate(&x)?;
    let mut trace = vec![current.clone()];
    let mut rounds = 0;
    'rounds: for _ in 0..config.rounds {
        if matched.is_some() {
            break;
        }
        rounds += 1;
        for pos in first_trigger..x.len() {
            let (_, grad) = objective.evaluate_with_grad(&x)?;
            let g = &grad[pos * d..(pos + 1) * d];
            let cur = match x.slots[pos] {
                Slot::Discrete(id) => id,
                Slot::Continuous(_) => unreachable!("trigger slots stay discrete"),
            };
            let here: f64 = params.embedding(cur).iter().zip(g).map(|(a, b)| a * b).sum();
            let mut scored: Vec<(f64, TokenId)> = (0..vocab)
                .filter(|&v| !model.tokenizer.is_special(v) && v != cur)
                .map(|v| {
                    let s: f64 = params.embedding(v).iter().zip(g).map(|(a, b)| a * b).sum();
                    (s - here, v)
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if config.candidates == 1 {
                if let Some(&(s, v)) = scored.first() {
                    if s < 0.0 {
                        x.slots[pos] = Slot::Discrete(v);
                        current = objective.evaluate(&x)?;
                    }
                }
            } else {
                let mut best: Option<(f64, TokenId)> = None;
                for &(_, v) in scored.iter().take(config.candidates) {
                    let mut trial = x.clone();
                    trial.slots[pos] = Slot::Discrete(v);
                    let b = objective.evaluate(&trial)?;
                    if b.total < current.total && best.is_none_or(|(t, _)| b.total < t) {
                        best = Some((b.total, v));
                    }
                }
                if let Some((_, v)) = best {
                    x.slots[pos] = Slot::Discrete(v);
                    current = objective.evaluate(&x)?;
                }
            }
            (decoded, matched) = check(&x)?;
            if matched.is_some() {
                trace.push(current.clone());
                break 'rounds;
            }
        }
        trace.push(current.clone());
    }

    let (matched_answer, matched_window) = match matched {
        Some((a, j)) => (Some(answers[a].clone()), Some(j)),
        None => (None, None),
    };
    Ok(ProbeResult {
        success: matched.is_some(),
        final_semantic: objective.semantic(&x)?,
        final_prompt: x,
        iterations_used: rounds,
        trace,
        decoded: model.tokenizer.seq_from_ids(decoded),
        matched_answer,
        matched_window,
    })
}
