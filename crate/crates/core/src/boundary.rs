//! Knowledge-boundary verdicts and per-category aggregation.
//!
//! A record is prompt-agnostic when every available paraphrase gives some
//! alias a probability above `ε`, unanswerable when no paraphrase reaches `ε`
//! and no optimized prompt elicits an alias, and prompt-sensitive otherwise.
//! "Every paraphrase" means the dataset's paraphrases plus the prompts PGDC
//! found for them, not every possible wording.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::PromptState;
use crate::tinylm::tokenizer::TokenSeq;
use crate::tinylm::{log_softmax, TinyLm};

/// Just above the lower edge of the open interval `(0.5, 1]`.
pub const DEFAULT_EPSILON: f64 = 0.5 + 1e-9;

/// Category for records whose tag is not among the known categories.
pub const OTHER_CATEGORY: &str = "other";

/// Header carried by every report.
pub const CAVEAT: &str = "Verdicts quantify over each record's listed paraphrases and the prompts \
optimized from them, not over every possible wording of the question.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    PromptAgnostic,
    PromptSensitive,
    Unanswerable,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::PromptAgnostic, Verdict::PromptSensitive, Verdict::Unanswerable];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::PromptAgnostic => "prompt_agnostic",
            Verdict::PromptSensitive => "prompt_sensitive",
            Verdict::Unanswerable => "unanswerable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseEvidence {
    pub paraphrase: String,
    pub zero_shot: bool,
    /// Highest teacher-forced probability over the answer aliases.
    pub answer_probability: f64,
    pub pgdc: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryVerdict {
    pub id: String,
    pub category: String,
    pub verdict: Verdict,
    pub epsilon: f64,
    pub evidence: Vec<ParaphraseEvidence>,
}

/// Probability that `answer` immediately follows `<bos> paraphrase`, as the
/// product of its teacher-forced token probabilities.
pub fn answer_probability(model: &TinyLm, paraphrase: &TokenSeq, answer: &TokenSeq) -> Result<f64> {
    if answer.is_empty() {
        return Err(Error::EmptyInput("answer"));
    }
    let prompt = PromptState::from_question(paraphrase);
    let mut ids = prompt.token_ids().expect("question prompts are discrete");
    let start = ids.len();
    ids.extend(&answer.ids);
    if ids.len() > model.max_context() {
        return Err(Error::LengthOverflow {
            len: ids.len(),
            max: model.max_context(),
        });
    }
    let out = model.forward_ids(&ids)?;
    let v = model.params.vocab_size();
    let log_p: f64 = answer
        .ids
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            let row = start - 1 + i;
            log_softmax(&out.logits[row * v..(row + 1) * v])[tok]
        })
        .sum();
    Ok(log_p.exp())
}

/// Best [`answer_probability`] over a set of aliases.
pub fn best_alias_probability(model: &TinyLm, paraphrase: &TokenSeq, aliases: &[TokenSeq]) -> Result<f64> {
    if aliases.is_empty() {
        return Err(Error::EmptyInput("answer aliases"));
    }
    aliases.iter().try_fold(0.0f64, |best, a| {
        Ok(best.max(answer_probability(model, paraphrase, a)?))
    })
}

pub fn validate_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.5 && epsilon <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("epsilon {epsilon} is outside (0.5, 1]")))
    }
}

pub fn classify(evidence: &[ParaphraseEvidence], epsilon: f64) -> Result<Verdict> {
    validate_epsilon(epsilon)?;
    if evidence.is_empty() {
        return Err(Error::EmptyInput("paraphrase evidence"));
    }
    if evidence.iter().any(|e| !(0.0..=1.0).contains(&e.answer_probability)) {
        return Err(Error::Precondition("answer probability outside [0, 1]".into()));
    }
    if evidence.iter().all(|e| e.answer_probability > epsilon) {
        Ok(Verdict::PromptAgnostic)
    } else if evidence.iter().all(|e| !e.pgdc && e.answer_probability < epsilon) {
        Ok(Verdict::Unanswerable)
    } else {
        Ok(Verdict::PromptSensitive)
    }
}

pub fn classify_record(
    id: &str,
    category: &str,
    evidence: Vec<ParaphraseEvidence>,
    epsilon: f64,
) -> Result<BoundaryVerdict> {
    let verdict = classify(&evidence, epsilon)?;
    Ok(BoundaryVerdict {
        id: id.to_string(),
        category: category.to_string(),
        verdict,
        epsilon,
        evidence,
    })
}

/// Record-level outcome of one probing method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub record_id: String,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub prompt_agnostic: usize,
    pub prompt_sensitive: usize,
    pub unanswerable: usize,
}

impl VerdictCounts {
    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::PromptAgnostic => self.prompt_agnostic += 1,
            Verdict::PromptSensitive => self.prompt_sensitive += 1,
            Verdict::Unanswerable => self.unanswerable += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.prompt_agnostic + self.prompt_sensitive + self.unanswerable
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub successes: usize,
    pub total: usize,
}

impl Coverage {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.successes as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub verdicts: VerdictCounts,
    /// Method name to record-level coverage.
    pub methods: BTreeMap<String, Coverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub caveat: String,
    pub epsilon: Option<f64>,
    pub totals: VerdictCounts,
    pub categories: BTreeMap<String, CategoryStats>,
    /// Successful PGDC runs by the iteration they succeeded at, `0..=T`.
    pub iteration_histogram: Vec<usize>,
}

/// One CSV row: a category and a method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub category: String,
    pub method: String,
    pub successes: usize,
    pub total: usize,
    pub coverage: f64,
    pub prompt_agnostic: usize,
    pub prompt_sensitive: usize,
    pub unanswerable: usize,
}

fn resolve_category(category: &str, known: &BTreeSet<String>) -> String {
    if known.contains(category) {
        category.to_string()
    } else {
        OTHER_CATEGORY.to_string()
    }
}

/// Aggregate verdicts, method outcomes and PGDC success iterations.
///
/// Outcomes are attributed to the category of the verdict with the same
/// record id; outcomes without a verdict, and categories outside `known`,
/// land under [`OTHER_CATEGORY`].
pub fn boundary_stats(
    verdicts: &[BoundaryVerdict],
    outcomes: &[MethodOutcome],
    pgdc_success_iterations: &[usize],
    max_iterations: usize,
    known: &BTreeSet<String>,
) -> Result<BoundaryReport> {
    let mut epsilon = None;
    let mut seen = BTreeSet::new();
    let mut category_of = BTreeMap::new();
    let mut totals = VerdictCounts::default();
    let mut categories: BTreeMap<String, CategoryStats> = BTreeMap::new();
    for v in verdicts {
        if !seen.insert(v.id.as_str()) {
            return Err(Error::Precondition(format!("duplicate verdict for `{}`", v.id)));
        }
        match epsilon {
            None => epsilon = Some(v.epsilon),
            Some(e) if e != v.epsilon => {
                return Err(Error::Precondition("verdicts use different epsilons".into()))
            }
            _ => {}
        }
        let cat = resolve_category(&v.category, known);
        totals.add(v.verdict);
        categories.entry(cat.clone()).or_default().verdicts.add(v.verdict);
        category_of.insert(v.id.as_str(), cat);
    }
    for o in outcomes {
        let cat = category_of
            .get(o.record_id.as_str())
            .cloned()
            .unwrap_or_else(|| OTHER_CATEGORY.to_string());
        let c = categories
            .entry(cat)
            .or_default()
            .methods
            .entry(o.method.clone())
            .or_default();
        c.total += 1;
        c.successes += o.success as usize;
    }
    let mut iteration_histogram = vec![0usize; max_iterations + 1];
    for &t in pgdc_success_iterations {
        if t > max_iterations {
            return Err(Error::Precondition(format!(
                "success at iteration {t} exceeds the budget of {max_iterations}"
            )));
        }
        iteration_histogram[t] += 1;
    }
    Ok(BoundaryReport {
        caveat: CAVEAT.to_string(),
        epsilon,
        totals,
        categories,
        iteration_histogram,
    })
}

impl BoundaryReport {
    /// One row per category and method, sorted by both.
    pub fn coverage_rows(&self) -> Vec<CoverageRow> {
        let mut rows = Vec::new();
        for (cat, stats) in &self.categories {
            for (method, cov) in &stats.methods {
                rows.push(CoverageRow {
                    category: cat.clone(),
                    method: method.clone(),
                    successes: cov.successes,
                    total: cov.total,
                    coverage: cov.rate(),
                    prompt_agnostic: stats.verdicts.prompt_agnostic,
                    prompt_sensitive: stats.verdicts.prompt_sensitive,
                    unanswerable: stats.verdicts.unanswerable,
                });
            }
        }
        rows
    }

    /// Successful runs within the first `t` iterations, over all successful runs.
    pub fn fraction_within(&self, t: usize) -> Option<f64> {
        let total: usize = self.iteration_histogram.iter().sum();
        if total == 0 {
            return None;
        }
        let within: usize = self.iteration_histogram.iter().take(t + 1).sum();
        Some(within as f64 / total as f64)
    }
}
