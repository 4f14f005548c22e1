//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Trains one model per seed on the default planted world, then checks the
//! structural oracles and the scaled-down comparisons against those models.
//! Exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use boundary_probe::baselines::{trigger_token_probe, zero_shot_probe, TriggerConfig};
use boundary_probe::boundary::{best_alias_probability, boundary_stats, classify_record, ParaphraseEvidence, Verdict};
use boundary_probe::corpus::{
    generate_world, known_categories, render_training_examples, KnowledgeRecord, SyntheticWorld, WorldSpec,
};
use boundary_probe::losses::{multi_answer_loss, LossWeights, Objective, PositionTable, PROB_FLOOR};
use boundary_probe::pgdc::{
    calibrate_semantic_gate, default_ceil, jitter_prompt, optimize_prompt, proximal_project, PgdcConfig,
    ProbeResult,
};
use boundary_probe::tinylm::{log_softmax, train_examples, ModelConfig, ModelParams, TinyLm, TokenSeq, TrainConfig};
use boundary_probe::{PromptState, Slot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EPSILONS: [f64; 3] = [0.6, 0.8, 0.95];

struct Outcome {
    criterion: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(criterion: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    let o = Outcome {
        criterion,
        name,
        pass,
        detail,
    };
    println!(
        "{} criterion {}: {}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.criterion,
        o.name,
        o.detail
    );
    o
}

struct ParaphraseRun {
    zero_shot: bool,
    probability: f64,
    pgdc: ProbeResult,
}

struct RecordRun {
    record: KnowledgeRecord,
    runs: Vec<ParaphraseRun>,
    trigger: Option<bool>,
}

struct SeedRun {
    seed: u64,
    model: TinyLm,
    held_out: Vec<RecordRun>,
    counterfactual: Vec<RecordRun>,
    seconds: f64,
}

fn train_model(world: &SyntheticWorld, seed: u64) -> TinyLm {
    let tok = world.tokenizer();
    let examples = render_training_examples(world, &tok);
    let init = ModelParams::init(ModelConfig::new(tok.vocab_size(), seed)).expect("init");
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let (params, _) = train_examples(&init, &examples, &cfg).expect("train");
    TinyLm::new(params, tok).expect("model")
}

fn answers(model: &TinyLm, r: &KnowledgeRecord) -> Vec<TokenSeq> {
    r.aliases.iter().map(|a| model.tokenizer.tokenize(a)).collect()
}

fn probe_record(model: &TinyLm, r: &KnowledgeRecord, cfg: &PgdcConfig, trigger: Option<&TriggerConfig>) -> RecordRun {
    let ans = answers(model, r);
    let mut runs = Vec::new();
    let mut trigger_hit = trigger.map(|_| false);
    for p in &r.paraphrases {
        let q = model.tokenizer.tokenize(p);
        runs.push(ParaphraseRun {
            zero_shot: zero_shot_probe(model, &q, &ans, cfg.decode_horizon).expect("zero-shot"),
            probability: best_alias_probability(model, &q, &ans).expect("probability"),
            pgdc: optimize_prompt(model, &q, &ans, cfg).expect("pgdc"),
        });
        if let (Some(t), Some(hit)) = (trigger, trigger_hit.as_mut()) {
            *hit |= trigger_token_probe(model, &q, &ans, t).expect("trigger").success;
        }
    }
    RecordRun {
        record: r.clone(),
        runs,
        trigger: trigger_hit,
    }
}

fn run_seed(seed: u64) -> SeedRun {
    let started = Instant::now();
    let world = generate_world(&WorldSpec {
        seed,
        ..WorldSpec::default()
    })
    .expect("world");
    let model = train_model(&world, seed);
    let gate = calibrate_semantic_gate(&model, &world.training_battery(), PgdcConfig::default().decode_horizon)
        .expect("gate");
    let cfg = PgdcConfig {
        semantic_gate: gate,
        ..PgdcConfig::default()
    };
    let trigger = TriggerConfig::default();
    let battery = world.held_out_battery();
    let held_out = battery
        .iter()
        .filter(|r| !r.counterfactual)
        .map(|r| probe_record(&model, r, &cfg, None))
        .collect();
    let counterfactual = battery
        .iter()
        .filter(|r| r.counterfactual)
        .map(|r| probe_record(&model, r, &cfg, Some(&trigger)))
        .collect();
    let seconds = started.elapsed().as_secs_f64();
    eprintln!("seed {seed}: trained and probed in {seconds:.0}s (gate {gate:?})");
    SeedRun {
        seed,
        model,
        held_out,
        counterfactual,
        seconds,
    }
}

fn zero_solved(r: &RecordRun) -> bool {
    r.runs.iter().any(|p| p.zero_shot)
}

fn pgdc_solved(r: &RecordRun) -> bool {
    r.runs.iter().any(|p| p.pgdc.success)
}

// Criterion 1: analytic gradient of the objective against central differences
// on every coordinate of every continuous slot.
fn gradient_oracle(model: &TinyLm, records: &[KnowledgeRecord]) -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = model.d_model();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let n = 100;
    for i in 0..n {
        let r = &records[rng.gen_range(0..records.len())];
        let p = &r.paraphrases[rng.gen_range(0..r.paraphrases.len())];
        let q = PromptState::from_question(&model.tokenizer.tokenize(p));
        let ans: Vec<Vec<usize>> = answers(model, r).into_iter().map(|a| a.ids).collect();
        let obj = Objective::new(model, &q, ans, LossWeights::default(), PgdcConfig::default().decode_horizon)
            .expect("objective");
        let x = jitter_prompt(&model.params, &q, 0.05, 1000 + i);
        let (_, g) = obj.evaluate_with_grad(&x).expect("gradient");
        let (mut diff, mut ga, mut gf) = (0.0, 0.0, 0.0);
        for (s, slot) in x.slots.iter().enumerate() {
            if !matches!(slot, Slot::Continuous(_)) {
                continue;
            }
            for k in 0..d {
                let at = |delta: f64| {
                    let mut y = x.clone();
                    if let Slot::Continuous(v) = &mut y.slots[s] {
                        v[k] += delta;
                    }
                    obj.evaluate(&y).expect("objective").total
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let a = g[s * d + k];
                diff += (a - fd) * (a - fd);
                ga += a * a;
                gf += fd * fd;
            }
        }
        let rel = diff.sqrt() / ga.sqrt().max(gf.sqrt()).max(f64::MIN_POSITIVE);
        if rel >= 1e-5 {
            failures += 1;
        }
        worst = worst.max(rel);
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        1,
        "gradient oracle",
        failures == 0 && secs < 300.0,
        format!("{n} instances, max relative error {worst:.2e} (bound 1e-5), {failures} over bound, {secs:.0}s (bound 300s)"),
    )
}

fn enumerate_windows(table: &PositionTable, answers: &[Vec<usize>]) -> (f64, usize, usize) {
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

// Criterion 2.
fn window_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let t = rng.gen_range(1..=8);
        let v = rng.gen_range(2..=12);
        let table = PositionTable {
            log_probs: (0..t)
                .map(|_| {
                    // Occasional -inf logits exercise the probability floor.
                    let logits: Vec<f64> = (0..v)
                        .map(|_| if rng.gen_bool(0.05) { f64::NEG_INFINITY } else { rng.gen_range(-6.0..6.0) })
                        .collect();
                    if logits.iter().all(|l| l.is_infinite()) {
                        vec![-(v as f64).ln(); v]
                    } else {
                        log_softmax(&logits)
                    }
                })
                .collect(),
        };
        let aliases = rng.gen_range(1..=4);
        let answers: Vec<Vec<usize>> = (0..aliases)
            .map(|_| {
                let k = rng.gen_range(1..=t.min(3));
                (0..k).map(|_| rng.gen_range(0..v)).collect()
            })
            .collect();
        let (loss, a, j) = multi_answer_loss(&table, &answers).expect("window loss");
        let (bl, ba, bj) = enumerate_windows(&table, &answers);
        if loss.to_bits() != bl.to_bits() || a != ba || j != bj {
            mismatches += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        2,
        "window-loss oracle",
        mismatches == 0 && secs < 60.0,
        format!("1000 instances, {mismatches} mismatches (bitwise), {secs:.2}s"),
    )
}

// Criterion 3.
fn projection_oracle(model: &TinyLm) -> Outcome {
    let table = model.params.embedding_table();
    let d = model.d_model();
    let vocab = model.params.vocab_size();
    let ceil = default_ceil(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut mismatches, mut not_idempotent, mut snapped, mut kept) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let len = rng.gen_range(1..=12);
        let slots: Vec<Slot> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    return Slot::Discrete(rng.gen_range(0..vocab));
                }
                let row = rng.gen_range(0..vocab);
                let scale = [0.0, 0.002, 0.005, 0.01, 0.03][rng.gen_range(0..5)];
                Slot::Continuous(
                    table[row * d..(row + 1) * d]
                        .iter()
                        .map(|v| v + scale * rng.gen_range(-1.0..1.0))
                        .collect(),
                )
            })
            .collect();
        let prompt = PromptState {
            slots,
            origin_question: TokenSeq::default(),
        };
        let projected = proximal_project(&prompt, table, ceil);
        for (before, after) in prompt.slots.iter().zip(&projected.slots) {
            let expected = match before {
                Slot::Discrete(id) => Slot::Discrete(*id),
                Slot::Continuous(v) => {
                    let mut best = (0, f64::INFINITY);
                    for r in 0..vocab {
                        let mut sq = 0.0;
                        for k in 0..d {
                            let e = table[r * d + k] - v[k];
                            sq += e * e;
                        }
                        if sq < best.1 {
                            best = (r, sq);
                        }
                    }
                    if best.1.sqrt() < ceil {
                        snapped += 1;
                        Slot::Discrete(best.0)
                    } else {
                        kept += 1;
                        Slot::Continuous(v.clone())
                    }
                }
            };
            let same = match (&expected, after) {
                (Slot::Discrete(a), Slot::Discrete(b)) => a == b,
                (Slot::Continuous(a), Slot::Continuous(b)) => {
                    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            };
            if !same {
                mismatches += 1;
            }
        }
        if proximal_project(&projected, table, ceil) != projected {
            not_idempotent += 1;
        }
    }
    outcome(
        3,
        "projection oracle",
        mismatches == 0 && not_idempotent == 0,
        format!(
            "1000 prompts, {mismatches} slot mismatches, {not_idempotent} non-idempotent \
             ({snapped} slots snapped, {kept} kept continuous)"
        ),
    )
}

// Criterion 4.
fn optimality(runs: &[SeedRun]) -> Outcome {
    let mut all_ge = true;
    let mut strictly = 0;
    let mut parts = Vec::new();
    for s in runs {
        let z = s.held_out.iter().filter(|r| zero_solved(r)).count();
        let p = s.held_out.iter().filter(|r| pgdc_solved(r)).count();
        all_ge &= p >= z;
        strictly += usize::from(p > z);
        parts.push(format!("seed {} pgdc {p}/{n} p-zero {z}/{n}", s.seed, n = s.held_out.len()));
    }
    let secs: f64 = runs.iter().map(|s| s.seconds).sum();
    outcome(
        4,
        "optimality direction",
        all_ge && strictly >= 3 && secs < 1800.0,
        format!("{}; strictly greater on {strictly}/5; {secs:.0}s (bound 1800s)", parts.join(", ")),
    )
}

// Criterion 5.
fn robustness(runs: &[SeedRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in runs {
        let n = s.counterfactual.len();
        let p = s.counterfactual.iter().filter(|r| pgdc_solved(r)).count();
        let t = s.counterfactual.iter().filter(|r| r.trigger == Some(true)).count();
        let (pr, tr) = (p as f64 / n as f64, t as f64 / n as f64);
        pass &= n == 50 && pr <= 0.10 && tr >= pr + 0.30;
        parts.push(format!("seed {} pgdc {p}/{n} trigger {t}/{n}", s.seed));
    }
    outcome(
        5,
        "robustness direction",
        pass,
        format!("{} (bounds: pgdc <= 10%, trigger >= pgdc + 30pp)", parts.join(", ")),
    )
}

// Criterion 6.
fn subsumption(runs: &[SeedRun]) -> Outcome {
    let (mut solved, mut violations) = (0, 0);
    for r in runs.iter().flat_map(|s| s.held_out.iter().chain(&s.counterfactual)) {
        for p in r.runs.iter().filter(|p| p.zero_shot) {
            solved += 1;
            if !(p.pgdc.success && p.pgdc.iterations_used == 0) {
                violations += 1;
            }
        }
        if zero_solved(r) && !pgdc_solved(r) {
            violations += 1;
        }
    }
    outcome(
        6,
        "zero-shot subsumption",
        violations == 0,
        format!("{solved} zero-shot successes, {violations} not solved by pgdc at iteration 0"),
    )
}

// Criterion 7.
fn boundary_partition(runs: &[SeedRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let known = known_categories();
    for s in runs {
        let records: Vec<&RecordRun> = s.held_out.iter().chain(&s.counterfactual).collect();
        let mut agnostic_sets: Vec<BTreeSet<String>> = Vec::new();
        for &eps in &EPSILONS {
            let verdicts: Vec<_> = records
                .iter()
                .map(|r| {
                    let evidence = r
                        .record
                        .paraphrases
                        .iter()
                        .zip(&r.runs)
                        .map(|(p, run)| ParaphraseEvidence {
                            paraphrase: p.clone(),
                            zero_shot: run.zero_shot,
                            answer_probability: run.probability,
                            pgdc: run.pgdc.success,
                        })
                        .collect();
                    classify_record(&r.record.id, &r.record.category, evidence, eps).expect("verdict")
                })
                .collect();
            let report = boundary_stats(&verdicts, &[], &[], PgdcConfig::default().iterations, &known)
                .expect("boundary stats");
            let by_kind = |k: Verdict| -> BTreeSet<String> {
                verdicts.iter().filter(|v| v.verdict == k).map(|v| v.id.clone()).collect()
            };
            let sets = Verdict::ALL.map(by_kind);
            let union: BTreeSet<&String> = sets.iter().flatten().collect();
            let disjoint = sets.iter().map(BTreeSet::len).sum::<usize>() == union.len();
            pass &= disjoint && union.len() == records.len() && report.totals.total() == records.len();
            parts.push(format!(
                "seed {} eps {eps}: {}/{}/{}",
                s.seed,
                sets[0].len(),
                sets[1].len(),
                sets[2].len()
            ));
            agnostic_sets.push(sets[0].clone());
        }
        for w in agnostic_sets.windows(2) {
            pass &= w[1].is_subset(&w[0]);
        }
    }
    outcome(
        7,
        "boundary partition and epsilon monotonicity",
        pass,
        format!("agnostic/sensitive/unanswerable: {}", parts.join(", ")),
    )
}

// Criterion 8.
fn iteration_budget(runs: &[SeedRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in runs {
        let iters: Vec<usize> = s
            .held_out
            .iter()
            .flat_map(|r| &r.runs)
            .filter(|p| p.pgdc.success)
            .map(|p| p.pgdc.iterations_used)
            .collect();
        let within = iters.iter().filter(|&&i| i <= 15).count();
        let optimised: Vec<usize> = iters.iter().copied().filter(|&i| i > 0).collect();
        let opt_within = optimised.iter().filter(|&&i| i <= 15).count();
        let frac = within as f64 / iters.len().max(1) as f64;
        pass &= !iters.is_empty() && frac >= 0.60;
        parts.push(format!(
            "seed {} {within}/{} ({:.0}%; {opt_within}/{} excluding iteration 0)",
            s.seed,
            iters.len(),
            100.0 * frac,
            optimised.len()
        ));
    }
    outcome(8, "iteration budget", pass, format!("successes within 15 of 25 iterations: {}", parts.join(", ")))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_boundary-probe"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let world = p("world");
    cli(&["gen-world", "--out", &world, "--seed", "9"])?;
    cli(&["train", "--world", &world, "--out", &p("model.bplm"), "--epochs", "3", "--seed", "9"])?;
    let records = std::fs::read_to_string(dir.join("world/records.jsonl")).map_err(|e| e.to_string())?;
    let subset: String = records.lines().take(16).map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.join("subset.jsonl"), subset).map_err(|e| e.to_string())?;
    let known = p("world/known.jsonl");
    for method in ["pgdc", "zero", "trigger"] {
        let mut args = vec![
            "probe",
            "--checkpoint",
            "model.bplm",
            "--records",
            "subset.jsonl",
            "--method",
            method,
            "--seed",
            "9",
            "--workers",
            "2",
        ];
        let out = format!("{method}.jsonl");
        args.extend(["--out", out.as_str()]);
        if method == "pgdc" {
            args.extend(["--calibrate", known.as_str()]);
        }
        let absolute: Vec<String> = args
            .iter()
            .map(|a| if a.ends_with(".jsonl") || a.ends_with(".bplm") { p(a) } else { a.to_string() })
            .collect();
        let refs: Vec<&str> = absolute.iter().map(String::as_str).collect();
        cli(&refs)?;
    }
    let (pg, ze, tr, rep) = (p("pgdc.jsonl"), p("zero.jsonl"), p("trigger.jsonl"), p("report"));
    cli(&["report", "--results", &pg, "--results", &ze, "--results", &tr, "--out", &rep])?;
    let mut files = Vec::new();
    for name in [
        "world/world.json",
        "world/records.jsonl",
        "world/corpus.jsonl",
        "model.bplm",
        "pgdc.jsonl",
        "zero.jsonl",
        "trigger.jsonl",
        "report/report.json",
        "report/coverage.csv",
        "report/histogram.csv",
    ] {
        files.push((name.to_string(), std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?));
    }
    Ok(files)
}

// Criterion 9.
fn determinism() -> Outcome {
    let run = || -> Result<Vec<(String, Vec<u8>)>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        pipeline(dir.path())
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&str> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x.1 != y.1)
                .map(|(x, _)| x.0.as_str())
                .collect();
            outcome(
                9,
                "determinism",
                differing.is_empty(),
                format!(
                    "{} artefacts compared byte for byte (3-epoch model, 16 records), differing: {:?}",
                    a.len(),
                    differing
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(9, "determinism", false, e),
    }
}

fn main() {
    let mut outcomes = vec![window_oracle()];
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let world0 = generate_world(&WorldSpec::default()).expect("world");
    outcomes.push(gradient_oracle(&runs[0].model, &world0.held_out_battery()));
    outcomes.push(projection_oracle(&runs[0].model));
    outcomes.push(optimality(&runs));
    outcomes.push(robustness(&runs));
    outcomes.push(subsumption(&runs));
    outcomes.push(boundary_partition(&runs));
    outcomes.push(iteration_budget(&runs));
    outcomes.push(determinism());
    outcomes.sort_by_key(|o| o.criterion);
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.criterion).collect();
    println!("summary: {}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    for o in &outcomes {
        println!("  {} {}: {}", o.criterion, o.name, if o.pass { "PASS" } else { "FAIL" });
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
