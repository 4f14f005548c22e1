//! Command-line front end: `gen-world`, `train`, `probe` and `report`.
//!
//! Settings resolve as flags, then the TOML file given by `--config`, then
//! built-in defaults. The seed falls back to `BOUNDARY_PROBE_SEED` after the
//! config file. Every command writes a [`RunManifest`] next to its output.
//!
//! Config file layout (all keys optional):
//!
//! ```toml
//! seed = 0
//! [world]    # WorldSpec fields
//! [model]    # ModelConfig fields except vocab_size
//! [train]    # TrainConfig fields
//! [pgdc]     # PgdcConfig fields, with [pgdc.weights] for lambda1/lambda2
//! [trigger]  # TriggerConfig fields
//! [probe]    # method, aggregate, workers, shots
//! [report]   # epsilon
//! ```

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    discriminator_probe, few_shot_probe, p_aggregate, select_exemplars, stable_hash, trigger_token_probe,
    zero_shot_probe, Aggregate, TriggerConfig,
};
use crate::boundary::{
    best_alias_probability, boundary_stats, classify_record, validate_epsilon, BoundaryReport, BoundaryVerdict,
    MethodOutcome, ParaphraseEvidence, DEFAULT_EPSILON,
};
use crate::corpus::{
    generate_world, known_categories, load_records, render_training_examples, save_records, KnowledgeRecord,
    WorldSpec,
};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::pgdc::{calibrate_semantic_gate, optimize_prompt, PgdcConfig};
use crate::tinylm::tokenizer::TokenSeq;
use crate::tinylm::{
    load_checkpoint, save_checkpoint, train_examples, ModelConfig, ModelParams, TinyLm, Tokenizer, TrainConfig,
    TrainingExample,
};

/// Version of the results JSONL line format.
pub const SCHEMA_VERSION: u32 = 1;

pub const SEED_ENV: &str = "BOUNDARY_PROBE_SEED";

#[derive(Debug, Parser)]
#[command(name = "boundary-probe", version, about = "Probe the knowledge boundary of a small language model")]
pub struct Cli {
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: records, held-out battery and training corpus.
    GenWorld(GenWorldArgs),
    /// Train the language model on a generated corpus.
    Train(TrainArgs),
    /// Probe records with one method and write per-paraphrase results.
    Probe(ProbeArgs),
    /// Classify records and aggregate coverage from probe results.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    #[arg(long)]
    pub facts: Option<usize>,
    #[arg(long)]
    pub counterfactuals: Option<usize>,
    #[arg(long)]
    pub templates: Option<usize>,
    #[arg(long)]
    pub held_out: Option<usize>,
    #[arg(long)]
    pub objects: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `gen-world`.
    #[arg(long)]
    pub world: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pgdc,
    Zero,
    Few,
    Dis,
    Trigger,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pgdc => "pgdc",
            Method::Zero => "zero",
            Method::Few => "few",
            Method::Dis => "dis",
            Method::Trigger => "trigger",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateArg {
    Single,
    Any,
}

impl From<AggregateArg> for Aggregate {
    fn from(a: AggregateArg) -> Self {
        match a {
            AggregateArg::Single => Aggregate::SingleRandomParaphrase,
            AggregateArg::Any => Aggregate::AnyParaphrase,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Records to probe (JSONL).
    #[arg(long)]
    pub records: PathBuf,
    /// Results path (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long, value_enum)]
    pub aggregate: Option<AggregateArg>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Projection ceil; defaults to half the median nearest-row distance.
    #[arg(long)]
    pub ceil: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Semantic gate for PGDC successes.
    #[arg(long, conflicts_with = "calibrate")]
    pub gate: Option<f64>,
    /// Records the model is known to hold; the gate becomes the 95th
    /// percentile of paraphrase distances among them.
    #[arg(long)]
    pub calibrate: Option<PathBuf>,
    /// Exemplar pool for few-shot prompts; defaults to `--records`.
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub triggers: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results files from `probe`; may be repeated.
    #[arg(long, required = true)]
    pub results: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Iteration budget used for the histogram.
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub world: Option<toml::Table>,
    pub model: Option<toml::Table>,
    pub train: Option<toml::Table>,
    pub pgdc: Option<toml::Table>,
    pub trigger: Option<toml::Table>,
    pub probe: Option<toml::Table>,
    pub report: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {}", p.display(), e.message())))
            }
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// `base` with the keys of `table` laid over it.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: Option<&toml::Table>, section: &str) -> Result<T> {
    let Some(table) = table else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let mut merged = toml::Table::try_from(base)
        .map_err(|e| Error::InvalidConfig(format!("[{section}]: {e}")))?;
    merge_tables(&mut merged, table);
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("[{section}]: {}", e.message())))
}

/// Flag, then config file, then `BOUNDARY_PROBE_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Result<u64> {
    if let Some(s) = flag.or(file.seed) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub checkpoint_hash: Option<String>,
    pub dataset_hash: Option<String>,
    pub seed: u64,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// `<file>.manifest.json` beside a file output.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// One corpus line written by `gen-world`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub text: String,
    /// Index of the first word that carries loss.
    pub loss_start: usize,
}

pub const WORLD_FILE: &str = "world.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const BATTERY_FILE: &str = "battery.jsonl";
pub const KNOWN_FILE: &str = "known.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn cmd_gen_world(args: &GenWorldArgs, file: &FileConfig) -> Result<()> {
    let started = Instant::now();
    let mut spec: WorldSpec = overlay(&WorldSpec::default(), file.world.as_ref(), "world")?;
    spec.seed = resolve_seed(args.seed, file)?;
    let set = |v: Option<usize>, slot: &mut usize| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(args.entities, &mut spec.entities);
    set(args.relations, &mut spec.relations);
    set(args.facts, &mut spec.facts);
    set(args.counterfactuals, &mut spec.counterfactuals);
    set(args.templates, &mut spec.templates_per_relation);
    set(args.held_out, &mut spec.held_out_per_relation);
    set(args.objects, &mut spec.objects_per_relation);

    let world = generate_world(&spec)?;
    let tokenizer = world.tokenizer();
    fs::create_dir_all(&args.out)?;
    let out = &args.out;
    write_json_pretty(&out.join(WORLD_FILE), &world)?;
    let mut records = world.records();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    save_records(out.join(RECORDS_FILE), &records)?;
    let mut battery = world.held_out_battery();
    battery.sort_by(|a, b| a.id.cmp(&b.id));
    save_records(out.join(BATTERY_FILE), &battery)?;
    save_records(out.join(KNOWN_FILE), &world.training_battery())?;
    let corpus: Vec<CorpusLine> = render_training_examples(&world, &tokenizer)
        .into_iter()
        .map(|ex| CorpusLine {
            text: ex.tokens.text,
            loss_start: ex.loss_start,
        })
        .collect();
    write_jsonl(&out.join(CORPUS_FILE), &corpus)?;
    write_json_pretty(&out.join(VOCAB_FILE), &tokenizer.words())?;

    let manifest = RunManifest {
        command: "gen-world".into(),
        config: serde_json::to_value(&spec)?,
        checkpoint_hash: None,
        dataset_hash: Some(sha256_file(&out.join(RECORDS_FILE))?),
        seed: spec.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json_pretty(&out.join(MANIFEST_FILE), &manifest)?;
    println!(
        "world: {} facts, {} counterfactuals, {} training sequences, vocabulary {} -> {}",
        world.facts.len(),
        world.counterfactuals.len(),
        corpus.len(),
        tokenizer.vocab_size(),
        out.display()
    );
    Ok(())
}

/// Model shape and training settings after layering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn resolve_train_settings(args: &TrainArgs, file: &FileConfig, vocab_size: usize) -> Result<TrainSettings> {
    let seed = resolve_seed(args.seed, file)?;
    let mut model: ModelConfig = overlay(&ModelConfig::new(vocab_size, seed), file.model.as_ref(), "model")?;
    model.vocab_size = vocab_size;
    model.seed = seed;
    let mut train: TrainConfig = overlay(&TrainConfig::default(), file.train.as_ref(), "train")?;
    train.seed = seed;
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(lr) = args.lr {
        train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    Ok(TrainSettings { model, train })
}

pub fn load_vocab(dir: &Path) -> Result<Tokenizer> {
    let words: Vec<String> = serde_json::from_slice(&fs::read(dir.join(VOCAB_FILE))?)?;
    Tokenizer::from_vocab(words)
}

pub fn load_corpus(dir: &Path, tokenizer: &Tokenizer) -> Result<Vec<TrainingExample>> {
    let lines: Vec<CorpusLine> = read_jsonl(&dir.join(CORPUS_FILE))?;
    Ok(lines
        .into_iter()
        .map(|l| TrainingExample {
            tokens: tokenizer.tokenize(&l.text),
            loss_start: l.loss_start,
        })
        .collect())
}

pub fn cmd_train(args: &TrainArgs, file: &FileConfig) -> Result<()> {
    let started = Instant::now();
    let corpus_path = args.world.join(CORPUS_FILE);
    if !corpus_path.exists() {
        return Err(Error::Precondition(format!("corpus {} not found", corpus_path.display())));
    }
    let tokenizer = load_vocab(&args.world)?;
    let corpus = load_corpus(&args.world, &tokenizer)?;
    let settings = resolve_train_settings(args, file, tokenizer.vocab_size())?;
    let init = ModelParams::init(settings.model.clone())?;
    let (params, report) = train_examples(&init, &corpus, &settings.train)?;
    let model = TinyLm::new(params, tokenizer)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&model, &args.out)?;
    let manifest = RunManifest {
        command: "train".into(),
        config: serde_json::to_value(&settings)?,
        checkpoint_hash: Some(sha256_file(&args.out)?),
        dataset_hash: Some(sha256_file(&corpus_path)?),
        seed: settings.train.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json_pretty(&manifest_path(&args.out), &manifest)?;
    println!(
        "trained {} epochs ({} steps) in {:.1}s: final loss {:.4} nats/token -> {}",
        report.epochs,
        report.steps,
        started.elapsed().as_secs_f64(),
        report.final_loss,
        args.out.display()
    );
    Ok(())
}

/// Probe settings after layering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub method: Method,
    pub aggregate: AggregateArg,
    /// 0 uses every available core.
    pub workers: usize,
    pub shots: usize,
    pub seed: u64,
    pub pgdc: PgdcConfig,
    pub trigger: TriggerConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            method: Method::Pgdc,
            aggregate: AggregateArg::Any,
            workers: 0,
            shots: 4,
            seed: 0,
            pgdc: PgdcConfig::default(),
            trigger: TriggerConfig::default(),
        }
    }
}

pub fn resolve_probe_settings(args: &ProbeArgs, file: &FileConfig) -> Result<ProbeSettings> {
    let mut s: ProbeSettings = overlay(&ProbeSettings::default(), file.probe.as_ref(), "probe")?;
    s.pgdc = overlay(&s.pgdc, file.pgdc.as_ref(), "pgdc")?;
    s.trigger = overlay(&s.trigger, file.trigger.as_ref(), "trigger")?;
    s.seed = resolve_seed(args.seed, file)?;
    if let Some(m) = args.method {
        s.method = m;
    }
    if let Some(a) = args.aggregate {
        s.aggregate = a;
    }
    if let Some(w) = args.workers {
        s.workers = w;
    }
    if let Some(k) = args.shots {
        s.shots = k;
    }
    let p = &mut s.pgdc;
    if let Some(v) = args.lambda1 {
        p.weights.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        p.weights.lambda2 = v;
    }
    if let Some(v) = args.ceil {
        p.projection_ceil = Some(v);
    }
    if let Some(v) = args.iters {
        p.iterations = v;
    }
    if let Some(v) = args.horizon {
        p.decode_horizon = v;
        s.trigger.decode_horizon = v;
    }
    if let Some(v) = args.lr {
        p.learning_rate = v;
    }
    if let Some(v) = args.gate {
        p.semantic_gate = Some(v);
    }
    let t = &mut s.trigger;
    if let Some(v) = args.triggers {
        t.triggers = v;
    }
    if let Some(v) = args.rounds {
        t.rounds = v;
    }
    if let Some(v) = args.candidates {
        t.candidates = v;
    }
    s.pgdc.validate()?;
    Ok(s)
}

/// One results line: a record, one of its paraphrases and one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub schema_version: u32,
    pub id: String,
    pub category: String,
    pub counterfactual: bool,
    pub method: Method,
    pub aggregate: AggregateArg,
    pub paraphrase_index: usize,
    pub paraphrase: String,
    pub success: bool,
    /// Record-level success under `aggregate`; equal on all lines of a record.
    pub record_success: bool,
    pub zero_shot: Option<bool>,
    pub answer_probability: Option<f64>,
    pub iterations_used: Option<usize>,
    pub final_prompt: Option<String>,
    pub final_semantic: Option<f64>,
    pub decoded: Option<String>,
    pub matched_answer: Option<String>,
    pub matched_window: Option<usize>,
    pub trace: Option<Vec<LossBreakdown>>,
}

/// Everything `probe` needs besides the records themselves.
pub struct ProbeContext<'a> {
    pub model: &'a TinyLm,
    pub settings: &'a ProbeSettings,
    pub exemplar_pool: &'a [KnowledgeRecord],
}

/// Result lines for one record, in paraphrase order.
pub fn probe_record(ctx: &ProbeContext<'_>, record: &KnowledgeRecord) -> Result<Vec<ResultLine>> {
    let model = ctx.model;
    let s = ctx.settings;
    if record.paraphrases.is_empty() || record.aliases.is_empty() {
        return Err(Error::Precondition(format!(
            "record {} needs at least one paraphrase and one alias",
            record.id
        )));
    }
    let answers: Vec<TokenSeq> = record.aliases.iter().map(|a| model.tokenizer.tokenize(a)).collect();
    let horizon = s.pgdc.decode_horizon;
    let mut lines = Vec::with_capacity(record.paraphrases.len());
    for (i, p) in record.paraphrases.iter().enumerate() {
        let q = model.tokenizer.tokenize(p);
        let mut line = ResultLine {
            schema_version: SCHEMA_VERSION,
            id: record.id.clone(),
            category: record.category.clone(),
            counterfactual: record.counterfactual,
            method: s.method,
            aggregate: s.aggregate,
            paraphrase_index: i,
            paraphrase: p.clone(),
            success: false,
            record_success: false,
            zero_shot: None,
            answer_probability: None,
            iterations_used: None,
            final_prompt: None,
            final_semantic: None,
            decoded: None,
            matched_answer: None,
            matched_window: None,
            trace: None,
        };
        match s.method {
            Method::Pgdc | Method::Trigger => {
                let r = if s.method == Method::Pgdc {
                    line.zero_shot = Some(zero_shot_probe(model, &q, &answers, horizon)?);
                    line.answer_probability = Some(best_alias_probability(model, &q, &answers)?);
                    optimize_prompt(model, &q, &answers, &s.pgdc)?
                } else {
                    trigger_token_probe(model, &q, &answers, &s.trigger)?
                };
                line.success = r.success;
                line.iterations_used = Some(r.iterations_used);
                line.final_prompt = r
                    .final_prompt
                    .token_ids()
                    .map(|ids| model.tokenizer.detokenize(&ids[1..]));
                line.final_semantic = (s.method == Method::Pgdc).then_some(r.final_semantic);
                line.decoded = Some(r.decoded.text);
                line.matched_answer = r.matched_answer.map(|a| a.text);
                line.matched_window = r.matched_window;
                line.trace = Some(r.trace);
            }
            Method::Zero => {
                line.success = zero_shot_probe(model, &q, &answers, horizon)?;
                line.zero_shot = Some(line.success);
                line.answer_probability = Some(best_alias_probability(model, &q, &answers)?);
            }
            Method::Few => {
                let exemplars = select_exemplars(ctx.exemplar_pool, record, i, s.shots, s.seed);
                line.success = few_shot_probe(model, p, &answers, &exemplars, horizon)?;
            }
            Method::Dis => {
                line.success = discriminator_probe(model, p, &record.object)?;
            }
        }
        lines.push(line);
    }
    let successes: Vec<bool> = lines.iter().map(|l| l.success).collect();
    let record_success = p_aggregate(&successes, s.aggregate.into(), s.seed ^ stable_hash(&record.id))?;
    for l in &mut lines {
        l.record_success = record_success;
    }
    Ok(lines)
}

/// Probe every record on a pool of `workers` threads (0 = all cores) and
/// return lines sorted by record id, method and paraphrase.
pub fn probe_records(ctx: &ProbeContext<'_>, records: &[KnowledgeRecord], workers: usize) -> Result<Vec<ResultLine>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let per_record: Vec<Vec<ResultLine>> =
        pool.install(|| records.par_iter().map(|r| probe_record(ctx, r)).collect::<Result<_>>())?;
    let mut lines: Vec<ResultLine> = per_record.into_iter().flatten().collect();
    lines.sort_by(|a, b| {
        (a.id.as_str(), a.method.as_str(), a.paraphrase_index).cmp(&(b.id.as_str(), b.method.as_str(), b.paraphrase_index))
    });
    Ok(lines)
}

pub fn cmd_probe(args: &ProbeArgs, file: &FileConfig) -> Result<()> {
    let started = Instant::now();
    let mut settings = resolve_probe_settings(args, file)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let records = load_records(&args.records)?;
    if settings.method == Method::Pgdc {
        if let Some(path) = &args.calibrate {
            let known = load_records(path)?;
            settings.pgdc.semantic_gate =
                calibrate_semantic_gate(&model, &known, settings.pgdc.decode_horizon)?;
            if settings.pgdc.semantic_gate.is_none() {
                eprintln!("warning: no known paraphrase pair to calibrate from; running without a semantic gate");
            }
        }
    }
    let pool = match &args.exemplars {
        Some(p) => load_records(p)?,
        None => records.clone(),
    };
    let ctx = ProbeContext {
        model: &model,
        settings: &settings,
        exemplar_pool: &pool,
    };
    let lines = probe_records(&ctx, &records, settings.workers)?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_jsonl(&args.out, &lines)?;

    let manifest = RunManifest {
        command: format!("probe --method {}", settings.method.as_str()),
        config: serde_json::to_value(&settings)?,
        checkpoint_hash: Some(sha256_file(&args.checkpoint)?),
        dataset_hash: Some(sha256_file(&args.records)?),
        seed: settings.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json_pretty(&manifest_path(&args.out), &manifest)?;

    let ids: BTreeSet<&str> = lines.iter().map(|l| l.id.as_str()).collect();
    let solved: BTreeSet<&str> = lines.iter().filter(|l| l.record_success).map(|l| l.id.as_str()).collect();
    println!(
        "{}: {}/{} records solved ({} paraphrase runs) in {:.1}s -> {}",
        settings.method.as_str(),
        solved.len(),
        ids.len(),
        lines.len(),
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

/// `report.json`: the aggregate report and every verdict with its evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub report: BoundaryReport,
    pub verdicts: Vec<BoundaryVerdict>,
}

pub const REPORT_FILE: &str = "report.json";
pub const COVERAGE_FILE: &str = "coverage.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";

/// Verdicts for every record with PGDC lines, from their evidence.
pub fn verdicts_from_lines(lines: &[ResultLine], epsilon: f64) -> Result<Vec<BoundaryVerdict>> {
    let mut out = Vec::new();
    let pgdc: Vec<&ResultLine> = lines.iter().filter(|l| l.method == Method::Pgdc).collect();
    let mut i = 0;
    while i < pgdc.len() {
        let id = &pgdc[i].id;
        let mut j = i;
        let mut evidence = Vec::new();
        while j < pgdc.len() && &pgdc[j].id == id {
            let l = pgdc[j];
            evidence.push(ParaphraseEvidence {
                paraphrase: l.paraphrase.clone(),
                zero_shot: l.zero_shot.unwrap_or(false),
                answer_probability: l.answer_probability.ok_or_else(|| {
                    Error::Precondition(format!("PGDC line for {id} lacks an answer probability"))
                })?,
                pgdc: l.success,
            });
            j += 1;
        }
        out.push(classify_record(id, &pgdc[i].category, evidence, epsilon)?);
        i = j;
    }
    Ok(out)
}

pub fn build_report(lines: &[ResultLine], epsilon: f64, max_iterations: usize) -> Result<ReportFile> {
    validate_epsilon(epsilon)?;
    let mut lines = lines.to_vec();
    lines.sort_by(|a, b| {
        (a.id.as_str(), a.method.as_str(), a.paraphrase_index).cmp(&(b.id.as_str(), b.method.as_str(), b.paraphrase_index))
    });
    let verdicts = verdicts_from_lines(&lines, epsilon)?;
    let mut outcomes: Vec<MethodOutcome> = Vec::new();
    for l in &lines {
        let label = format!(
            "{}{}",
            match l.aggregate {
                AggregateArg::Any => "p-",
                AggregateArg::Single => "",
            },
            l.method.as_str()
        );
        let dup = outcomes
            .last()
            .is_some_and(|o| o.record_id == l.id && o.method == label);
        if !dup {
            outcomes.push(MethodOutcome {
                method: label,
                record_id: l.id.clone(),
                success: l.record_success,
            });
        }
    }
    let iterations: Vec<usize> = lines
        .iter()
        .filter(|l| l.method == Method::Pgdc && l.success)
        .filter_map(|l| l.iterations_used)
        .collect();
    let report = boundary_stats(&verdicts, &outcomes, &iterations, max_iterations, &known_categories())?;
    Ok(ReportFile {
        schema_version: SCHEMA_VERSION,
        report,
        verdicts,
    })
}

pub fn write_report(dir: &Path, report: &ReportFile) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json_pretty(&dir.join(REPORT_FILE), report)?;
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(dir.join(COVERAGE_FILE)).map_err(csv_err)?;
    for row in report.report.coverage_rows() {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    let mut h = csv::Writer::from_path(dir.join(HISTOGRAM_FILE)).map_err(csv_err)?;
    h.write_record(["iteration", "successes"]).map_err(csv_err)?;
    for (t, n) in report.report.iteration_histogram.iter().enumerate() {
        h.write_record([t.to_string(), n.to_string()]).map_err(csv_err)?;
    }
    h.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct ReportSettings {
    epsilon: f64,
    iterations: usize,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings {
            epsilon: DEFAULT_EPSILON,
            iterations: PgdcConfig::default().iterations,
        }
    }
}

pub fn cmd_report(args: &ReportArgs, file: &FileConfig) -> Result<()> {
    let started = Instant::now();
    let mut settings: ReportSettings = overlay(&ReportSettings::default(), file.report.as_ref(), "report")?;
    if let Some(e) = args.epsilon {
        settings.epsilon = e;
    }
    if let Some(t) = args.iters {
        settings.iterations = t;
    }
    let mut lines: Vec<ResultLine> = Vec::new();
    let mut hasher = Sha256::new();
    for path in &args.results {
        let bytes = fs::read(path)?;
        hasher.update(&bytes);
        let parsed: Vec<ResultLine> = read_jsonl(path)?;
        if let Some(bad) = parsed.iter().position(|l| l.schema_version != SCHEMA_VERSION) {
            return Err(Error::Schema {
                path: path.clone(),
                line: bad + 1,
                message: format!("unsupported schema_version {}", parsed[bad].schema_version),
            });
        }
        lines.extend(parsed);
    }
    let report = build_report(&lines, settings.epsilon, settings.iterations)?;
    write_report(&args.out, &report)?;
    let manifest = RunManifest {
        command: "report".into(),
        config: serde_json::to_value(&settings)?,
        checkpoint_hash: None,
        dataset_hash: Some(hex::encode(hasher.finalize())),
        seed: 0,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json_pretty(&args.out.join(MANIFEST_FILE), &manifest)?;

    let r = &report.report;
    println!("{}", r.caveat);
    println!(
        "{} records: {} prompt-agnostic, {} prompt-sensitive, {} unanswerable (epsilon {})",
        r.totals.total(),
        r.totals.prompt_agnostic,
        r.totals.prompt_sensitive,
        r.totals.unanswerable,
        settings.epsilon
    );
    for row in r.coverage_rows() {
        println!(
            "  {:<12} {:<10} {:>4}/{:<4} {:.3}",
            row.category, row.method, row.successes, row.total, row.coverage
        );
    }
    if let Some(f) = r.fraction_within(15) {
        println!("PGDC successes within 15 iterations: {:.1}%", 100.0 * f);
    }
    Ok(())
}

/// Parse `args` and run the selected command.
pub fn run_cli(cli: &Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenWorld(a) => cmd_gen_world(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::Probe(a) => cmd_probe(a, &file),
        Command::Report(a) => cmd_report(a, &file),
    }
}

/// Parse arguments; usage errors come back as clap errors.
pub fn parse<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(args)
}
