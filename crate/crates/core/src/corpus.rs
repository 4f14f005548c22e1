//! Knowledge records and the synthetic world that plants them.
//!
//! Records travel as JSONL, one object per line:
//!
//! ```json
//! {"id": "f0001", "subject": "Isatis", "relation": "capital", "object": "Vorlan",
//!  "paraphrases": ["the capital of Isatis is", "..."], "aliases": ["Vorlan", "..."],
//!  "category": "geography", "counterfactual": false}
//! ```
//!
//! A [`SyntheticWorld`] draws subjects, relations and objects from a seed,
//! renders every fact through its relation's training templates, and keeps
//! one or more templates per relation out of the training text. Counterfactual
//! records pair a subject with a relation it never has in training, and an
//! object of the right type.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::tokenizer::{TokenSeq, Tokenizer, EOS, SPECIAL_TOKENS, TAB};
use crate::tinylm::TrainingExample;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub id: String,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub paraphrases: Vec<String>,
    pub aliases: Vec<String>,
    pub category: String,
    pub counterfactual: bool,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    subject: Option<String>,
    relation: Option<String>,
    object: Option<String>,
    paraphrases: Option<Vec<String>>,
    aliases: Option<Vec<String>>,
    category: Option<String>,
    counterfactual: Option<bool>,
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

impl RawRecord {
    fn validate(self, path: &Path, line: usize) -> Result<KnowledgeRecord> {
        fn text(path: &Path, line: usize, name: &str, v: Option<String>) -> Result<String> {
            match v {
                None => Err(schema(path, line, format!("missing field `{name}`"))),
                Some(s) if s.trim().is_empty() => {
                    Err(schema(path, line, format!("field `{name}` is empty")))
                }
                Some(s) => Ok(s),
            }
        }
        fn list(path: &Path, line: usize, name: &str, v: Option<Vec<String>>) -> Result<Vec<String>> {
            match v {
                None => Err(schema(path, line, format!("missing field `{name}`"))),
                Some(l) if l.is_empty() => Err(schema(path, line, format!("field `{name}` is empty"))),
                Some(l) if l.iter().any(|s| s.trim().is_empty()) => Err(schema(
                    path,
                    line,
                    format!("field `{name}` contains an empty string"),
                )),
                Some(l) => Ok(l),
            }
        }
        Ok(KnowledgeRecord {
            id: text(path, line, "id", self.id)?,
            subject: text(path, line, "subject", self.subject)?,
            relation: text(path, line, "relation", self.relation)?,
            object: text(path, line, "object", self.object)?,
            paraphrases: list(path, line, "paraphrases", self.paraphrases)?,
            aliases: list(path, line, "aliases", self.aliases)?,
            category: text(path, line, "category", self.category)?,
            counterfactual: self
                .counterfactual
                .ok_or_else(|| schema(path, line, "missing field `counterfactual`"))?,
        })
    }
}

/// Read and validate a JSONL record file. Blank lines are skipped.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<KnowledgeRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|e| schema(path, line_no, format!("invalid JSON: {e}")))?;
        let rec = raw.validate(path, line_no)?;
        if !seen.insert(rec.id.clone()) {
            return Err(schema(path, line_no, format!("duplicate id `{}`", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut w: W, records: &[KnowledgeRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_records(path: impl AsRef<Path>, records: &[KnowledgeRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Counts and seed for [`generate_world`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub entities: usize,
    pub relations: usize,
    pub facts: usize,
    pub counterfactuals: usize,
    pub templates_per_relation: usize,
    pub held_out_per_relation: usize,
    pub objects_per_relation: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            entities: 50,
            relations: 5,
            facts: 200,
            counterfactuals: 50,
            templates_per_relation: 3,
            held_out_per_relation: 1,
            objects_per_relation: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub category: String,
    /// Cloze templates; `{S}` marks the subject and the answer follows the last word.
    pub templates: Vec<String>,
    /// Indices into `templates` used in training text.
    pub training_templates: Vec<usize>,
    /// Indices into `templates` never rendered into training text.
    pub held_out_templates: Vec<usize>,
    /// Type noun of the objects, used by catalogue sentences.
    pub kind: String,
    /// Every object of this type. Facts use some of them; all appear in
    /// catalogue sentences.
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub entities: Vec<String>,
    pub relations: Vec<Relation>,
    pub facts: Vec<KnowledgeRecord>,
    pub counterfactuals: Vec<KnowledgeRecord>,
    /// Aliases of every object, canonical name first.
    pub object_aliases: BTreeMap<String, Vec<String>>,
    /// Fact ids whose extra aliases appear in training text.
    pub alias_trained: BTreeSet<String>,
}

struct RelationTemplate {
    name: &'static str,
    category: &'static str,
    kind: &'static str,
    templates: [&'static str; 3],
}

const RELATION_BANK: [RelationTemplate; 8] = [
    RelationTemplate {
        name: "capital",
        kind: "city",
        category: "geography",
        templates: [
            "the capital of {S} is",
            "{S} has its capital in",
            "the capital city of {S} is",
        ],
    },
    RelationTemplate {
        name: "language",
        kind: "language",
        category: "culture",
        templates: [
            "the official language of {S} is",
            "people in {S} speak",
            "the language spoken in {S} is",
        ],
    },
    RelationTemplate {
        name: "founder",
        kind: "person",
        category: "history",
        templates: [
            "{S} was founded by",
            "the founder of {S} is",
            "{S} owes its founding to",
        ],
    },
    RelationTemplate {
        name: "currency",
        kind: "currency",
        category: "economy",
        templates: [
            "the currency of {S} is",
            "in {S} people pay with",
            "the money used in {S} is",
        ],
    },
    RelationTemplate {
        name: "continent",
        kind: "continent",
        category: "geography",
        templates: [
            "{S} is located in",
            "{S} lies on the continent of",
            "the continent of {S} is",
        ],
    },
    RelationTemplate {
        name: "religion",
        kind: "religion",
        category: "culture",
        templates: [
            "the main religion of {S} is",
            "most people in {S} follow",
            "the faith of {S} is",
        ],
    },
    RelationTemplate {
        name: "leader",
        kind: "person",
        category: "politics",
        templates: [
            "the leader of {S} is",
            "{S} is governed by",
            "the head of state of {S} is",
        ],
    },
    RelationTemplate {
        name: "river",
        kind: "river",
        category: "geography",
        templates: [
            "the longest river of {S} is",
            "the main river in {S} is",
            "{S} is crossed by the river",
        ],
    },
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ra", "ten", "vor", "is", "at", "el", "un", "dra", "sol", "bri", "zan",
    "ku", "pel", "mar", "tis", "on", "qua", "lin", "dor", "sa", "fe",
];

const ALIAS_PREFIXES: [&str; 4] = ["Old", "New", "Great", "Upper"];

/// Categories of every relation the generator can draw.
pub fn known_categories() -> BTreeSet<String> {
    RELATION_BANK.iter().map(|r| r.category.to_string()).collect()
}

/// Fill a template's subject slot.
pub fn render_template(template: &str, subject: &str) -> String {
    template.replace("{S}", subject)
}

fn synth_name(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let mut s: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        let first = s.remove(0).to_ascii_uppercase();
        s.insert(0, first);
        if used.insert(s.clone()) {
            return s;
        }
    }
}

/// Deterministic world from `spec.seed`.
pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    let infeasible = |m: String| Err(Error::Infeasible(m));
    if spec.facts == 0 {
        return infeasible("at least one fact is required".into());
    }
    if spec.entities == 0 || spec.relations == 0 || spec.objects_per_relation == 0 {
        return infeasible("entities, relations and objects_per_relation must be positive".into());
    }
    if spec.relations > RELATION_BANK.len() {
        return infeasible(format!(
            "at most {} relations are available",
            RELATION_BANK.len()
        ));
    }
    if spec.templates_per_relation < 2 || spec.templates_per_relation > 3 {
        return infeasible("templates_per_relation must be 2 or 3".into());
    }
    if spec.held_out_per_relation == 0 || spec.held_out_per_relation >= spec.templates_per_relation {
        return infeasible(
            "each relation needs at least one training and one held-out template".into(),
        );
    }
    let pairs = spec.entities * spec.relations;
    if spec.facts + spec.counterfactuals > pairs {
        return infeasible(format!(
            "{} facts + {} counterfactuals exceed {} subject-relation pairs",
            spec.facts, spec.counterfactuals, pairs
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used = HashSet::new();
    let entities: Vec<String> = (0..spec.entities).map(|_| synth_name(&mut rng, &mut used)).collect();

    let mut relations = Vec::with_capacity(spec.relations);
    let mut object_aliases = BTreeMap::new();
    for bank in RELATION_BANK.iter().take(spec.relations) {
        let templates: Vec<String> = bank.templates[..spec.templates_per_relation]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut idx: Vec<usize> = (0..templates.len()).collect();
        idx.shuffle(&mut rng);
        let mut held_out_templates = idx[..spec.held_out_per_relation].to_vec();
        let mut training_templates = idx[spec.held_out_per_relation..].to_vec();
        held_out_templates.sort_unstable();
        training_templates.sort_unstable();
        let objects: Vec<String> = (0..spec.objects_per_relation)
            .map(|_| synth_name(&mut rng, &mut used))
            .collect();
        for o in &objects {
            let mut aliases = vec![o.clone(), synth_name(&mut rng, &mut used)];
            if rng.gen_bool(0.5) {
                let prefix = ALIAS_PREFIXES.choose(&mut rng).expect("non-empty");
                aliases.push(format!("{prefix} {o}"));
            }
            object_aliases.insert(o.clone(), aliases);
        }
        relations.push(Relation {
            name: bank.name.to_string(),
            category: bank.category.to_string(),
            templates,
            training_templates,
            held_out_templates,
            kind: bank.kind.to_string(),
            objects,
        });
    }

    let mut all_pairs: Vec<(usize, usize)> = (0..spec.entities)
        .flat_map(|s| (0..spec.relations).map(move |r| (s, r)))
        .collect();
    all_pairs.shuffle(&mut rng);
    let mut fact_pairs = all_pairs[..spec.facts].to_vec();
    let mut cf_pairs = all_pairs[spec.facts..spec.facts + spec.counterfactuals].to_vec();
    fact_pairs.sort_unstable();
    cf_pairs.sort_unstable();

    let make = |id: String, s: usize, r: usize, object: &str, cf: bool| {
        let rel = &relations[r];
        KnowledgeRecord {
            id,
            subject: entities[s].clone(),
            relation: rel.name.clone(),
            object: object.to_string(),
            paraphrases: rel
                .templates
                .iter()
                .map(|t| render_template(t, &entities[s]))
                .collect(),
            aliases: object_aliases[object].clone(),
            category: rel.category.clone(),
            counterfactual: cf,
        }
    };

    // Each relation cycles through a shuffled object pool so every object is used.
    let mut pools: Vec<Vec<String>> = relations
        .iter()
        .map(|r| {
            let mut p = r.objects.clone();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut next = vec![0usize; spec.relations];
    let mut facts = Vec::with_capacity(spec.facts);
    for (i, &(s, r)) in fact_pairs.iter().enumerate() {
        let pool = &mut pools[r];
        if next[r] == pool.len() {
            pool.shuffle(&mut rng);
            next[r] = 0;
        }
        let object = pool[next[r]].clone();
        next[r] += 1;
        facts.push(make(format!("f{:04}", i + 1), s, r, &object, false));
    }

    let mut counterfactuals = Vec::with_capacity(spec.counterfactuals);
    for (i, &(s, r)) in cf_pairs.iter().enumerate() {
        let object = relations[r].objects.choose(&mut rng).expect("non-empty pool").clone();
        counterfactuals.push(make(format!("cf{:04}", i + 1), s, r, &object, true));
    }

    let alias_trained = facts
        .iter()
        .filter(|_| rng.gen_bool(0.5))
        .map(|f| f.id.clone())
        .collect();

    Ok(SyntheticWorld {
        spec: spec.clone(),
        entities,
        relations,
        facts,
        counterfactuals,
        object_aliases,
        alias_trained,
    })
}

impl SyntheticWorld {
    pub fn relation(&self, name: &str) -> Option<&Relation> {
        self.relations.iter().find(|r| r.name == name)
    }

    /// Facts followed by counterfactuals.
    pub fn records(&self) -> Vec<KnowledgeRecord> {
        self.facts.iter().chain(&self.counterfactuals).cloned().collect()
    }

    /// Facts restricted to their held-out paraphrases, then counterfactuals unchanged.
    pub fn held_out_battery(&self) -> Vec<KnowledgeRecord> {
        let mut out: Vec<KnowledgeRecord> = self
            .facts
            .iter()
            .map(|f| {
                let rel = self.relation(&f.relation).expect("fact relation exists");
                let mut r = f.clone();
                r.paraphrases = rel
                    .held_out_templates
                    .iter()
                    .map(|&i| f.paraphrases[i].clone())
                    .collect();
                r
            })
            .collect();
        out.extend(self.counterfactuals.iter().cloned());
        out
    }

    /// Facts restricted to their training-template paraphrases.
    pub fn training_battery(&self) -> Vec<KnowledgeRecord> {
        self.facts
            .iter()
            .map(|f| {
                let rel = self.relation(&f.relation).expect("fact relation exists");
                let mut r = f.clone();
                r.paraphrases = rel
                    .training_templates
                    .iter()
                    .map(|&i| f.paraphrases[i].clone())
                    .collect();
                r
            })
            .collect()
    }

    /// `(question, answer)` for each fact through each of its training
    /// templates. For alias-trained facts, alias `k` replaces the object in
    /// training template `k mod n`. In fact order.
    pub fn training_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for f in &self.facts {
            let rel = self.relation(&f.relation).expect("fact relation exists");
            let n = rel.training_templates.len();
            let mut answers: Vec<&str> = vec![f.object.as_str(); n];
            if self.alias_trained.contains(&f.id) {
                for (k, alias) in f.aliases.iter().enumerate().skip(1) {
                    answers[k % n] = alias;
                }
            }
            for (slot, &t) in rel.training_templates.iter().enumerate() {
                out.push((f.paraphrases[t].clone(), answers[slot].to_string()));
            }
        }
        out
    }

    /// Catalogue sentences `<synonym> or <object> is a <kind>`, one per
    /// object of every relation.
    pub fn catalogue_sentences(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.relations {
            for o in &r.objects {
                let synonym = &self.object_aliases[o][1];
                out.push(format!("{synonym} or {o} is a {}", r.kind));
            }
        }
        out
    }

    /// Cloze statements (every training pair with the answer after the
    /// question) and catalogue sentences, shuffled by the world seed.
    pub fn training_sentences(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .training_pairs()
            .into_iter()
            .map(|(q, a)| format!("{q} {a}"))
            .collect();
        out.extend(self.catalogue_sentences());
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed_c0de);
        out.shuffle(&mut rng);
        out
    }

    /// Every word the world can produce, plus the fixed baseline prompt words.
    pub fn tokenizer(&self) -> Tokenizer {
        let mut words: Vec<String> = Vec::new();
        for rel in &self.relations {
            words.extend(rel.templates.iter().map(|t| t.replace("{S}", " ")));
            words.push(format!("or is a {}", rel.kind));
        }
        words.extend(self.entities.iter().cloned());
        for aliases in self.object_aliases.values() {
            words.extend(aliases.iter().cloned());
        }
        words.push(TAB.to_string());
        words.extend(crate::baselines::DISCRIMINATOR_WORDS.iter().map(|s| s.to_string()));
        Tokenizer::from_words(words)
    }

    /// String-level audit: sentences in which a counterfactual subject and any
    /// alias of its counterfactual object co-occur.
    pub fn counterfactual_leaks(&self, sentences: &[String]) -> Vec<String> {
        let mut leaks = Vec::new();
        for s in sentences {
            let words: HashSet<&str> = s.split_whitespace().collect();
            for cf in &self.counterfactuals {
                if words.contains(cf.subject.as_str())
                    && cf
                        .aliases
                        .iter()
                        .any(|a| a.split_whitespace().all(|w| words.contains(w)))
                {
                    leaks.push(s.clone());
                }
            }
        }
        leaks
    }
}

/// Training corpus as token sequences (no `<bos>`/`<eos>`; training adds them).
pub fn render_training_corpus(world: &SyntheticWorld, tokenizer: &Tokenizer) -> Vec<TokenSeq> {
    world
        .training_sentences()
        .iter()
        .map(|s| tokenizer.tokenize(s))
        .collect()
}

/// Question-answer examples `question <eos> object` for every fact through
/// each training template, with the loss on the answer only. The answer is
/// always the canonical object, so every trained phrasing of a fact asks for
/// the same thing.
pub fn render_qa_examples(world: &SyntheticWorld, tokenizer: &Tokenizer) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for f in &world.facts {
        let rel = world.relation(&f.relation).expect("fact relation exists");
        let answer = tokenizer.tokenize(&f.object);
        for &t in &rel.training_templates {
            let q = &f.paraphrases[t];
            let mut tokens = tokenizer.tokenize(q);
            let loss_start = tokens.ids.len() + 1;
            tokens.ids.push(EOS);
            tokens.ids.extend(&answer.ids);
            tokens.text = format!("{q} {} {}", SPECIAL_TOKENS[EOS], f.object);
            out.push(TrainingExample { tokens, loss_start });
        }
    }
    out
}

/// Cloze statements followed by question-answer examples, shuffled together.
pub fn render_training_examples(world: &SyntheticWorld, tokenizer: &Tokenizer) -> Vec<TrainingExample> {
    let mut out: Vec<TrainingExample> = render_training_corpus(world, tokenizer)
        .into_iter()
        .map(TrainingExample::full)
        .collect();
    out.extend(render_qa_examples(world, tokenizer));
    let mut rng = ChaCha8Rng::seed_from_u64(world.spec.seed ^ 0x0a11_5eed);
    out.shuffle(&mut rng);
    out
}
