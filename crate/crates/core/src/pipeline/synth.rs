//! Seeded desk-scale benchmark with planted relevance.
//!
//! Each entity is a small table (a two-token name plus attribute values drawn
//! from pseudo-word pools) with a reference sentence realized from one of
//! several templates. For every entity the corpus holds related sentences in
//! the same template, about someone from a separate pool of names but sharing
//! the entity's values, and distractors: short, noisy snippets that repeat the
//! entity's values and so attract lexical retrieval.
//!
//! A sentence is labeled relevant to a table when it is a templated sentence
//! stating at least one of the table's attribute values. Distractors are never
//! relevant. Value pools are per attribute, so a shared word is a shared value.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::tabledata::{write_corpus, write_tables_file, Corpus, Example, Sentence, Table};

pub const ATTRIBUTES: [&str; 6] = ["name", "genre", "origin", "instrument", "label", "era"];

/// Per template, one clause per attribute. `{0}` is the name, `{v}` the value.
const TEMPLATES: [[&str; 5]; 4] = [
    [
        "{0} is a {v} musician",
        "who was born in {v}",
        "and plays the {v}",
        "for the {v} company",
        "during the {v} years",
    ],
    [
        "{0} , a {v} artist ,",
        "grew up near {v}",
        "and is known for the {v}",
        "on the {v} imprint",
        "through the {v} times",
    ],
    [
        "known for {v} music , {0}",
        "comes from the {v} region",
        "performing with a {v}",
        "under contract with {v}",
        "since the {v} period",
    ],
    [
        "{0} performs {v} songs",
        "out of {v}",
        "mostly on the {v}",
        "released by {v}",
        "throughout the {v} decade",
    ],
];

const NOISE: [&str; 18] = [
    "tickets", "tonight", "sold", "out", "cheap", "rain", "traffic", "parking", "free", "buy", "now", "crowd",
    "weather", "queue", "deal", "late", "bus", "price",
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub entities: usize,
    /// Attributes per table, counting the name.
    pub attributes: usize,
    pub corpus_size: usize,
    /// Fraction of corpus sentences that are distractors.
    pub distractor_ratio: f64,
    /// Distinct value words, split evenly over the non-name attributes.
    pub vocab_size: usize,
    pub seed: u64,
    /// Leading share of entities written to the training tables file.
    pub train_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            entities: 50,
            attributes: 4,
            corpus_size: 500,
            distractor_ratio: 0.5,
            vocab_size: 300,
            seed: 13,
            train_fraction: 0.6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.entities < 2 {
            return bad("at least two entities are needed");
        }
        if !(2..=ATTRIBUTES.len()).contains(&self.attributes) {
            return bad("attributes per entity must be between 2 and 6");
        }
        if self.corpus_size == 0 {
            return bad("corpus size must be positive");
        }
        if !(0.0..1.0).contains(&self.distractor_ratio) {
            return bad("distractor ratio must lie in [0, 1)");
        }
        if self.related_count() < self.entities {
            return bad("every entity needs at least one related sentence");
        }
        if self.vocab_size < 2 * (self.attributes - 1) {
            return bad("vocabulary too small for the value pools");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// First and last name pools hold this many words each.
    fn name_pool(&self) -> usize {
        let mut p = 2;
        while p * p < 2 * self.entities {
            p += 1;
        }
        p
    }

    fn related_count(&self) -> usize {
        self.corpus_size - self.distractor_count()
    }

    fn distractor_count(&self) -> usize {
        (self.distractor_ratio * self.corpus_size as f64).round() as usize
    }
}

/// Relevant sentence ids per table id.
pub type RelevanceLabels = BTreeMap<u64, BTreeSet<u64>>;

#[derive(Serialize, Deserialize)]
struct LabelLine {
    table_id: u64,
    relevant_ids: Vec<u64>,
}

pub fn write_labels(path: &Path, labels: &RelevanceLabels) -> Result<()> {
    let lines: Vec<LabelLine> = labels
        .iter()
        .map(|(&table_id, ids)| LabelLine { table_id, relevant_ids: ids.iter().copied().collect() })
        .collect();
    jsonl::write(path, &lines)
}

pub fn read_labels(path: &Path) -> Result<RelevanceLabels> {
    let lines: Vec<LabelLine> = jsonl::read(path)?;
    let mut out = RelevanceLabels::new();
    for l in lines {
        if out.insert(l.table_id, l.relevant_ids.into_iter().collect()).is_some() {
            return Err(Error::DuplicateId(l.table_id));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub corpus: Corpus,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub labels: RelevanceLabels,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkFiles {
    pub corpus: PathBuf,
    pub train_tables: PathBuf,
    pub test_tables: PathBuf,
    pub labels: PathBuf,
}

impl BenchmarkFiles {
    pub fn in_dir(dir: &Path) -> Self {
        BenchmarkFiles {
            corpus: dir.join("corpus.jsonl"),
            train_tables: dir.join("train.jsonl"),
            test_tables: dir.join("test.jsonl"),
            labels: dir.join("labels.jsonl"),
        }
    }
}

struct Entity {
    name: String,
    values: Vec<String>,
    template: usize,
}

fn pseudo_words(rng: &mut ChaCha8Rng, count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn realize(template: usize, name: &str, values: &[(usize, &str)]) -> String {
    let mut parts = Vec::new();
    for &(attr, v) in values {
        parts.push(TEMPLATES[template][attr - 1].replace("{0}", name).replace("{v}", v));
    }
    let mut s = parts.join(" ");
    s.push_str(" .");
    s
}

/// Builds the benchmark in memory; [`synth_benchmark`] writes it to disk.
pub fn generate_benchmark(spec: &SyntheticSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken: BTreeSet<String> = TEMPLATES
        .iter()
        .flatten()
        .flat_map(|c| c.split_whitespace())
        .chain(NOISE)
        .chain(ATTRIBUTES)
        .map(str::to_string)
        .collect();
    let first = pseudo_words(&mut rng, spec.name_pool(), &mut taken);
    let last = pseudo_words(&mut rng, spec.name_pool(), &mut taken);
    let other_first = pseudo_words(&mut rng, spec.name_pool(), &mut taken);
    let other_last = pseudo_words(&mut rng, spec.name_pool(), &mut taken);
    let pool = spec.vocab_size / (spec.attributes - 1);
    let value_pools: Vec<Vec<String>> = (1..spec.attributes).map(|_| pseudo_words(&mut rng, pool, &mut taken)).collect();

    let mut names = BTreeSet::new();
    let mut entities = Vec::with_capacity(spec.entities);
    while entities.len() < spec.entities {
        let name = format!("{} {}", first.choose(&mut rng).unwrap(), last.choose(&mut rng).unwrap());
        if !names.insert(name.clone()) {
            continue;
        }
        let values = value_pools.iter().map(|p| p.choose(&mut rng).unwrap().clone()).collect();
        entities.push(Entity { name, values, template: rng.gen_range(0..TEMPLATES.len()) });
    }

    // (text, templated?) before ids are assigned.
    let mut drafts: Vec<(String, bool)> = Vec::with_capacity(spec.corpus_size);
    for i in 0..spec.related_count() {
        let e = &entities[i % entities.len()];
        let other = format!("{} {}", other_first.choose(&mut rng).unwrap(), other_last.choose(&mut rng).unwrap());
        let mut slots: Vec<(usize, &str)> = vec![(1, e.values[0].as_str())];
        for (j, v) in e.values.iter().enumerate().skip(1) {
            if rng.gen_bool(0.75) {
                slots.push((j + 1, v.as_str()));
            }
        }
        drafts.push((realize(e.template, &other, &slots), true));
    }
    for i in 0..spec.distractor_count() {
        let e = &entities[i % entities.len()];
        let mut picked: Vec<&String> = e.values.iter().collect();
        picked.shuffle(&mut rng);
        picked.truncate(rng.gen_range(1..=3));
        let mut words: Vec<&str> = Vec::new();
        for v in picked {
            let reps = rng.gen_range(1..=2);
            words.extend(std::iter::repeat_n(v.as_str(), reps));
        }
        let noise = rng.gen_range(2..=5);
        words.extend(NOISE.choose_multiple(&mut rng, noise).copied());
        words.shuffle(&mut rng);
        drafts.push((words.join(" "), false));
    }
    drafts.shuffle(&mut rng);

    let mut labels: RelevanceLabels = (1..=entities.len() as u64).map(|id| (id, BTreeSet::new())).collect();
    let mut sentences = Vec::with_capacity(drafts.len());
    for (i, (text, templated)) in drafts.into_iter().enumerate() {
        let s = Sentence::new(i as u64 + 1, text);
        if templated {
            for (j, e) in entities.iter().enumerate() {
                if e.values.iter().any(|v| s.tokens.contains(v)) {
                    labels.get_mut(&(j as u64 + 1)).unwrap().insert(s.id);
                }
            }
        }
        sentences.push(s);
    }

    let mut examples = Vec::with_capacity(entities.len());
    for (i, e) in entities.iter().enumerate() {
        let mut pairs = vec![(ATTRIBUTES[0].to_string(), e.name.clone())];
        pairs.extend(e.values.iter().enumerate().map(|(j, v)| (ATTRIBUTES[j + 1].to_string(), v.clone())));
        let slots: Vec<(usize, &str)> = e.values.iter().enumerate().map(|(j, v)| (j + 1, v.as_str())).collect();
        examples.push(Example {
            id: i as u64 + 1,
            table: Table::from_pairs(&pairs)?,
            reference: realize(e.template, &e.name, &slots),
        });
    }
    let n_train = ((spec.train_fraction * entities.len() as f64).round() as usize).clamp(1, entities.len() - 1);
    let test = examples.split_off(n_train);
    Ok(Benchmark { corpus: Corpus::new(sentences)?, train: examples, test, labels })
}

/// Writes corpus, train/test tables and relevance labels into `dir`.
pub fn synth_benchmark(spec: &SyntheticSpec, dir: &Path) -> Result<BenchmarkFiles> {
    let bench = generate_benchmark(spec)?;
    let files = BenchmarkFiles::in_dir(dir);
    write_corpus(&files.corpus, &bench.corpus)?;
    write_tables_file(&files.train_tables, &bench.train)?;
    write_tables_file(&files.test_tables, &bench.test)?;
    write_labels(&files.labels, &bench.labels)?;
    Ok(files)
}
