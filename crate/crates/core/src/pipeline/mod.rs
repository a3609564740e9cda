//! Configuration and end-to-end orchestration.
//!
//! A run goes index → retrieve(m) → leakage filter → selection → generator
//! training → decoding → evaluation, writing every intermediate artifact to
//! the output directory. The variant decides the selection stage:
//!
//! | variant | prototypes | content-aware loss |
//! |---|---|---|
//! | `BASE` | none | off |
//! | `RET` | first n in BM25 order | off |
//! | `RET_PS` | n best by the trained selector | off |
//! | `RET_PS_CA` | n best by the trained selector | on |
//!
//! The global seed drives both the selector and the generator; the `seed`
//! fields inside the module configs are overwritten by it.

pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::evaluation::{evaluate, precision_at_k, sign_test, EvalReport};
use crate::generator::{generate, train_generator, GeneratorModel, GeneratorTrainConfig};
use crate::jsonl;
use crate::retrieval::{build_index, filter_leakage, retrieve, tokenize, write_candidates, CandidateSet, InvertedIndex};
use crate::selector::{
    augmented_record, select_by_retrieval, select_top_n, train_selector, write_augmented, AugmentedDataset,
    AugmentedRecord, PrototypeSet, SelectorExample, SelectorModel, SelectorTrainConfig,
};
use crate::tabledata::{linearize_table, load_corpus, parse_tables_file, Corpus, Example, TokenSequence, Vocabulary};

pub use synth::{generate_benchmark, read_labels, synth_benchmark, write_labels, BenchmarkFiles, RelevanceLabels, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "BASE")]
    Base,
    #[serde(rename = "RET")]
    Ret,
    #[serde(rename = "RET_PS")]
    RetPs,
    #[serde(rename = "RET_PS_CA")]
    RetPsCa,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [Variant::Base, Variant::Ret, Variant::RetPs, Variant::RetPsCa];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "BASE",
            Variant::Ret => "RET",
            Variant::RetPs => "RET_PS",
            Variant::RetPsCa => "RET_PS_CA",
        }
    }

    pub fn uses_selector(self) -> bool {
        matches!(self, Variant::RetPs | Variant::RetPsCa)
    }

    pub fn ca_enabled(self) -> bool {
        self == Variant::RetPsCa
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::LADDER
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub train_tables: PathBuf,
    pub test_tables: PathBuf,
    /// Relevance labels; when present, prototype precision is reported.
    pub labels: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths::for_benchmark(&BenchmarkFiles::in_dir(Path::new("data")), Path::new("runs"))
    }
}

impl Paths {
    pub fn for_benchmark(files: &BenchmarkFiles, out_dir: &Path) -> Self {
        Paths {
            corpus: files.corpus.clone(),
            train_tables: files.train_tables.clone(),
            test_tables: files.test_tables.clone(),
            labels: Some(files.labels.clone()),
            out_dir: out_dir.to_path_buf(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Candidates retrieved per table.
    pub m: usize,
    /// Prototypes kept per table.
    pub n: usize,
    pub selector: SelectorTrainConfig,
    pub generator: GeneratorTrainConfig,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            m: 100,
            n: 3,
            selector: SelectorTrainConfig::default(),
            generator: GeneratorTrainConfig {
                d_model: 32,
                max_len: 128,
                max_decode_len: 40,
                epochs: 30,
                ..GeneratorTrainConfig::default()
            },
            variant: Variant::RetPsCa,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        jsonl::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if self.n > self.m {
            return Err(Error::InvalidConfig(format!("n = {} exceeds m = {}", self.n, self.m)));
        }
        if self.variant != Variant::Base && self.n == 0 {
            return Err(Error::InvalidConfig(format!("{} needs n >= 1", self.variant)));
        }
        self.selector_config().validate()?;
        self.generator_config().validate()
    }

    /// Selector settings with the global seed applied.
    pub fn selector_config(&self) -> SelectorTrainConfig {
        SelectorTrainConfig { seed: self.seed, ..self.selector.clone() }
    }

    /// Generator settings with the global seed and the variant's loss applied.
    pub fn generator_config(&self) -> GeneratorTrainConfig {
        GeneratorTrainConfig {
            seed: self.seed,
            ca_enabled: self.variant.ca_enabled(),
            ..self.generator.clone()
        }
    }
}

/// File names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(dir: &Path) -> Self {
        RunLayout { dir: dir.to_path_buf() }
    }
    pub fn index(&self) -> PathBuf {
        self.dir.join("index.json")
    }
    pub fn candidates(&self, split: &str) -> PathBuf {
        self.dir.join(format!("candidates.{split}.jsonl"))
    }
    pub fn selector(&self) -> PathBuf {
        self.dir.join("selector.json")
    }
    pub fn augmented(&self, split: &str) -> PathBuf {
        self.dir.join(format!("augmented.{split}.jsonl"))
    }
    pub fn generator(&self) -> PathBuf {
        self.dir.join("generator.json")
    }
    pub fn generations(&self) -> PathBuf {
        self.dir.join("generations.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

/// One decoded test output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub table_id: u64,
    pub output: String,
}

pub fn write_generations(path: &Path, gens: &[Generation]) -> Result<()> {
    jsonl::write(path, gens)
}

pub fn read_generations(path: &Path) -> Result<Vec<Generation>> {
    jsonl::read(path)
}

/// Retrieves `m` candidates per example and drops exact copies of its reference.
pub fn build_candidates(index: &InvertedIndex, corpus: &Corpus, examples: &[Example], m: usize) -> Result<Vec<CandidateSet>> {
    examples
        .iter()
        .map(|ex| filter_leakage(&retrieve(index, &ex.table, ex.id, m)?, corpus, &ex.reference))
        .collect()
}

/// Pairs examples with their candidates, dropping those with fewer than `k`.
pub fn selector_examples(examples: &[Example], candidates: &[CandidateSet], k: usize) -> Vec<SelectorExample> {
    let mut out = Vec::with_capacity(examples.len());
    for (ex, c) in examples.iter().zip(candidates) {
        if c.len() < k {
            warn!("table {} has {} candidates, fewer than k = {k}; left out of selector training", ex.id, c.len());
            continue;
        }
        out.push(SelectorExample {
            id: ex.id,
            table: ex.table.clone(),
            reference: tokenize(&ex.reference),
            candidates: c.clone(),
        });
    }
    out
}

/// Chooses prototypes for each example according to the variant.
pub fn select_records(
    variant: Variant,
    examples: &[Example],
    candidates: &[CandidateSet],
    corpus: &Corpus,
    selector: Option<&SelectorModel>,
    n: usize,
) -> Result<AugmentedDataset> {
    examples
        .iter()
        .zip(candidates)
        .map(|(ex, c)| {
            let chosen = match (variant, selector) {
                _ if variant == Variant::Base || c.is_empty() => PrototypeSet { table_id: ex.id, entries: vec![] },
                (Variant::Ret, _) => select_by_retrieval(c, n)?,
                (_, Some(model)) => select_top_n(model, &ex.table, c, corpus, n)?,
                (_, None) => return Err(Error::InvalidConfig(format!("{variant} needs a trained selector"))),
            };
            augmented_record(ex, &chosen, corpus)
        })
        .collect()
}

/// Vocabulary of the generator: training tables, references and prototypes.
pub fn generator_vocabulary(train: &[AugmentedRecord]) -> Vocabulary {
    let mut seqs: Vec<TokenSequence> = Vec::new();
    for r in train {
        seqs.push(linearize_table(&r.table));
        seqs.push(tokenize(&r.reference));
        seqs.extend(r.prototype_tokens());
    }
    Vocabulary::build(&seqs)
}

pub fn generate_all(model: &GeneratorModel, records: &[AugmentedRecord], max_decode_len: usize) -> Result<Vec<Generation>> {
    records
        .iter()
        .map(|r| {
            let out = generate(model, &r.table, &r.prototype_tokens(), max_decode_len)?;
            Ok(Generation { table_id: r.table_id, output: out.to_string() })
        })
        .collect()
}

/// Scores generations against the references of `examples`, matched by table id.
pub fn evaluate_generations(gens: &[Generation], examples: &[Example]) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<u64, &Example> = examples.iter().map(|e| (e.id, e)).collect();
    let mut hyps = Vec::with_capacity(gens.len());
    let mut refs = Vec::with_capacity(gens.len());
    for g in gens {
        let ex = by_id
            .get(&g.table_id)
            .ok_or_else(|| Error::InvalidInput(format!("generation for unknown table {}", g.table_id)))?;
        hyps.push(tokenize(&g.output));
        refs.push(tokenize(&ex.reference));
    }
    evaluate(&hyps, &refs)
}

/// Mean precision@n of each record's prototypes against the labels.
pub fn prototype_precision(records: &[AugmentedRecord], labels: &RelevanceLabels, n: usize) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let empty = BTreeSet::new();
    let mut total = 0.0;
    for r in records {
        total += precision_at_k(&r.prototype_ids, labels.get(&r.table_id).unwrap_or(&empty), n)?;
    }
    Ok(total / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub variant: Variant,
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    #[serde(flatten)]
    pub eval: EvalReport,
    /// Mean precision@n of the test prototypes, when labels are configured.
    pub prototype_precision: Option<f64>,
    pub selector_epoch_losses: Vec<f64>,
    pub generator_epoch_losses: Vec<f64>,
    pub skipped_training_records: usize,
}

struct Loaded {
    corpus: Corpus,
    train: Vec<Example>,
    test: Vec<Example>,
    labels: Option<RelevanceLabels>,
}

fn load_inputs(paths: &Paths) -> Result<Loaded> {
    Ok(Loaded {
        corpus: load_corpus(&paths.corpus)?,
        train: parse_tables_file(&paths.train_tables)?,
        test: parse_tables_file(&paths.test_tables)?,
        labels: paths.labels.as_deref().map(read_labels).transpose()?,
    })
}

/// Runs every stage for `config.variant` and writes the artifacts and `report.json`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    config.validate()?;
    let layout = RunLayout::new(&config.paths.out_dir);
    let data = load_inputs(&config.paths).stage("load")?;
    info!(
        "{}: {} train, {} test tables, {} sentences",
        config.variant,
        data.train.len(),
        data.test.len(),
        data.corpus.len()
    );

    let index = build_index(&data.corpus);
    index.save(&layout.index()).stage("index")?;

    let (train_c, test_c) = (|| {
        let train_c = build_candidates(&index, &data.corpus, &data.train, config.m)?;
        let test_c = build_candidates(&index, &data.corpus, &data.test, config.m)?;
        write_candidates(&layout.candidates("train"), &train_c)?;
        write_candidates(&layout.candidates("test"), &test_c)?;
        Ok((train_c, test_c))
    })()
    .stage("retrieve")?;

    let mut selector_losses = Vec::new();
    let selector = if config.variant.uses_selector() {
        let sel_config = config.selector_config();
        let (model, log) = (|| {
            let examples = selector_examples(&data.train, &train_c, sel_config.k);
            if examples.is_empty() {
                return Err(Error::InvalidInput(format!("no training table has at least k = {} candidates", sel_config.k)));
            }
            let trained = train_selector(&examples, &data.corpus, &sel_config)?;
            trained.0.save(&layout.selector())?;
            Ok(trained)
        })()
        .stage("train-selector")?;
        selector_losses = log.epoch_losses;
        Some(model)
    } else {
        None
    };

    let (train_aug, test_aug) = (|| {
        let tr = select_records(config.variant, &data.train, &train_c, &data.corpus, selector.as_ref(), config.n)?;
        let te = select_records(config.variant, &data.test, &test_c, &data.corpus, selector.as_ref(), config.n)?;
        write_augmented(&layout.augmented("train"), &tr)?;
        write_augmented(&layout.augmented("test"), &te)?;
        Ok((tr, te))
    })()
    .stage("select")?;

    let gen_config = config.generator_config();
    let (generator, gen_log) = (|| {
        let trained = train_generator(generator_vocabulary(&train_aug), &train_aug, &gen_config)?;
        trained.0.save(&layout.generator())?;
        Ok(trained)
    })()
    .stage("train-generator")?;

    let gens = (|| {
        let gens = generate_all(&generator, &test_aug, gen_config.max_decode_len)?;
        write_generations(&layout.generations(), &gens)?;
        Ok(gens)
    })()
    .stage("generate")?;

    let report = (|| {
        let eval = evaluate_generations(&gens, &data.test)?;
        let prototype_precision = match (&data.labels, config.variant) {
            (Some(labels), v) if v != Variant::Base => Some(prototype_precision(&test_aug, labels, config.n)?),
            _ => None,
        };
        let report = PipelineReport {
            variant: config.variant,
            seed: config.seed,
            m: config.m,
            n: config.n,
            eval,
            prototype_precision,
            selector_epoch_losses: selector_losses,
            generator_epoch_losses: gen_log.epoch_losses,
            skipped_training_records: gen_log.skipped,
        };
        jsonl::write_json(&layout.report(), &report)?;
        Ok(report)
    })()
    .stage("evaluate")?;
    info!("{}: BLEU-4 {:.4}, ROUGE-4 F {:.4}", config.variant, report.eval.bleu4, report.eval.rouge4_f);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub seed: u64,
    pub k: usize,
    pub n: usize,
    /// Test tables with at least one candidate.
    pub tables: usize,
    pub selector_precision: f64,
    pub bm25_precision: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains the selector on the training tables and compares its precision@n on
/// the test tables with the BM25 order.
pub fn evaluate_selection(config: &PipelineConfig) -> Result<SelectionReport> {
    config.validate()?;
    if config.n == 0 {
        return Err(Error::InvalidConfig("precision@n needs n >= 1".into()));
    }
    let data = load_inputs(&config.paths).stage("load")?;
    let labels = data
        .labels
        .ok_or_else(|| Error::InvalidConfig("selection benchmark needs a labels path".into()))?;
    let index = build_index(&data.corpus);
    let train_c = build_candidates(&index, &data.corpus, &data.train, config.m).stage("retrieve")?;
    let test_c = build_candidates(&index, &data.corpus, &data.test, config.m).stage("retrieve")?;
    let sel_config = config.selector_config();
    let (model, log) =
        train_selector(&selector_examples(&data.train, &train_c, sel_config.k), &data.corpus, &sel_config).stage("train-selector")?;

    let (test, cands): (Vec<Example>, Vec<CandidateSet>) =
        data.test.into_iter().zip(test_c).filter(|(_, c)| !c.is_empty()).unzip();
    let ps = select_records(Variant::RetPs, &test, &cands, &data.corpus, Some(&model), config.n).stage("select")?;
    let ret = select_records(Variant::Ret, &test, &cands, &data.corpus, None, config.n).stage("select")?;
    Ok(SelectionReport {
        seed: config.seed,
        k: sel_config.k,
        n: config.n,
        tables: test.len(),
        selector_precision: prototype_precision(&ps, &labels, config.n)?,
        bm25_precision: prototype_precision(&ret, &labels, config.n)?,
        epoch_losses: log.epoch_losses,
    })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub bleu4: f64,
    pub rouge4_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Median over seeds.
    pub bleu4: f64,
    pub rouge4_f: f64,
    pub runs: Vec<SeedScore>,
}

/// Sign test on per-example ROUGE-4 F under the primary seed; `wins` counts examples where `b` beats `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub a: Variant,
    pub b: Variant,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `None` when every example ties.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// The shared seed; sign tests use its runs.
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub sign_tests: Vec<PairedTest>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn paired_test(a: (Variant, &[f64]), b: (Variant, &[f64])) -> Result<PairedTest> {
    let p_value = match sign_test(b.1, a.1) {
        Ok(p) => Some(p),
        Err(Error::AllTies) => None,
        Err(e) => return Err(e),
    };
    let wins = b.1.iter().zip(a.1).filter(|(x, y)| x > y).count();
    let losses = b.1.iter().zip(a.1).filter(|(x, y)| x < y).count();
    Ok(PairedTest { a: a.0, b: b.0, wins, losses, ties: a.1.len() - wins - losses, p_value })
}

/// Runs each variant under each seed on the same data. Run directories are
/// `<out_dir>/<VARIANT>/seed-<s>`; the report goes to `<out_dir>/ablation.json`.
/// An empty `seeds` means the config's seed alone.
pub fn run_ablation(config: &PipelineConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    if variants.len() < 2 {
        return Err(Error::InvalidConfig("an ablation needs at least two variants".into()));
    }
    let seeds = if seeds.is_empty() { vec![config.seed] } else { seeds.to_vec() };
    let mut rows = Vec::with_capacity(variants.len());
    let mut primary: Vec<Vec<f64>> = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let mut c = config.clone();
            c.variant = variant;
            c.seed = seed;
            c.paths.out_dir = config.paths.out_dir.join(variant.as_str()).join(format!("seed-{seed}"));
            let report = run_pipeline(&c)?;
            if i == 0 {
                primary.push(report.eval.per_example_rouge4.clone());
            }
            runs.push(SeedScore { seed, bleu4: report.eval.bleu4, rouge4_f: report.eval.rouge4_f });
        }
        let bleu: Vec<f64> = runs.iter().map(|r| r.bleu4).collect();
        let rouge: Vec<f64> = runs.iter().map(|r| r.rouge4_f).collect();
        rows.push(AblationRow { variant, bleu4: median(&bleu), rouge4_f: median(&rouge), runs });
    }
    let sign_tests = (1..variants.len())
        .map(|i| paired_test((variants[i - 1], &primary[i - 1]), (variants[i], &primary[i])))
        .collect::<Result<_>>()?;
    let report = AblationReport { seed: seeds[0], seeds, rows, sign_tests };
    jsonl::write_json(&config.paths.out_dir.join("ablation.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub bleu4: f64,
    pub rouge4_f: f64,
    pub prototype_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub variant: Variant,
    pub points: Vec<SweepPoint>,
}

/// Runs `RET_PS_CA` once per prototype count into `<out_dir>/n-<n>` and writes `<out_dir>/sweep.json`.
pub fn sweep_n(config: &PipelineConfig, n_values: &[usize]) -> Result<SweepReport> {
    if let Some(&bad) = n_values.iter().find(|&&n| n == 0 || n > config.m) {
        return Err(Error::InvalidConfig(format!("prototype count {bad} must lie in 1..={}", config.m)));
    }
    let mut points = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut c = config.clone();
        c.variant = Variant::RetPsCa;
        c.n = n;
        c.paths.out_dir = config.paths.out_dir.join(format!("n-{n}"));
        let r = run_pipeline(&c)?;
        points.push(SweepPoint { n, bleu4: r.eval.bleu4, rouge4_f: r.eval.rouge4_f, prototype_precision: r.prototype_precision });
    }
    let report = SweepReport { seed: config.seed, variant: Variant::RetPsCa, points };
    jsonl::write_json(&config.paths.out_dir.join("sweep.json"), &report)?;
    Ok(report)
}
