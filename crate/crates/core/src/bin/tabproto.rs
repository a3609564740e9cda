use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tabproto::evaluation::{sign_test_detail, EvalReport};
use tabproto::generator::{GeneratorModel, GeneratorTrainConfig};
use tabproto::pipeline::{self, PipelineConfig, SyntheticSpec, Variant};
use tabproto::retrieval::{self, InvertedIndex};
use tabproto::selector::{self, SelectorModel};
use tabproto::tabledata::{load_corpus, parse_tables_file};
use tabproto::{jsonl, Error, Result};

#[derive(Parser)]
#[command(name = "tabproto", version, about = "Retrieval-augmented few-shot table-to-text generation")]
struct Cli {
    /// JSON pipeline configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark (corpus, train/test tables, labels) into --out-dir.
    Synth(SynthArgs),
    /// Build a BM25 index over a corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve m candidates per table.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        m: Option<usize>,
        /// Also drop candidates identical to each table's reference.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the prototype selector on tables and their candidates.
    TrainSelector {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose n prototypes per table, by selector or by retrieval order.
    Select {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, conflicts_with = "by_retrieval", required_unless_present = "by_retrieval")]
        selector: Option<PathBuf>,
        #[arg(long)]
        by_retrieval: bool,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator on an augmented dataset.
    TrainGenerator {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        augmented: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train with the language-model loss only.
        #[arg(long)]
        no_ca: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode one output per augmented record.
    Generate {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        augmented: PathBuf,
        #[arg(long)]
        max_decode_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generations against table references.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Second generations file; adds a sign test on per-example ROUGE-4 F.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline for one variant.
    Run {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Run several variants on the same data and seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "BASE,RET,RET_PS,RET_PS_CA")]
        variants: Vec<Variant>,
        /// Repeat over these seeds and report medians.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run RET_PS_CA for several prototype counts.
    SweepN {
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        n_values: Vec<usize>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    attributes: Option<usize>,
    #[arg(long)]
    corpus_size: Option<usize>,
    #[arg(long)]
    distractor_ratio: Option<f64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Serialize)]
struct EvalFile {
    #[serde(flatten)]
    report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    sign_test: Option<SignBlock>,
}

#[derive(Serialize)]
struct SignBlock {
    against: PathBuf,
    wins: usize,
    losses: usize,
    ties: usize,
    p_value: Option<f64>,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut c = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        c.paths.out_dir = d.clone();
    }
    Ok(c)
}

fn generator_config(c: &PipelineConfig, epochs: Option<usize>, ca: bool) -> GeneratorTrainConfig {
    let mut g = GeneratorTrainConfig { ca_enabled: ca, ..c.generator_config() };
    if let Some(e) = epochs {
        g.epochs = e;
    }
    g
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut c = config(&cli)?;
    match cli.command {
        Command::Synth(a) => {
            let d = SyntheticSpec::default();
            let spec = SyntheticSpec {
                entities: a.entities.unwrap_or(d.entities),
                attributes: a.attributes.unwrap_or(d.attributes),
                corpus_size: a.corpus_size.unwrap_or(d.corpus_size),
                distractor_ratio: a.distractor_ratio.unwrap_or(d.distractor_ratio),
                vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
                seed: cli.seed.unwrap_or(d.seed),
                train_fraction: a.train_fraction.unwrap_or(d.train_fraction),
            };
            let dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("data"));
            let files = pipeline::synth_benchmark(&spec, &dir)?;
            eprintln!("wrote {} {} {} {}", files.corpus.display(), files.train_tables.display(), files.test_tables.display(), files.labels.display());
        }
        Command::Index { corpus, out } => {
            retrieval::build_index(&load_corpus(&corpus)?).save(&out)?;
        }
        Command::Retrieve { index, tables, m, corpus, out } => {
            let index = InvertedIndex::load(&index)?;
            let examples = parse_tables_file(&tables)?;
            let m = m.unwrap_or(c.m);
            let sets = match corpus {
                Some(p) => pipeline::build_candidates(&index, &load_corpus(&p)?, &examples, m)?,
                None => examples
                    .iter()
                    .map(|ex| retrieval::retrieve(&index, &ex.table, ex.id, m))
                    .collect::<Result<_>>()?,
            };
            retrieval::write_candidates(&out, &sets)?;
        }
        Command::TrainSelector { tables, candidates, corpus, k, epochs, out } => {
            let corpus = load_corpus(&corpus)?;
            let examples = parse_tables_file(&tables)?;
            let sets = retrieval::read_candidates(&candidates)?;
            let mut sel = c.selector_config();
            sel.k = k.unwrap_or(sel.k);
            sel.epochs = epochs.unwrap_or(sel.epochs);
            let train = pipeline::selector_examples(&examples, &align(&examples, sets)?, sel.k);
            let (model, log) = selector::train_selector(&train, &corpus, &sel)?;
            model.save(&out)?;
            print_json(&log)?;
        }
        Command::Select { tables, candidates, corpus, selector, by_retrieval, n, out } => {
            let corpus = load_corpus(&corpus)?;
            let examples = parse_tables_file(&tables)?;
            let sets = align(&examples, retrieval::read_candidates(&candidates)?)?;
            let n = n.unwrap_or(c.n);
            let model = selector.map(|p| SelectorModel::load(&p)).transpose()?;
            let variant = if by_retrieval { Variant::Ret } else { Variant::RetPs };
            let records = pipeline::select_records(variant, &examples, &sets, &corpus, model.as_ref(), n)?;
            selector::write_augmented(&out, &records)?;
        }
        Command::TrainGenerator { tables, augmented, epochs, no_ca, out } => {
            let examples = parse_tables_file(&tables)?;
            let records = selector::read_augmented(&augmented, &examples)?;
            let g = generator_config(&c, epochs, !no_ca);
            let vocab = pipeline::generator_vocabulary(&records);
            let (model, log) = tabproto::generator::train_generator(vocab, &records, &g)?;
            model.save(&out)?;
            print_json(&log)?;
        }
        Command::Generate { generator, tables, augmented, max_decode_len, out } => {
            let model = GeneratorModel::load(&generator)?;
            let examples = parse_tables_file(&tables)?;
            let records = selector::read_augmented(&augmented, &examples)?;
            let len = max_decode_len.unwrap_or(c.generator.max_decode_len);
            pipeline::write_generations(&out, &pipeline::generate_all(&model, &records, len)?)?;
        }
        Command::Eval { hyp, reference, against, out } => {
            let refs = parse_tables_file(&reference)?;
            let report = pipeline::evaluate_generations(&pipeline::read_generations(&hyp)?, &refs)?;
            let sign_test = match against {
                Some(path) => {
                    let other = pipeline::evaluate_generations(&pipeline::read_generations(&path)?, &refs)?;
                    Some(sign_block(path, &report.per_example_rouge4, &other.per_example_rouge4)?)
                }
                None => None,
            };
            let file = EvalFile { report, sign_test };
            jsonl::write_json(&out, &file)?;
            print_json(&file)?;
        }
        Command::Run { variant } => {
            if let Some(v) = variant {
                c.variant = v;
            }
            print_json(&pipeline::run_pipeline(&c)?)?;
        }
        Command::Ablate { variants, seeds } => {
            print_json(&pipeline::run_ablation(&c, &variants, &seeds)?)?;
        }
        Command::SweepN { n_values } => {
            print_json(&pipeline::sweep_n(&c, &n_values)?)?;
        }
    }
    Ok(())
}

/// Orders candidate sets to match `examples`.
fn align(examples: &[tabproto::tabledata::Example], sets: Vec<retrieval::CandidateSet>) -> Result<Vec<retrieval::CandidateSet>> {
    let mut by_id: std::collections::HashMap<u64, retrieval::CandidateSet> = sets.into_iter().map(|s| (s.table_id, s)).collect();
    examples
        .iter()
        .map(|ex| by_id.remove(&ex.id).ok_or_else(|| Error::InvalidInput(format!("no candidates for table {}", ex.id))))
        .collect()
}

fn sign_block(against: PathBuf, a: &[f64], b: &[f64]) -> Result<SignBlock> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput("hypothesis files cover different numbers of tables".into()));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let p_value = match sign_test_detail(a, b) {
        Ok(s) => Some(s.p_value),
        Err(Error::AllTies) => None,
        Err(e) => return Err(e),
    };
    Ok(SignBlock { against, wins, losses, ties: a.len() - wins - losses, p_value })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
