//! Write the seeded benchmark to disk and summarize what was planted.
//!
//! `cargo run --example synthetic_benchmark -- <dir>` (default: a temp directory).

use tabproto::pipeline::{read_labels, synth_benchmark, SyntheticSpec};
use tabproto::tabledata::{load_corpus, parse_tables_file};

pub fn run_example() -> tabproto::Result<()> {
    run(&std::env::temp_dir().join("tabproto-benchmark"))
}

fn run(dir: &std::path::Path) -> tabproto::Result<()> {
    let spec = SyntheticSpec::default();
    let files = synth_benchmark(&spec, dir)?;

    let corpus = load_corpus(&files.corpus)?;
    let train = parse_tables_file(&files.train_tables)?;
    let test = parse_tables_file(&files.test_tables)?;
    let labels = read_labels(&files.labels)?;
    let labeled: std::collections::BTreeSet<u64> = labels.values().flatten().copied().collect();
    println!("{} sentences ({} relevant to some table), {} train and {} test tables", corpus.len(), labeled.len(), train.len(), test.len());

    let ex = &test[0];
    println!("\ntable {}: {:?}", ex.id, ex.table.pairs().iter().map(|p| (p.attribute(), p.value())).collect::<Vec<_>>());
    println!("reference: {}", ex.reference);
    for id in labels[&ex.id].iter().take(3) {
        println!("relevant:  {}", corpus.sentence(*id)?.text);
    }
    if let Some(d) = corpus.sentences().iter().find(|s| !labeled.contains(&s.id)) {
        println!("distractor: {}", d.text);
    }
    println!("\nfiles in {}", dir.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> tabproto::Result<()> {
    match std::env::args().nth(1) {
        Some(dir) => run(dir.as_ref()),
        None => run_example(),
    }
}
