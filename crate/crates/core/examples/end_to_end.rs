//! One full run: benchmark → index → retrieve → select → train generator → decode → evaluate.
//!
//! `cargo run --release --example end_to_end -- <dir>` keeps the artifacts in `<dir>`.

use tabproto::pipeline::{read_generations, run_pipeline, synth_benchmark, Paths, PipelineConfig, RunLayout, SyntheticSpec, Variant};

pub fn run_example() -> tabproto::Result<()> {
    run(&std::env::temp_dir().join("tabproto-end-to-end"))
}

fn run(root: &std::path::Path) -> tabproto::Result<()> {
    let files = synth_benchmark(&SyntheticSpec::default(), &root.join("data"))?;
    let config = PipelineConfig {
        paths: Paths::for_benchmark(&files, &root.join("run")),
        variant: Variant::RetPsCa,
        ..PipelineConfig::default()
    };
    let report = run_pipeline(&config)?;
    println!(
        "{} seed {}: BLEU-4 {:.4}, ROUGE-4 F {:.4}, prototype precision@{} {:.3}",
        report.variant,
        report.seed,
        report.eval.bleu4,
        report.eval.rouge4_f,
        report.n,
        report.prototype_precision.unwrap_or(f64::NAN)
    );
    let layout = RunLayout::new(&config.paths.out_dir);
    for g in read_generations(&layout.generations())?.iter().take(3) {
        println!("  table {}: {}", g.table_id, g.output);
    }
    println!("artifacts in {}", layout.dir.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> tabproto::Result<()> {
    match std::env::args().nth(1) {
        Some(dir) => run(dir.as_ref()),
        None => run_example(),
    }
}
