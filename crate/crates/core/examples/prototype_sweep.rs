//! BLEU-4 and ROUGE-4 as the number of prototypes grows.

use tabproto::pipeline::{sweep_n, synth_benchmark, Paths, PipelineConfig, SyntheticSpec};

pub fn run_example() -> tabproto::Result<()> {
    let root = std::env::temp_dir().join("tabproto-sweep");
    let files = synth_benchmark(&SyntheticSpec::default(), &root.join("data"))?;
    let config = PipelineConfig { paths: Paths::for_benchmark(&files, &root.join("runs")), ..PipelineConfig::default() };
    let report = sweep_n(&config, &[1, 3, 5, 10])?;
    println!("{:>3} {:>8} {:>8} {:>10}", "n", "BLEU-4", "ROUGE-4", "precision");
    for p in &report.points {
        println!("{:>3} {:>8.4} {:>8.4} {:>10.3}", p.n, p.bleu4, p.rouge4_f, p.prototype_precision.unwrap_or(f64::NAN));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> tabproto::Result<()> {
    run_example()
}
