//! The BASE → RET → RET_PS → RET_PS_CA ladder with sign tests between neighbours.
//!
//! `cargo run --release --example ablation -- 5` repeats over seeds 0..5 and reports medians.

use tabproto::pipeline::{run_ablation, synth_benchmark, Paths, PipelineConfig, SyntheticSpec, Variant};

pub fn run_example() -> tabproto::Result<()> {
    run(1)
}

fn run(seeds: u64) -> tabproto::Result<()> {
    let root = std::env::temp_dir().join("tabproto-ablation");
    let files = synth_benchmark(&SyntheticSpec::default(), &root.join("data"))?;
    let config = PipelineConfig { paths: Paths::for_benchmark(&files, &root.join("runs")), ..PipelineConfig::default() };
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = run_ablation(&config, &Variant::LADDER, &seeds)?;

    println!("seeds {:?}", report.seeds);
    println!("{:<10} {:>8} {:>8}", "variant", "BLEU-4", "ROUGE-4");
    for row in &report.rows {
        println!("{:<10} {:>8.4} {:>8.4}", row.variant.as_str(), row.bleu4, row.rouge4_f);
    }
    for t in &report.sign_tests {
        let p = t.p_value.map_or("n/a (all ties)".to_string(), |p| format!("{p:.4}"));
        println!("{} vs {}: {} better, {} worse, {} tied, p = {p}", t.b, t.a, t.wins, t.losses, t.ties);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> tabproto::Result<()> {
    run(std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1))
}
