//! End-to-end runs: variant isolation, artifact round trips, stage errors.

use std::path::Path;

use tabproto::generator::GeneratorModel;
use tabproto::pipeline::{
    generate_all, read_generations, run_pipeline, sweep_n, synth_benchmark, Paths, PipelineConfig, RunLayout,
    SyntheticSpec, Variant,
};
use tabproto::retrieval::{read_candidates, InvertedIndex};
use tabproto::selector::{read_augmented, SelectorModel};
use tabproto::tabledata::parse_tables_file;
use tabproto::Error;

fn config(root: &Path, variant: Variant) -> PipelineConfig {
    let spec = SyntheticSpec { entities: 24, corpus_size: 200, ..SyntheticSpec::default() };
    let files = synth_benchmark(&spec, &root.join("data")).unwrap();
    let mut c = PipelineConfig { paths: Paths::for_benchmark(&files, &root.join(variant.as_str())), variant, ..PipelineConfig::default() };
    c.generator.epochs = 4;
    c.selector.epochs = 5;
    c
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn variants_share_everything_up_to_selection() {
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<RunLayout> = [Variant::Base, Variant::Ret, Variant::RetPs]
        .into_iter()
        .map(|v| {
            let c = config(root.path(), v);
            run_pipeline(&c).unwrap();
            RunLayout::new(&c.paths.out_dir)
        })
        .collect();
    for split in ["train", "test"] {
        assert_eq!(bytes(runs[0].candidates(split)), bytes(runs[1].candidates(split)));
        assert_eq!(bytes(runs[1].candidates(split)), bytes(runs[2].candidates(split)));
    }
    assert_eq!(bytes(runs[0].index()), bytes(runs[2].index()));
    assert_ne!(bytes(runs[1].augmented("test")), bytes(runs[2].augmented("test")));

    let tables = parse_tables_file(&root.path().join("data/test.jsonl")).unwrap();
    let base = read_augmented(&runs[0].augmented("test"), &tables).unwrap();
    assert!(base.iter().all(|r| r.prototypes.is_empty() && r.prototype_ids.is_empty()));
    let ret = read_augmented(&runs[1].augmented("test"), &tables).unwrap();
    assert!(ret.iter().all(|r| r.prototype_ids.len() <= 3));
    assert!(ret.iter().any(|r| !r.prototypes.is_empty()));
    assert!(!runs[0].selector().exists() && !runs[1].selector().exists() && runs[2].selector().exists());
}

#[test]
fn artifacts_reload_standalone() {
    let root = tempfile::tempdir().unwrap();
    let c = config(root.path(), Variant::RetPsCa);
    let report = run_pipeline(&c).unwrap();
    let layout = RunLayout::new(&c.paths.out_dir);
    let tables = parse_tables_file(&c.paths.test_tables).unwrap();

    InvertedIndex::load(&layout.index()).unwrap();
    assert_eq!(read_candidates(&layout.candidates("test")).unwrap().len(), tables.len());
    SelectorModel::load(&layout.selector()).unwrap();
    let records = read_augmented(&layout.augmented("test"), &tables).unwrap();
    let generator = GeneratorModel::load(&layout.generator()).unwrap();
    let regenerated = generate_all(&generator, &records, c.generator.max_decode_len).unwrap();
    assert_eq!(regenerated, read_generations(&layout.generations()).unwrap());

    let on_disk: serde_json::Value = serde_json::from_slice(&bytes(layout.report())).unwrap();
    assert_eq!(on_disk["bleu4"].as_f64().unwrap(), report.eval.bleu4);
    assert_eq!(on_disk["variant"], "RET_PS_CA");
    assert_eq!(report.eval.n, tables.len());
    assert_eq!(report.generator_epoch_losses.len(), 4);
}

#[test]
fn sweep_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let c = config(root.path(), Variant::RetPsCa);
    let a = sweep_n(&c, &[1, 3, 5, 10]).unwrap();
    let b = sweep_n(&c, &[1, 3, 5, 10]).unwrap();
    assert_eq!(a.points.len(), 4);
    assert_eq!(a, b);
    assert_eq!(a.points.iter().map(|p| p.n).collect::<Vec<_>>(), [1, 3, 5, 10]);
}

#[test]
fn stage_errors_name_the_stage() {
    let root = tempfile::tempdir().unwrap();
    let mut c = config(root.path(), Variant::RetPs);
    c.paths.corpus = root.path().join("missing.jsonl");
    match run_pipeline(&c) {
        Err(e @ Error::Stage { stage: "load", .. }) => assert_eq!(e.exit_code(), 2),
        other => panic!("{other:?}"),
    }

    let mut c = config(root.path(), Variant::RetPs);
    c.selector.k = 1000;
    match run_pipeline(&c) {
        Err(Error::Stage { stage: "train-selector", .. }) => {}
        other => panic!("{other:?}"),
    }
}
