//! Train the margin-ranking selector and compare its precision@3 with the BM25 order.

use tabproto::evaluation::precision_at_k;
use tabproto::pipeline::{build_candidates, generate_benchmark, selector_examples, SyntheticSpec};
use tabproto::retrieval::build_index;
use tabproto::selector::{select_by_retrieval, select_top_n, train_selector, SelectorTrainConfig};

pub fn run_example() -> tabproto::Result<()> {
    let bench = generate_benchmark(&SyntheticSpec::default())?;
    let index = build_index(&bench.corpus);
    let train_c = build_candidates(&index, &bench.corpus, &bench.train, 100)?;
    let test_c = build_candidates(&index, &bench.corpus, &bench.test, 100)?;

    let config = SelectorTrainConfig::default();
    let examples = selector_examples(&bench.train, &train_c, config.k);
    let (model, log) = train_selector(&examples, &bench.corpus, &config)?;
    println!(
        "selector: {} examples, loss {:.4} -> {:.4}",
        examples.len(),
        log.epoch_losses[0],
        log.epoch_losses.last().unwrap()
    );

    let (mut ps, mut bm25) = (0.0, 0.0);
    for (ex, cands) in bench.test.iter().zip(&test_c) {
        let relevant = &bench.labels[&ex.id];
        ps += precision_at_k(&select_top_n(&model, &ex.table, cands, &bench.corpus, 3)?.ids(), relevant, 3)?;
        bm25 += precision_at_k(&select_by_retrieval(cands, 3)?.ids(), relevant, 3)?;
    }
    let n = bench.test.len() as f64;
    println!("precision@3 on {} test tables: selector {:.3}, BM25 order {:.3}", bench.test.len(), ps / n, bm25 / n);

    let ex = &bench.test[0];
    println!("\n{}", ex.reference);
    for c in select_top_n(&model, &ex.table, &test_c[0], &bench.corpus, 3)?.entries {
        println!("  selector {:>8.3}  {}", c.score, bench.corpus.sentence(c.sentence_id)?.text);
    }
    for c in select_by_retrieval(&test_c[0], 3)?.entries {
        println!("  bm25     {:>8.3}  {}", c.score, bench.corpus.sentence(c.sentence_id)?.text);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> tabproto::Result<()> {
    run_example()
}
