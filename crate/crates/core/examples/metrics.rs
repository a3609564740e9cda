//! BLEU-4, ROUGE-4 F and the paired sign test on hand-sized inputs.

use tabproto::evaluation::{bleu4, evaluate, precision_at_k, rouge4_f, sign_test_detail};
use tabproto::tokenize;

pub fn run_example() -> tabproto::Result<()> {
    let hyp = tokenize("the absence is a metal band from tampa");
    let reference = tokenize("the absence is a death metal band from tampa");
    println!("hyp: {hyp}\nref: {reference}");
    println!("BLEU-4    {:.6}", bleu4(std::slice::from_ref(&hyp), std::slice::from_ref(&reference))?);
    println!("ROUGE-4 F {:.6}", rouge4_f(&hyp, &reference));

    let corpus_hyps = [tokenize("a b c d e"), hyp];
    let corpus_refs = [tokenize("a b c d"), reference];
    let report = evaluate(&corpus_hyps, &corpus_refs)?;
    println!("corpus: BLEU-4 {:.6}, mean ROUGE-4 F {:.6} over {}", report.bleu4, report.rouge4_f, report.n);

    let relevant = [1, 2, 3].into_iter().collect();
    println!("precision@3 of [1, 9, 3]: {:.4}", precision_at_k(&[1, 9, 3], &relevant, 3)?);

    // System A beats B on 9 examples, loses on 1, ties on 2.
    let a = [0.9, 0.8, 0.7, 0.6, 0.9, 0.8, 0.7, 0.6, 0.5, 0.1, 0.3, 0.3];
    let b = [0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4, 0.2, 0.6, 0.3, 0.3];
    let s = sign_test_detail(&a, &b)?;
    println!("sign test: {} wins, {} losses, {} ties, p = {:.6}", s.wins, s.losses, s.ties, s.p_value);
    Ok(())
}

#[allow(dead_code)]
fn main() -> tabproto::Result<()> {
    run_example()
}
