//! Generation metrics and significance testing.
//!
//! BLEU-4 is corpus-pooled with no smoothing: any zero pooled precision makes
//! the score 0. ROUGE-4 is the uniform F-measure over clipped 4-gram overlap,
//! averaged over examples for the corpus figure. No stemming or stop words.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabledata::TokenSequence;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap and hypothesis n-gram total.
fn clipped_overlap(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (overlap, hyp.len().saturating_sub(n - 1))
}

pub fn bleu4(hypotheses: &[TokenSequence], references: &[TokenSequence]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let (m, t) = clipped_overlap(h, rf, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = (1.0 - r as f64 / c as f64).exp().min(1.0);
    Ok(bp * log_p.exp())
}

pub fn rouge4_f(hypothesis: &[String], reference: &[String]) -> f64 {
    let (overlap, hyp_total) = clipped_overlap(hypothesis, reference, 4);
    let ref_total = reference.len().saturating_sub(3);
    if overlap == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// `|top-k ∩ relevant| / k`; a shorter list still divides by `k`.
pub fn precision_at_k(selected: &[u64], relevant: &BTreeSet<u64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("precision@k needs k >= 1".into()));
    }
    let hits = selected.iter().take(k).filter(|id| relevant.contains(id)).count();
    Ok(hits as f64 / k as f64)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// `P[W ≤ w]` for `W ~ Binomial(n, 1/2)`.
fn binomial_half_cdf(n: u64, w: u64) -> f64 {
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    (0..=w).map(|k| (ln_choose(n, k) + ln_half_n).exp()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Exact two-sided sign test on paired scores, ties dropped.
pub fn sign_test_detail(scores_a: &[f64], scores_b: &[f64]) -> Result<SignTest> {
    if scores_a.len() != scores_b.len() || scores_a.is_empty() {
        return Err(Error::InvalidInput("sign test needs two equal-length, non-empty score lists".into()));
    }
    let wins = scores_a.iter().zip(scores_b).filter(|(a, b)| a > b).count();
    let losses = scores_a.iter().zip(scores_b).filter(|(a, b)| a < b).count();
    let n = (wins + losses) as u64;
    if n == 0 {
        return Err(Error::AllTies);
    }
    let w = wins as u64;
    let lower = binomial_half_cdf(n, w);
    // P[W ≥ w] = P[W ≤ n − w] by symmetry.
    let upper = binomial_half_cdf(n, n - w);
    Ok(SignTest {
        wins,
        losses,
        ties: scores_a.len() - wins - losses,
        p_value: (2.0 * lower.min(upper)).min(1.0),
    })
}

pub fn sign_test(scores_a: &[f64], scores_b: &[f64]) -> Result<f64> {
    sign_test_detail(scores_a, scores_b).map(|s| s.p_value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge4_f: f64,
    pub n: usize,
    pub per_example_rouge4: Vec<f64>,
}

pub fn evaluate(hypotheses: &[TokenSequence], references: &[TokenSequence]) -> Result<EvalReport> {
    let bleu4 = bleu4(hypotheses, references)?;
    let per_example_rouge4: Vec<f64> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| rouge4_f(h, r))
        .collect();
    let n = per_example_rouge4.len();
    let rouge4_f = if n == 0 {
        0.0
    } else {
        per_example_rouge4.iter().sum::<f64>() / n as f64
    };
    Ok(EvalReport { bleu4, rouge4_f, n, per_example_rouge4 })
}
