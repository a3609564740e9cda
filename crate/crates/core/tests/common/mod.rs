//! Independent oracles shared by the integration suites: central finite
//! differences, brute-force subset maximization and random model builders.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabproto::generator::{ca_loss_from_probs, lm_loss_from_probs, ConditioningInput, GeneratorModel, Objective};
use tabproto::selector::{margin_loss, SelectorModel, MARGIN};
use tabproto::tabledata::{linearize_table, Table, TokenSequence, Vocabulary};

pub const FD_EPS: f64 = 1e-5;
/// Denominator floor for relative error. Central differences of O(10) losses at
/// this step carry ~1e-10 of rounding noise, so exactly-zero gradients are
/// compared on absolute error instead.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn central_difference<F: FnMut(f64) -> f64>(x0: f64, mut f: F) -> f64 {
    (f(x0 + FD_EPS) - f(x0 - FD_EPS)) / (2.0 * FD_EPS)
}

pub fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, pool: &[String], len: std::ops::Range<usize>) -> TokenSequence {
    let n = rng.gen_range(len);
    TokenSequence::new((0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()).unwrap()
}

pub fn random_table(rng: &mut ChaCha8Rng, pool: &[String]) -> Table {
    let pairs: Vec<(String, String)> = (0..rng.gen_range(1..4))
        .map(|_| {
            (
                pool[rng.gen_range(0..pool.len())].clone(),
                random_tokens(rng, pool, 1..3).to_vec().join(" "),
            )
        })
        .collect();
    Table::from_pairs(&pairs).unwrap()
}

/// A selector over `V` tokens (6 reserved + `V - 6` words) with every parameter random.
pub fn random_selector(rng: &mut ChaCha8Rng, vocab_size: usize, dim: usize) -> (SelectorModel, Vec<String>) {
    let pool = words(vocab_size - 6);
    let vocab = Vocabulary::build([&TokenSequence::new(pool.clone()).unwrap()]);
    assert_eq!(vocab.len(), vocab_size);
    let emb = (0..vocab_size * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let proj = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let model = SelectorModel::from_parts(vocab, dim, emb, proj, rng.gen_range(-1.0..1.0)).unwrap();
    (model, pool)
}

/// Smallest |slack| over the hinge terms; FD across a kink is meaningless.
pub fn min_abs_slack(model: &SelectorModel, table: &Table, y: &TokenSequence, negs: &[TokenSequence]) -> f64 {
    use tabproto::selector::score_pair;
    let fy = score_pair(model, table, y);
    negs.iter()
        .map(|r| (MARGIN - fy + score_pair(model, table, r)).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Max relative error between analytic and central-difference gradients over all selector parameters.
pub fn selector_grad_error(model: &SelectorModel, table: &Table, y: &TokenSequence, negs: &[TokenSequence]) -> f64 {
    let (_, grad) = tabproto::selector::margin_loss_grad(model, table, y, negs).unwrap();
    let analytic: Vec<f64> = grad
        .embeddings
        .iter()
        .chain(&grad.projection)
        .copied()
        .chain([grad.bias])
        .collect();
    let mut work = model.clone();
    let mut worst = 0.0f64;
    let mut flat = 0;
    for group in 0..3 {
        let len = work.params_mut()[group].len();
        for i in 0..len {
            let x0 = work.params_mut()[group][i];
            let numeric = central_difference(x0, |x| {
                work.params_mut()[group][i] = x;
                margin_loss(&work, table, y, negs).unwrap()
            });
            work.params_mut()[group][i] = x0;
            worst = worst.max(rel_err(analytic[flat], numeric));
            flat += 1;
        }
    }
    worst
}

pub fn generator_loss(model: &GeneratorModel, x: &ConditioningInput, target: &[usize], negatives: &[usize], objective: Objective) -> f64 {
    let probs = model.teacher_forced_dists(x, target).unwrap();
    let lm = lm_loss_from_probs(probs.view(), target);
    let ca = ca_loss_from_probs(probs.view(), negatives);
    match objective {
        Objective::Lm => lm,
        Objective::Ca => ca,
        Objective::Total => lm + ca,
    }
}

/// Max relative error per parameter group, in `PARAM_NAMES` order.
pub fn generator_grad_errors(
    model: &GeneratorModel,
    x: &ConditioningInput,
    target: &[usize],
    negatives: &[usize],
    objective: Objective,
) -> Vec<f64> {
    let (_, grad) = model.loss_and_grad(x, target, negatives, objective).unwrap();
    let analytic: Vec<Vec<f64>> = grad.groups().iter().map(|g| g.to_vec()).collect();
    let mut work = model.clone();
    let mut errors = Vec::new();
    for (group, expected) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for (i, &a) in expected.iter().enumerate() {
            let x0 = work.params.groups_mut()[group][i];
            let numeric = central_difference(x0, |v| {
                work.params.groups_mut()[group][i] = v;
                generator_loss(&work, x, target, negatives, objective)
            });
            work.params.groups_mut()[group][i] = x0;
            worst = worst.max(rel_err(a, numeric));
        }
        errors.push(worst);
    }
    errors
}

/// Tiny random generator: `V` = 6 reserved + 14 words, d_g = 8, L_max = 16.
pub fn tiny_generator(seed: u64) -> (GeneratorModel, Vec<String>) {
    let pool = words(14);
    let vocab = Vocabulary::build([&TokenSequence::new(pool.clone()).unwrap()]);
    let mut model = GeneratorModel::init(vocab, 8, 16, seed).unwrap();
    // Larger weights than the default init so every nonlinearity is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for g in model.params.groups_mut() {
        g.iter_mut().for_each(|p| *p = rng.gen_range(-0.8..0.8));
    }
    (model, pool)
}

/// Brute-force argmax of the summed score over all size-n subsets; ties go to the
/// lexicographically smallest id-sorted subset.
pub fn best_subset(scored: &[(u64, f64)], n: usize) -> Vec<u64> {
    let k = n.min(scored.len());
    let mut best: Option<(f64, Vec<u64>)> = None;
    for mask in 0u32..(1 << scored.len()) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let picked: Vec<(u64, f64)> = (0..scored.len()).filter(|i| mask & (1 << i) != 0).map(|i| scored[i]).collect();
        let total: f64 = picked.iter().map(|p| p.1).sum();
        let mut ids: Vec<u64> = picked.iter().map(|p| p.0).collect();
        ids.sort_unstable();
        let better = match &best {
            None => true,
            Some((b, bids)) => total > *b || (total == *b && ids < *bids),
        };
        if better {
            best = Some((total, ids));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

pub fn table_len(table: &Table) -> usize {
    linearize_table(table).len()
}
