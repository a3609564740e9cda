//! A small conditional autoregressive generator.
//!
//! One transformer block (no layer norm) over `[X; y]`: learned token and
//! position embeddings, single-head causal self-attention with a residual,
//! a GELU feed-forward layer (d → 2d → d) with a residual, and an output
//! projection to the vocabulary. Gradients are computed by hand.
//!
//! Training minimizes `L_LM + L_CA`, where `L_CA` is an unlikelihood penalty
//! `−Σ_i Σ_{t∈N} log(1 − p(t | y_<i; X))` on tokens that occur in the
//! prototypes but not in the reference.

use std::collections::BTreeSet;
use std::path::Path;

use log::{debug, info, warn};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::optim::Adam;
use crate::selector::AugmentedRecord;
use crate::tabledata::{is_reserved, linearize_table, Table, TokenSequence, Vocabulary, BOS, EOS, SEP};
use crate::tokenize;

/// Lower clamp on `1 − p` inside the unlikelihood log.
pub const CA_CLAMP: f64 = 1e-12;

const MODEL_FORMAT: &str = "tabproto-generator";
const MODEL_VERSION: u32 = 1;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Token ids `[<bos>; table; <sep>; S_1; ...; <sep>; S_n]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditioningInput {
    pub ids: Vec<usize>,
    /// End (exclusive) of the `<bos>` + table segment.
    pub table_end: usize,
    /// `(start, end)` of each prototype's tokens after truncation.
    pub prototype_spans: Vec<(usize, usize)>,
}

impl ConditioningInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lays out the conditioning input within `max_len` tokens.
///
/// Overflow is cut from the tail, so prototypes lose tokens (last first) and
/// the table is never truncated.
pub fn build_conditioning(
    vocab: &Vocabulary,
    table: &Table,
    prototypes: &[TokenSequence],
    max_len: usize,
) -> Result<ConditioningInput> {
    let mut ids = vec![vocab.id(BOS)];
    ids.extend(vocab.encode(&linearize_table(table)));
    if ids.len() > max_len {
        return Err(Error::InputTooLong { len: ids.len(), max: max_len });
    }
    let table_end = ids.len();
    let mut prototype_spans = Vec::with_capacity(prototypes.len());
    for proto in prototypes {
        if ids.len() >= max_len {
            break;
        }
        ids.push(vocab.id(SEP));
        let start = ids.len();
        let room = max_len - ids.len();
        ids.extend(proto.iter().take(room).map(|t| vocab.id(t)));
        prototype_spans.push((start, ids.len()));
    }
    Ok(ConditioningInput { ids, table_end, prototype_spans })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_len: usize,
}

impl Architecture {
    pub fn ff_dim(&self) -> usize {
        2 * self.d_model
    }
}

/// Every trainable tensor. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_out: Array2<f64>,
}

pub const PARAM_NAMES: [&str; 11] = ["tok_emb", "pos_emb", "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "w_out"];

impl GeneratorParams {
    pub fn zeros(arch: Architecture) -> Self {
        let (v, d, l, f) = (arch.vocab_size, arch.d_model, arch.max_len, arch.ff_dim());
        GeneratorParams {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((l, d)),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
            w_out: Array2::zeros((d, v)),
        }
    }

    /// Parameter groups as flat slices, in [`PARAM_NAMES`] order.
    pub fn groups(&self) -> Vec<&[f64]> {
        vec![
            self.tok_emb.as_slice().unwrap(),
            self.pos_emb.as_slice().unwrap(),
            self.wq.as_slice().unwrap(),
            self.wk.as_slice().unwrap(),
            self.wv.as_slice().unwrap(),
            self.wo.as_slice().unwrap(),
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
        ]
    }

    pub fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
            self.wq.as_slice_mut().unwrap(),
            self.wk.as_slice_mut().unwrap(),
            self.wv.as_slice_mut().unwrap(),
            self.wo.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    vocab: Vocabulary,
    arch: Architecture,
    pub params: GeneratorParams,
}

/// Forward activations for one sequence, kept for the backward pass.
struct Forward {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ctx: Array2<f64>,
    h1: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    h2: Array2<f64>,
    /// Softmax rows for positions `from..`.
    probs: Array2<f64>,
    from: usize,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
}

impl GeneratorModel {
    pub fn init(vocab: Vocabulary, d_model: usize, max_len: usize, seed: u64) -> Result<Self> {
        if d_model == 0 || max_len == 0 {
            return Err(Error::InvalidConfig("generator dimensions must be positive".into()));
        }
        let arch = Architecture { vocab_size: vocab.len(), d_model, max_len };
        let mut params = GeneratorParams::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = d_model as f64;
        let scales = [
            0.5,
            0.5,
            1.0 / d.sqrt(),
            1.0 / d.sqrt(),
            1.0 / d.sqrt(),
            1.0 / d.sqrt(),
            1.0 / d.sqrt(),
            0.0,
            1.0 / (2.0 * d).sqrt(),
            0.0,
            1.0 / d.sqrt(),
        ];
        for (group, scale) in params.groups_mut().into_iter().zip(scales) {
            if scale > 0.0 {
                group.iter_mut().for_each(|p| *p = rng.gen_range(-scale..scale));
            }
        }
        Ok(GeneratorModel { vocab, arch, params })
    }

    pub fn from_params(vocab: Vocabulary, arch: Architecture, params: GeneratorParams) -> Result<Self> {
        let expected = GeneratorParams::zeros(arch);
        let shapes_match = expected
            .groups()
            .iter()
            .zip(params.groups())
            .all(|(a, b)| a.len() == b.len())
            && params.tok_emb.dim() == expected.tok_emb.dim()
            && params.w_out.dim() == expected.w_out.dim()
            && params.pos_emb.dim() == expected.pos_emb.dim();
        if arch.vocab_size != vocab.len() || !shapes_match {
            return Err(Error::InvalidInput("generator parameter shapes do not match".into()));
        }
        Ok(GeneratorModel { vocab, arch, params })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn conditioning(&self, table: &Table, prototypes: &[TokenSequence], max_len: usize) -> Result<ConditioningInput> {
        build_conditioning(&self.vocab, table, prototypes, max_len)
    }

    /// Reference ids followed by `<eos>`.
    pub fn target_ids(&self, reference: &TokenSequence) -> Vec<usize> {
        let mut y = self.vocab.encode(reference);
        y.push(self.vocab.id(EOS));
        y
    }

    /// Negative tokens: prototype types absent from the target, minus reserved tokens.
    pub fn negative_ids(&self, prototypes: &[TokenSequence], target: &[usize]) -> Vec<usize> {
        let target: BTreeSet<usize> = target.iter().copied().collect();
        prototypes
            .iter()
            .flat_map(|p| p.iter())
            .map(|t| self.vocab.id(t))
            .filter(|id| !target.contains(id) && !is_reserved(self.vocab.token(*id)))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.arch.max_len {
            return Err(Error::InputTooLong { len, max: self.arch.max_len });
        }
        if len == 0 {
            return Err(Error::InvalidInput("empty input sequence".into()));
        }
        Ok(())
    }

    fn forward(&self, ids: &[usize], from: usize) -> Forward {
        let p = &self.params;
        let t = ids.len();
        let d = self.arch.d_model;
        let mut x = Array2::zeros((t, d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &p.tok_emb.row(id);
            row += &p.pos_emb.row(i);
        }
        let q = x.dot(&p.wq);
        let k = x.dot(&p.wk);
        let v = x.dot(&p.wv);
        let scale = 1.0 / (d as f64).sqrt();
        let mut attn = q.dot(&k.t()) * scale;
        for i in 0..t {
            let mut row = attn.row_mut(i);
            let max = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for j in 0..t {
                if j <= i {
                    row[j] = (row[j] - max).exp();
                    sum += row[j];
                } else {
                    row[j] = 0.0;
                }
            }
            row.slice_mut(s![..=i]).mapv_inplace(|e| e / sum);
        }
        let ctx = attn.dot(&v);
        let h1 = &x + &ctx.dot(&p.wo);
        let u = h1.dot(&p.w1) + &p.b1;
        let g = u.mapv(gelu);
        let h2 = &h1 + &(g.dot(&p.w2) + &p.b2);
        let mut probs = h2.slice(s![from.., ..]).dot(&p.w_out);
        softmax_rows(&mut probs);
        Forward { x, q, k, v, attn, ctx, h1, u, g, h2, probs, from }
    }

    fn teacher_forced_ids(x: &ConditioningInput, target: &[usize]) -> Vec<usize> {
        let mut ids = x.ids.clone();
        ids.extend_from_slice(&target[..target.len().saturating_sub(1)]);
        ids
    }

    /// Next-token distributions for every target position under teacher forcing.
    /// Row `i` is `p(· | y_<i; X)`.
    pub fn teacher_forced_dists(&self, x: &ConditioningInput, target: &[usize]) -> Result<Array2<f64>> {
        if target.is_empty() {
            return Err(Error::InvalidInput("empty target".into()));
        }
        let ids = Self::teacher_forced_ids(x, target);
        self.check_len(ids.len())?;
        Ok(self.forward(&ids, x.len() - 1).probs)
    }

    /// Both loss parts and the exact gradient of the chosen objective.
    pub fn loss_and_grad(
        &self,
        x: &ConditioningInput,
        target: &[usize],
        negatives: &[usize],
        objective: Objective,
    ) -> Result<(LossParts, GeneratorParams)> {
        if target.is_empty() {
            return Err(Error::InvalidInput("empty target".into()));
        }
        let ids = Self::teacher_forced_ids(x, target);
        self.check_len(ids.len())?;
        let fwd = self.forward(&ids, x.len() - 1);
        let parts = LossParts {
            lm: lm_loss_from_probs(fwd.probs.view(), target),
            ca: ca_loss_from_probs(fwd.probs.view(), negatives),
        };

        // dL/dlogits for the predicted rows.
        let mut dlogits = Array2::zeros(fwd.probs.dim());
        if objective != Objective::Ca {
            dlogits.assign(&fwd.probs);
            for (i, &y) in target.iter().enumerate() {
                dlogits[[i, y]] -= 1.0;
            }
        }
        if objective != Objective::Lm && !negatives.is_empty() {
            for (i, prow) in fwd.probs.rows().into_iter().enumerate() {
                let mut total = 0.0;
                for &t in negatives {
                    let q = 1.0 - prow[t];
                    if q > CA_CLAMP {
                        let ratio = prow[t] / q;
                        total += ratio;
                        dlogits[[i, t]] += ratio;
                    }
                }
                for j in 0..prow.len() {
                    dlogits[[i, j]] -= prow[j] * total;
                }
            }
        }
        Ok((parts, self.backward(&ids, &fwd, &dlogits)))
    }

    fn backward(&self, ids: &[usize], fwd: &Forward, dlogits: &Array2<f64>) -> GeneratorParams {
        let p = &self.params;
        let mut grad = GeneratorParams::zeros(self.arch);
        let t = ids.len();
        let d = self.arch.d_model;

        let h2_tail = fwd.h2.slice(s![fwd.from.., ..]);
        grad.w_out = h2_tail.t().dot(dlogits);
        let mut dh2 = Array2::<f64>::zeros((t, d));
        dh2.slice_mut(s![fwd.from.., ..]).assign(&dlogits.dot(&p.w_out.t()));

        // Feed-forward with residual.
        grad.w2 = fwd.g.t().dot(&dh2);
        grad.b2 = dh2.sum_axis(Axis(0));
        let dg = dh2.dot(&p.w2.t());
        let mut du = dg;
        du.zip_mut_with(&fwd.u, |g, &u| *g *= gelu_grad(u));
        grad.w1 = fwd.h1.t().dot(&du);
        grad.b1 = du.sum_axis(Axis(0));
        let dh1 = &dh2 + &du.dot(&p.w1.t());

        // Attention with residual.
        grad.wo = fwd.ctx.t().dot(&dh1);
        let dctx = dh1.dot(&p.wo.t());
        let da = dctx.dot(&fwd.v.t());
        let dv = fwd.attn.t().dot(&dctx);
        let scale = 1.0 / (d as f64).sqrt();
        let mut ds = Array2::<f64>::zeros((t, t));
        for i in 0..t {
            let a = fwd.attn.row(i);
            let g = da.row(i);
            let dot: f64 = (0..=i).map(|j| a[j] * g[j]).sum();
            for j in 0..=i {
                ds[[i, j]] = a[j] * (g[j] - dot) * scale;
            }
        }
        let dq = ds.dot(&fwd.k);
        let dk = ds.t().dot(&fwd.q);
        grad.wq = fwd.x.t().dot(&dq);
        grad.wk = fwd.x.t().dot(&dk);
        grad.wv = fwd.x.t().dot(&dv);
        let dx = &dh1 + &dq.dot(&p.wq.t()) + &dk.dot(&p.wk.t()) + &dv.dot(&p.wv.t());

        for (i, &id) in ids.iter().enumerate() {
            let row = dx.row(i);
            let mut e = grad.tok_emb.row_mut(id);
            e += &row;
            let mut pe = grad.pos_emb.row_mut(i);
            pe += &row;
        }
        grad
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = GeneratorFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            architecture: self.arch,
            vocabulary: self.vocab.tokens().to_vec(),
            params: PARAM_NAMES
                .iter()
                .zip(self.params.groups())
                .map(|(name, g)| (name.to_string(), g.to_vec()))
                .collect(),
        };
        jsonl::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: GeneratorFile = jsonl::read_json(path)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::Version {
                kind: "generator model",
                found: file.version,
                expected: MODEL_VERSION,
            });
        }
        let vocab = Vocabulary::from_tokens(file.vocabulary)?;
        let mut params = GeneratorParams::zeros(file.architecture);
        if file.params.len() != PARAM_NAMES.len() {
            return Err(Error::InvalidInput("generator file has the wrong parameter groups".into()));
        }
        for ((group, name), (stored_name, values)) in params.groups_mut().into_iter().zip(PARAM_NAMES).zip(&file.params) {
            if stored_name != name || values.len() != group.len() {
                return Err(Error::InvalidInput(format!("bad generator parameter group {stored_name}")));
            }
            group.copy_from_slice(values);
        }
        GeneratorModel::from_params(vocab, file.architecture, params)
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorFile {
    format: String,
    version: u32,
    architecture: Architecture,
    vocabulary: Vec<String>,
    params: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Lm,
    Ca,
    /// `L_LM + L_CA`.
    Total,
}

impl Objective {
    pub fn for_training(ca_enabled: bool) -> Self {
        if ca_enabled {
            Objective::Total
        } else {
            Objective::Lm
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub lm: f64,
    pub ca: f64,
}

impl LossParts {
    pub fn total(&self, ca_enabled: bool) -> f64 {
        if ca_enabled {
            self.lm + self.ca
        } else {
            self.lm
        }
    }
}

/// `−Σ_i log p_i(y_i)` where row `i` of `probs` predicts `targets[i]`.
pub fn lm_loss_from_probs(probs: ArrayView2<f64>, targets: &[usize]) -> f64 {
    targets
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].ln())
        .sum()
}

/// `−Σ_i Σ_{t∈N} log(max(1 − p_i(t), 1e-12))`.
pub fn ca_loss_from_probs(probs: ArrayView2<f64>, negatives: &[usize]) -> f64 {
    let mut loss = 0.0;
    for row in probs.rows() {
        for &t in negatives {
            loss -= (1.0 - row[t]).max(CA_CLAMP).ln();
        }
    }
    loss
}

/// `p(· | prefix; X)` for the next position.
pub fn next_token_dist(model: &GeneratorModel, x: &ConditioningInput, prefix: &[usize]) -> Result<Array1<f64>> {
    let mut ids = x.ids.clone();
    ids.extend_from_slice(prefix);
    model.check_len(ids.len())?;
    let fwd = model.forward(&ids, ids.len() - 1);
    Ok(fwd.probs.row(0).to_owned())
}

/// Teacher-forced NLL of `reference` followed by `<eos>`.
pub fn lm_loss(model: &GeneratorModel, x: &ConditioningInput, reference: &TokenSequence) -> Result<f64> {
    let y = model.target_ids(reference);
    Ok(lm_loss_from_probs(model.teacher_forced_dists(x, &y)?.view(), &y))
}

pub fn ca_loss(
    model: &GeneratorModel,
    x: &ConditioningInput,
    reference: &TokenSequence,
    prototypes: &[TokenSequence],
) -> Result<f64> {
    let y = model.target_ids(reference);
    let negatives = model.negative_ids(prototypes, &y);
    if negatives.is_empty() {
        return Ok(0.0);
    }
    Ok(ca_loss_from_probs(model.teacher_forced_dists(x, &y)?.view(), &negatives))
}

pub fn total_loss(
    model: &GeneratorModel,
    x: &ConditioningInput,
    reference: &TokenSequence,
    prototypes: &[TokenSequence],
    ca_enabled: bool,
) -> Result<f64> {
    let y = model.target_ids(reference);
    let negatives = model.negative_ids(prototypes, &y);
    let probs = model.teacher_forced_dists(x, &y)?;
    let parts = LossParts {
        lm: lm_loss_from_probs(probs.view(), &y),
        ca: ca_loss_from_probs(probs.view(), &negatives),
    };
    Ok(parts.total(ca_enabled))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub d_model: usize,
    pub max_len: usize,
    pub max_decode_len: usize,
    pub ca_enabled: bool,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            learning_rate: 3e-3,
            epochs: 20,
            seed: 0,
            d_model: 64,
            max_len: 256,
            max_decode_len: 64,
            ca_enabled: true,
        }
    }
}

impl GeneratorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("generator learning rate must be positive".into()));
        }
        if self.d_model == 0 || self.max_len == 0 {
            return Err(Error::InvalidConfig("generator dimensions must be positive".into()));
        }
        if self.max_decode_len >= self.max_len {
            return Err(Error::InvalidConfig("max decode length must be below the context length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub x: ConditioningInput,
    pub target: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Conditioning input, targets and negative ids for one record, sized to fit the context.
pub fn prepare_record(model: &GeneratorModel, record: &AugmentedRecord) -> Result<PreparedRecord> {
    let target = model.target_ids(&tokenize(&record.reference));
    let budget = (model.arch.max_len + 1).saturating_sub(target.len());
    let prototypes = record.prototype_tokens();
    let x = model.conditioning(&record.table, &prototypes, budget)?;
    let negatives = model.negative_ids(&prototypes, &target);
    Ok(PreparedRecord { x, target, negatives })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLog {
    pub epoch_losses: Vec<f64>,
    pub skipped: usize,
}

/// Trains with one Adam step per record; record order is reshuffled each epoch from the seed.
pub fn train_generator(
    vocab: Vocabulary,
    dataset: &[AugmentedRecord],
    config: &GeneratorTrainConfig,
) -> Result<(GeneratorModel, GeneratorLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("generator training set is empty".into()));
    }
    let mut model = GeneratorModel::init(vocab, config.d_model, config.max_len, config.seed)?;
    let mut log = GeneratorLog::default();
    let mut prepared = Vec::with_capacity(dataset.len());
    for record in dataset {
        match prepare_record(&model, record) {
            Ok(p) => prepared.push(p),
            Err(e @ Error::InputTooLong { .. }) => {
                warn!("skipping record {}: {e}", record.table_id);
                log.skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let sizes: Vec<usize> = model.params.groups().iter().map(|g| g.len()).collect();
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let p = &prepared[i];
            let objective = Objective::for_training(config.ca_enabled);
            let (parts, grad) = model.loss_and_grad(&p.x, &p.target, &p.negatives, objective)?;
            total += parts.total(config.ca_enabled);
            adam.step(model.params.groups_mut(), grad.groups());
        }
        let mean = if prepared.is_empty() { 0.0 } else { total / prepared.len() as f64 };
        debug!("generator epoch {epoch}: mean loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    if let (Some(first), Some(last)) = (log.epoch_losses.first(), log.epoch_losses.last()) {
        info!("generator trained: loss {first:.3} -> {last:.3} over {} epochs", config.epochs);
    }
    Ok((model, log))
}

/// Greedy decoding; ties go to the lowest vocabulary index. `<eos>` is not emitted.
pub fn decode_greedy(model: &GeneratorModel, x: &ConditioningInput, max_len: usize) -> Result<TokenSequence> {
    if x.len() + max_len > model.arch.max_len {
        return Err(Error::InputTooLong { len: x.len() + max_len, max: model.arch.max_len });
    }
    let eos = model.vocab.id(EOS);
    let mut prefix = Vec::new();
    let mut out = Vec::new();
    while out.len() < max_len {
        let dist = next_token_dist(model, x, &prefix)?;
        let mut best = 0;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        if best == eos {
            break;
        }
        prefix.push(best);
        out.push(model.vocab.token(best).to_string());
    }
    Ok(TokenSequence::from_vec_unchecked(out))
}

/// Decodes one record's table and prototypes, reserving room for `max_decode_len` tokens.
pub fn generate(model: &GeneratorModel, table: &Table, prototypes: &[TokenSequence], max_decode_len: usize) -> Result<TokenSequence> {
    let budget = model.arch.max_len.saturating_sub(max_decode_len);
    let x = model.conditioning(table, prototypes, budget)?;
    decode_greedy(model, &x, max_decode_len)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::tabledata::UNK;

    fn vocab() -> Vocabulary {
        Vocabulary::build([&TokenSequence::from_words(&["name", "the", "absence", "band", "metal", "from", "tampa", "x", "y"])])
    }

    fn table() -> Table {
        Table::from_pairs(&[("Name", "The Absence")]).unwrap()
    }

    #[test]
    fn conditioning_without_prototypes() {
        let v = vocab();
        let x = build_conditioning(&v, &table(), &[], 64).unwrap();
        let toks: Vec<&str> = x.ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(toks, [BOS, "name", ":", "the", "absence"]);
        assert_eq!(x.table_end, 5);
        assert!(x.prototype_spans.is_empty());
    }

    #[test]
    fn conditioning_with_two_prototypes() {
        let v = vocab();
        let protos = [TokenSequence::from_words(&["metal", "band"]), TokenSequence::from_words(&["from", "tampa"])];
        let x = build_conditioning(&v, &table(), &protos, 64).unwrap();
        assert_eq!(x.ids.iter().filter(|&&i| i == v.id(SEP)).count(), 2);
        let toks: Vec<&str> = x.ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(toks, [BOS, "name", ":", "the", "absence", SEP, "metal", "band", SEP, "from", "tampa"]);
        assert_eq!(x.prototype_spans, [(6, 8), (9, 11)]);
        let unknown = build_conditioning(&v, &table(), &[TokenSequence::from_words(&["zzz"])], 64).unwrap();
        assert_eq!(*unknown.ids.last().unwrap(), v.id(UNK));
    }

    #[test]
    fn conditioning_truncates_prototypes_not_table() {
        let v = vocab();
        let protos = [TokenSequence::from_words(&["metal", "band", "from"]), TokenSequence::from_words(&["x", "y", "x", "y"])];
        let x = build_conditioning(&v, &table(), &protos, 11).unwrap();
        assert_eq!(x.len(), 11);
        assert_eq!(&x.ids[..5], &build_conditioning(&v, &table(), &[], 64).unwrap().ids[..]);
        assert_eq!(x.prototype_spans, [(6, 9), (10, 11)]);
        assert!(matches!(build_conditioning(&v, &table(), &protos, 4), Err(Error::InputTooLong { len: 5, max: 4 })));
    }

    fn zero_output_model() -> GeneratorModel {
        let mut m = GeneratorModel::init(vocab(), 8, 32, 1).unwrap();
        m.params.w_out.fill(0.0);
        m
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let m = zero_output_model();
        let x = m.conditioning(&table(), &[], 32).unwrap();
        let dist = next_token_dist(&m, &x, &[3, 4]).unwrap();
        let v = m.vocab().len() as f64;
        assert!(dist.iter().all(|&p| (p - 1.0 / v).abs() < 1e-15));
        let reference = TokenSequence::from_words(&["the", "band"]);
        let loss = lm_loss(&m, &x, &reference).unwrap();
        assert!((loss - 3.0 * v.ln()).abs() < 1e-12);
    }

    #[test]
    fn distributions_are_valid() {
        let m = GeneratorModel::init(vocab(), 8, 32, 9).unwrap();
        let x = m.conditioning(&table(), &[TokenSequence::from_words(&["metal"])], 32).unwrap();
        for prefix in [vec![], vec![6], vec![6, 7, 8]] {
            let d = next_token_dist(&m, &x, &prefix).unwrap();
            assert!((d.sum() - 1.0).abs() < 1e-9);
            assert!(d.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn length_overflow_is_reported() {
        let m = GeneratorModel::init(vocab(), 4, 8, 0).unwrap();
        let x = m.conditioning(&table(), &[], 8).unwrap();
        assert!(matches!(next_token_dist(&m, &x, &[1, 2, 3, 4]), Err(Error::InputTooLong { len: 9, max: 8 })));
        assert!(matches!(decode_greedy(&m, &x, 4), Err(Error::InputTooLong { .. })));
    }

    #[test]
    fn probability_level_hand_values() {
        let uniform = Array2::from_elem((2, 3), 1.0 / 3.0);
        let lm = lm_loss_from_probs(uniform.view(), &[0, 1]);
        assert!((lm - (-2.0 * (1.0f64 / 3.0).ln())).abs() < 1e-12);
        assert!((lm - 2.197225).abs() < 1e-6);
        let ca = ca_loss_from_probs(uniform.view(), &[2]);
        assert!((ca - (-2.0 * (2.0f64 / 3.0).ln())).abs() < 1e-12);
        assert!((ca - 0.810930).abs() < 1e-6);
        assert!((lm + ca - 3.008155).abs() < 1e-6);
        assert_eq!(ca_loss_from_probs(uniform.view(), &[]), 0.0);
    }

    #[test]
    fn confident_model_has_near_zero_lm_loss() {
        for eps in [1e-2, 1e-4, 1e-8] {
            let probs = array![[1.0 - eps, eps / 2.0, eps / 2.0], [eps / 2.0, 1.0 - eps, eps / 2.0]];
            let loss = lm_loss_from_probs(probs.view(), &[0, 1]);
            assert!(loss < 3.0 * eps);
        }
    }

    #[test]
    fn saturated_negative_is_clamped() {
        let probs = array![[0.0, 1.0]];
        assert!((ca_loss_from_probs(probs.view(), &[1]) + CA_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn lowering_a_negative_logit_lowers_ca() {
        let softmax = |z: [f64; 4]| {
            let mut a = Array2::from_shape_vec((1, 4), z.to_vec()).unwrap();
            softmax_rows(&mut a);
            a
        };
        let before = ca_loss_from_probs(softmax([0.1, 1.5, -0.3, 0.7]).view(), &[1, 3]);
        let after = ca_loss_from_probs(softmax([0.1, 1.0, -0.3, 0.7]).view(), &[1, 3]);
        assert!(after < before);
    }

    #[test]
    fn negative_set_rules() {
        let m = zero_output_model();
        let reference = TokenSequence::from_words(&["the", "band"]);
        let y = m.target_ids(&reference);
        let covered = [TokenSequence::from_words(&["band", "the"])];
        assert!(m.negative_ids(&covered, &y).is_empty());
        let protos = [TokenSequence::from_words(&["the", "metal", "zzz"]), TokenSequence::from_words(&["metal", "tampa"])];
        let neg: Vec<&str> = m.negative_ids(&protos, &y).iter().map(|&i| m.vocab().token(i)).collect();
        assert_eq!(neg, ["metal", "tampa"]);
        let x = m.conditioning(&table(), &covered, 32).unwrap();
        assert_eq!(ca_loss(&m, &x, &reference, &covered).unwrap(), 0.0);
        assert_eq!(ca_loss(&m, &x, &reference, &[]).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_decomposes() {
        let m = GeneratorModel::init(vocab(), 8, 32, 4).unwrap();
        let reference = TokenSequence::from_words(&["the", "absence", "band"]);
        let protos = [TokenSequence::from_words(&["metal", "band", "from", "tampa"])];
        let x = m.conditioning(&table(), &protos, 32).unwrap();
        let lm = lm_loss(&m, &x, &reference).unwrap();
        let ca = ca_loss(&m, &x, &reference, &protos).unwrap();
        let total = total_loss(&m, &x, &reference, &protos, true).unwrap();
        assert!(ca > 0.0);
        assert!((total - lm - ca).abs() < 1e-12);
        assert!(total >= lm);
        assert_eq!(total_loss(&m, &x, &reference, &protos, false).unwrap(), lm);
    }

    #[test]
    fn causal_masking() {
        let m = GeneratorModel::init(vocab(), 8, 32, 2).unwrap();
        let x = m.conditioning(&table(), &[], 32).unwrap();
        let a = m.teacher_forced_dists(&x, &[6, 7, 8, 9]).unwrap();
        let b = m.teacher_forced_dists(&x, &[6, 7, 8, 12]).unwrap();
        let c = m.teacher_forced_dists(&x, &[6, 7, 11, 12]).unwrap();
        // Targets only feed positions after themselves.
        for i in 0..4 {
            for j in 0..a.ncols() {
                assert!((a[[i, j]] - b[[i, j]]).abs() < 1e-12);
            }
        }
        for i in 0..3 {
            for j in 0..a.ncols() {
                assert!((a[[i, j]] - c[[i, j]]).abs() < 1e-12);
            }
        }
        assert!((0..a.ncols()).any(|j| (a[[3, j]] - c[[3, j]]).abs() > 1e-9));
    }

    #[test]
    fn greedy_stops_at_eos() {
        let mut m = zero_output_model();
        let eos = m.vocab().id(EOS);
        m.params.b2.fill(0.0);
        // A huge <eos> column with a constant-sign hidden state makes <eos> the argmax.
        m.params.w_out.column_mut(eos).fill(1e3);
        let x = m.conditioning(&table(), &[], 16).unwrap();
        let h = m.forward(&x.ids, x.len() - 1).h2.row(x.len() - 1).sum();
        if h < 0.0 {
            m.params.w_out.column_mut(eos).fill(-1e3);
        }
        assert!(decode_greedy(&m, &x, 8).unwrap().is_empty());
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let m = GeneratorModel::init(vocab(), 8, 40, 6).unwrap();
        let x = m.conditioning(&table(), &[TokenSequence::from_words(&["metal", "band"])], 24).unwrap();
        let a = decode_greedy(&m, &x, 16).unwrap();
        assert_eq!(a, decode_greedy(&m, &x, 16).unwrap());
        assert!(a.len() <= 16);
        assert!(decode_greedy(&m, &x, 3).unwrap().len() <= 3);
    }

    fn tiny_dataset() -> Vec<AugmentedRecord> {
        let rows = [
            ("The Absence", "metal", "The Absence is a metal band.", "Another metal band from Tampa."),
            ("X", "pop", "X is a pop band.", "Y is a pop band from Tampa."),
        ];
        rows.iter()
            .enumerate()
            .map(|(i, (name, genre, reference, proto))| AugmentedRecord {
                table_id: i as u64,
                table: Table::from_pairs(&[("Name", *name), ("Genre", *genre)]).unwrap(),
                prototype_ids: vec![100 + i as u64],
                prototypes: vec![proto.to_string()],
                reference: reference.to_string(),
            })
            .collect()
    }

    fn small_config(epochs: usize) -> GeneratorTrainConfig {
        GeneratorTrainConfig { epochs, d_model: 8, max_len: 48, max_decode_len: 12, seed: 3, ..Default::default() }
    }

    fn dataset_vocab(data: &[AugmentedRecord]) -> Vocabulary {
        let mut seqs = Vec::new();
        for r in data {
            seqs.push(linearize_table(&r.table));
            seqs.push(tokenize(&r.reference));
            seqs.extend(r.prototype_tokens());
        }
        Vocabulary::build(&seqs)
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = tiny_dataset();
        let (m, log) = train_generator(dataset_vocab(&data), &data, &small_config(0)).unwrap();
        assert_eq!(m, GeneratorModel::init(dataset_vocab(&data), 8, 48, 3).unwrap());
        assert!(log.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_fits() {
        let data = tiny_dataset();
        let (a, log) = train_generator(dataset_vocab(&data), &data, &small_config(60)).unwrap();
        let (b, _) = train_generator(dataset_vocab(&data), &data, &small_config(60)).unwrap();
        assert_eq!(a, b);
        assert!(log.epoch_losses.last().unwrap() < &(log.epoch_losses[0] * 0.5));
        let out = generate(&a, &data[0].table, &data[0].prototype_tokens(), 12).unwrap();
        assert_eq!(out.to_string(), "the absence is a metal band");
    }

    #[test]
    fn overlong_records_are_skipped() {
        let mut data = tiny_dataset();
        data[1].table = Table::from_pairs(&[("Name", "a b c d e f g h i j k l m n o p q r s t u v w x y z")]).unwrap();
        let config = GeneratorTrainConfig { max_len: 24, max_decode_len: 8, ..small_config(1) };
        let (_, log) = train_generator(dataset_vocab(&data), &data, &config).unwrap();
        assert_eq!(log.skipped, 1);
        assert!(train_generator(dataset_vocab(&data), &[], &config).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let data = tiny_dataset();
        let (m, _) = train_generator(dataset_vocab(&data), &data, &small_config(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("generator.json");
        m.save(&path).unwrap();
        let back = GeneratorModel::load(&path).unwrap();
        assert_eq!(back, m);
        let x = m.conditioning(&data[0].table, &data[0].prototype_tokens(), 30).unwrap();
        let reference = tokenize(&data[0].reference);
        assert_eq!(
            total_loss(&back, &x, &reference, &data[0].prototype_tokens(), true).unwrap().to_bits(),
            total_loss(&m, &x, &reference, &data[0].prototype_tokens(), true).unwrap().to_bits()
        );
    }
}
