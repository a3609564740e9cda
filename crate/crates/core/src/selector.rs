//! The prototype selector: a pairwise table-sentence scorer trained with a
//! margin-ranking objective against negatives sampled from the retrieved
//! candidates, and the top-n prototype selection built on it.
//!
//! The scorer mean-pools learned token embeddings over
//! `[linearize(table); <sep>; sentence]` and applies a linear projection:
//! `f(T, r) = w · mean(E[tokens]) + b`. Any other encoder can be used for
//! selection through the [`PairScorer`] trait.

use std::path::Path;

use log::{debug, info};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::optim::Adam;
use crate::retrieval::{filter_leakage, rank_order, retrieve, Candidate, CandidateSet, InvertedIndex};
use crate::tabledata::{linearize_table, Corpus, Example, Table, TokenSequence, Vocabulary, SEP};
use crate::tokenize;

/// Hinge margin of the ranking objective.
pub const MARGIN: f64 = 1.0;
const INIT_RANGE: f64 = 0.1;

const MODEL_FORMAT: &str = "tabproto-selector";
const MODEL_VERSION: u32 = 1;

/// Anything that scores a (table, sentence) pair; higher is more relevant.
pub trait PairScorer {
    fn score_pair(&self, table: &Table, sentence: &TokenSequence) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorModel {
    vocab: Vocabulary,
    dim: usize,
    /// `V × dim`, row-major.
    embeddings: Vec<f64>,
    projection: Vec<f64>,
    bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorGrad {
    pub embeddings: Vec<f64>,
    pub projection: Vec<f64>,
    pub bias: f64,
}

impl SelectorModel {
    /// Embeddings uniform in (-0.1, 0.1) from `seed`; zero projection and bias.
    pub fn init(vocab: Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("selector dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = (0..vocab.len() * dim)
            .map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        Ok(SelectorModel {
            vocab,
            dim,
            embeddings,
            projection: vec![0.0; dim],
            bias: 0.0,
        })
    }

    pub fn from_parts(
        vocab: Vocabulary,
        dim: usize,
        embeddings: Vec<f64>,
        projection: Vec<f64>,
        bias: f64,
    ) -> Result<Self> {
        if dim == 0 || embeddings.len() != vocab.len() * dim || projection.len() != dim {
            return Err(Error::InvalidInput("selector parameter shapes do not match".into()));
        }
        if !embeddings.iter().chain(&projection).chain([&bias]).all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("selector parameters must be finite".into()));
        }
        Ok(SelectorModel {
            vocab,
            dim,
            embeddings,
            projection,
            bias,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, token: &str) -> &[f64] {
        let i = self.vocab.id(token);
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embedding_mut(&mut self, token: &str) -> &mut [f64] {
        let i = self.vocab.id(token);
        &mut self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut [f64] {
        &mut self.projection
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn set_bias(&mut self, bias: f64) {
        self.bias = bias;
    }

    /// Flat view of every parameter: embeddings, projection, bias.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.embeddings,
            &mut self.projection,
            std::slice::from_mut(&mut self.bias),
        ]
    }

    fn pair_ids(&self, table: &[usize], sentence: &TokenSequence) -> Vec<usize> {
        let mut ids = Vec::with_capacity(table.len() + 1 + sentence.len());
        ids.extend_from_slice(table);
        ids.push(self.vocab.id(SEP));
        ids.extend(sentence.iter().map(|t| self.vocab.id(t)));
        ids
    }

    fn mean_embedding(&self, ids: &[usize]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        for &i in ids {
            for (acc, e) in h.iter_mut().zip(&self.embeddings[i * self.dim..(i + 1) * self.dim]) {
                *acc += e;
            }
        }
        let n = ids.len() as f64;
        h.iter_mut().for_each(|x| *x /= n);
        h
    }

    fn project(&self, h: &[f64]) -> f64 {
        self.projection.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn encode_pair(&self, table: &Table, sentence: &TokenSequence) -> Vec<f64> {
        let table_ids = self.vocab.encode(&linearize_table(table));
        self.mean_embedding(&self.pair_ids(&table_ids, sentence))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(
            path,
            &SelectorFile {
                format: MODEL_FORMAT.into(),
                version: MODEL_VERSION,
                dim: self.dim,
                vocabulary: self.vocab.tokens().to_vec(),
                embeddings: self.embeddings.clone(),
                projection: self.projection.clone(),
                bias: self.bias,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: SelectorFile = jsonl::read_json(path)?;
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(Error::Version {
                kind: "selector model",
                found: f.version,
                expected: MODEL_VERSION,
            });
        }
        SelectorModel::from_parts(Vocabulary::from_tokens(f.vocabulary)?, f.dim, f.embeddings, f.projection, f.bias)
    }
}

impl PairScorer for SelectorModel {
    fn score_pair(&self, table: &Table, sentence: &TokenSequence) -> f64 {
        score_pair(self, table, sentence)
    }
}

#[derive(Serialize, Deserialize)]
struct SelectorFile {
    format: String,
    version: u32,
    dim: usize,
    vocabulary: Vec<String>,
    embeddings: Vec<f64>,
    projection: Vec<f64>,
    bias: f64,
}

pub fn encode_pair(model: &SelectorModel, table: &Table, sentence: &TokenSequence) -> Vec<f64> {
    model.encode_pair(table, sentence)
}

pub fn score_pair(model: &SelectorModel, table: &Table, sentence: &TokenSequence) -> f64 {
    model.project(&model.encode_pair(table, sentence))
}

/// `Σ_j max{0, 1 − f(T, y) + f(T, R_j)}` over the given negatives.
pub fn margin_loss(
    model: &SelectorModel,
    table: &Table,
    reference: &TokenSequence,
    negatives: &[TokenSequence],
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::InvalidConfig("margin loss needs at least one negative".into()));
    }
    let positive = score_pair(model, table, reference);
    Ok(negatives
        .iter()
        .map(|r| (MARGIN - positive + score_pair(model, table, r)).max(0.0))
        .sum())
}

/// Loss value and its exact gradient. A hinge with slack exactly 0 contributes nothing.
pub fn margin_loss_grad(
    model: &SelectorModel,
    table: &Table,
    reference: &TokenSequence,
    negatives: &[TokenSequence],
) -> Result<(f64, SelectorGrad)> {
    if negatives.is_empty() {
        return Err(Error::InvalidConfig("margin loss needs at least one negative".into()));
    }
    let d = model.dim;
    let table_ids = model.vocab.encode(&linearize_table(table));
    let pos_ids = model.pair_ids(&table_ids, reference);
    let h_pos = model.mean_embedding(&pos_ids);
    let f_pos = model.project(&h_pos);

    let mut grad = SelectorGrad {
        embeddings: vec![0.0; model.embeddings.len()],
        projection: vec![0.0; d],
        bias: 0.0,
    };
    let mut loss = 0.0;
    let mut active = 0usize;
    for neg in negatives {
        let ids = model.pair_ids(&table_ids, neg);
        let h = model.mean_embedding(&ids);
        let slack = MARGIN - f_pos + model.project(&h);
        if slack <= 0.0 {
            continue;
        }
        loss += slack;
        active += 1;
        for k in 0..d {
            grad.projection[k] += h[k] - h_pos[k];
        }
        scatter(&mut grad.embeddings, &ids, &model.projection, 1.0);
    }
    if active > 0 {
        scatter(&mut grad.embeddings, &pos_ids, &model.projection, -(active as f64));
    }
    Ok((loss, grad))
}

/// Adds `scale · dh` back through the mean pooling: each position gets `dh / len`.
fn scatter(out: &mut [f64], ids: &[usize], dh: &[f64], scale: f64) {
    let d = dh.len();
    let w = scale / ids.len() as f64;
    for &i in ids {
        for (o, g) in out[i * d..(i + 1) * d].iter_mut().zip(dh) {
            *o += w * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorTrainConfig {
    /// Negatives sampled per example per epoch.
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub dim: usize,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        SelectorTrainConfig {
            k: 5,
            learning_rate: 1e-2,
            epochs: 20,
            seed: 0,
            dim: 32,
        }
    }
}

impl SelectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("selector learning rate must be positive".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("selector dimension must be positive".into()));
        }
        Ok(())
    }
}

/// One training instance: a table, its gold sentence and its filtered candidates.
#[derive(Debug, Clone)]
pub struct SelectorExample {
    pub id: u64,
    pub table: Table,
    pub reference: TokenSequence,
    pub candidates: CandidateSet,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-example loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains a selector whose vocabulary covers the corpus and the examples.
pub fn train_selector(
    examples: &[SelectorExample],
    corpus: &Corpus,
    config: &SelectorTrainConfig,
) -> Result<(SelectorModel, TrainLog)> {
    let mut seqs: Vec<TokenSequence> = corpus.sentences().iter().map(|s| s.tokens.clone()).collect();
    for ex in examples {
        seqs.push(linearize_table(&ex.table));
        seqs.push(ex.reference.clone());
    }
    train_selector_with_vocab(Vocabulary::build(&seqs), examples, corpus, config)
}

pub fn train_selector_with_vocab(
    vocab: Vocabulary,
    examples: &[SelectorExample],
    corpus: &Corpus,
    config: &SelectorTrainConfig,
) -> Result<(SelectorModel, TrainLog)> {
    config.validate()?;
    for ex in examples {
        if ex.candidates.len() < config.k {
            return Err(Error::InsufficientNegatives {
                example_id: ex.id,
                available: ex.candidates.len(),
                required: config.k,
            });
        }
    }
    let candidate_tokens: Vec<Vec<&TokenSequence>> = examples
        .iter()
        .map(|ex| {
            ex.candidates
                .entries
                .iter()
                .map(|c| corpus.sentence(c.sentence_id).map(|s| &s.tokens))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let mut model = SelectorModel::init(vocab, config.dim, config.seed)?;
    let sizes = [model.embeddings.len(), model.dim, 1];
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut total = 0.0;
        for (ex, pool) in examples.iter().zip(&candidate_tokens) {
            let negatives: Vec<TokenSequence> = sample(&mut rng, pool.len(), config.k)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect();
            let (loss, grad) = margin_loss_grad(&model, &ex.table, &ex.reference, &negatives)?;
            total += loss;
            adam.step(
                model.params_mut(),
                vec![&grad.embeddings, &grad.projection, std::slice::from_ref(&grad.bias)],
            );
        }
        let mean = if examples.is_empty() { 0.0 } else { total / examples.len() as f64 };
        debug!("selector epoch {epoch}: mean loss {mean:.6}");
        log.epoch_losses.push(mean);
    }
    if let (Some(first), Some(last)) = (log.epoch_losses.first(), log.epoch_losses.last()) {
        info!("selector trained: loss {first:.4} -> {last:.4} over {} epochs", config.epochs);
    }
    Ok((model, log))
}

/// Selected prototypes for one table, by descending selector score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub table_id: u64,
    pub entries: Vec<Candidate>,
}

impl PrototypeSet {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|c| c.sentence_id).collect()
    }
}

/// The size-n subset of candidates with the largest summed score.
///
/// The objective is additive, so this is the n individually best candidates.
pub fn select_top_n<S: PairScorer + ?Sized>(
    scorer: &S,
    table: &Table,
    candidates: &CandidateSet,
    corpus: &Corpus,
    n: usize,
) -> Result<PrototypeSet> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    let mut entries = candidates
        .entries
        .iter()
        .map(|c| {
            let s = corpus.sentence(c.sentence_id)?;
            Ok(Candidate {
                sentence_id: c.sentence_id,
                score: scorer.score_pair(table, &s.tokens),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| rank_order((a.score, a.sentence_id), (b.score, b.sentence_id)));
    entries.truncate(n);
    Ok(PrototypeSet {
        table_id: candidates.table_id,
        entries,
    })
}

/// The first n candidates in retrieval order, keeping their BM25 scores.
pub fn select_by_retrieval(candidates: &CandidateSet, n: usize) -> Result<PrototypeSet> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    Ok(PrototypeSet {
        table_id: candidates.table_id,
        entries: candidates.entries.iter().take(n).copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRecord {
    pub table_id: u64,
    pub table: Table,
    pub prototype_ids: Vec<u64>,
    pub prototypes: Vec<String>,
    pub reference: String,
}

impl AugmentedRecord {
    pub fn prototype_tokens(&self) -> Vec<TokenSequence> {
        self.prototypes.iter().map(|p| tokenize(p)).collect()
    }
}

pub type AugmentedDataset = Vec<AugmentedRecord>;

#[derive(Serialize, Deserialize)]
struct AugmentedLine {
    table_id: u64,
    prototype_ids: Vec<u64>,
    prototypes: Vec<String>,
    reference: String,
}

/// Retrieve, filter leakage, then pick prototypes with `choose`.
pub fn build_augmented_dataset_with<F>(
    examples: &[Example],
    index: &InvertedIndex,
    corpus: &Corpus,
    m: usize,
    mut choose: F,
) -> Result<AugmentedDataset>
where
    F: FnMut(&Example, &CandidateSet) -> Result<PrototypeSet>,
{
    examples
        .iter()
        .map(|ex| {
            let raw = retrieve(index, &ex.table, ex.id, m)?;
            let candidates = filter_leakage(&raw, corpus, &ex.reference)?;
            let chosen = if candidates.is_empty() {
                PrototypeSet { table_id: ex.id, entries: vec![] }
            } else {
                choose(ex, &candidates)?
            };
            augmented_record(ex, &chosen, corpus)
        })
        .collect()
}

pub fn build_augmented_dataset<S: PairScorer + ?Sized>(
    examples: &[Example],
    index: &InvertedIndex,
    corpus: &Corpus,
    scorer: &S,
    m: usize,
    n: usize,
) -> Result<AugmentedDataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    build_augmented_dataset_with(examples, index, corpus, m, |ex, c| {
        select_top_n(scorer, &ex.table, c, corpus, n)
    })
}

pub fn augmented_record(ex: &Example, chosen: &PrototypeSet, corpus: &Corpus) -> Result<AugmentedRecord> {
    let prototypes = chosen
        .entries
        .iter()
        .map(|c| corpus.sentence(c.sentence_id).map(|s| s.text.clone()))
        .collect::<Result<_>>()?;
    Ok(AugmentedRecord {
        table_id: ex.id,
        table: ex.table.clone(),
        prototype_ids: chosen.ids(),
        prototypes,
        reference: ex.reference.clone(),
    })
}

pub fn write_augmented(path: &Path, dataset: &[AugmentedRecord]) -> Result<()> {
    let lines: Vec<AugmentedLine> = dataset
        .iter()
        .map(|r| AugmentedLine {
            table_id: r.table_id,
            prototype_ids: r.prototype_ids.clone(),
            prototypes: r.prototypes.clone(),
            reference: r.reference.clone(),
        })
        .collect();
    jsonl::write(path, &lines)
}

/// Reads augmented records, joining each to its table by id.
pub fn read_augmented(path: &Path, tables: &[Example]) -> Result<AugmentedDataset> {
    let lines: Vec<AugmentedLine> = jsonl::read(path)?;
    let by_id: std::collections::HashMap<u64, &Example> = tables.iter().map(|e| (e.id, e)).collect();
    lines
        .into_iter()
        .map(|l| {
            let ex = by_id
                .get(&l.table_id)
                .ok_or_else(|| Error::InvalidInput(format!("augmented record for unknown table {}", l.table_id)))?;
            Ok(AugmentedRecord {
                table_id: l.table_id,
                table: ex.table.clone(),
                prototype_ids: l.prototype_ids,
                prototypes: l.prototypes,
                reference: l.reference,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::build_index;
    use crate::tabledata::{Sentence, UNK};

    fn toy_vocab() -> Vocabulary {
        Vocabulary::build([&TokenSequence::from_words(&["t", "a", "b", "c", "name", "zed"])])
    }

    fn toy_model(dim: usize) -> SelectorModel {
        SelectorModel::init(toy_vocab(), dim, 3).unwrap()
    }

    #[test]
    fn all_unknown_tokens_encode_to_unk_row() {
        let mut model = toy_model(3);
        model.embedding_mut(UNK).copy_from_slice(&[0.3, -0.2, 0.9]);
        model.embedding_mut(SEP).copy_from_slice(&[0.3, -0.2, 0.9]);
        model.embedding_mut(":").copy_from_slice(&[0.3, -0.2, 0.9]);
        let table = Table::from_pairs(&[("qqq", "rrr")]).unwrap();
        let h = model.encode_pair(&table, &TokenSequence::from_words(&["xx", "yy"]));
        for (a, b) in h.iter().zip([0.3, -0.2, 0.9]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_includes_separator_row() {
        // Positions: qqq->unk, ':', rrr->unk, <sep>, t.
        let mut model = toy_model(2);
        model.embedding_mut(UNK).copy_from_slice(&[0.0, 0.0]);
        model.embedding_mut(":").copy_from_slice(&[0.0, 0.0]);
        model.embedding_mut(SEP).copy_from_slice(&[2.0, 0.0]);
        model.embedding_mut("t").copy_from_slice(&[1.0, 2.0]);
        let table = Table::from_pairs(&[("qqq", "rrr")]).unwrap();
        let h = model.encode_pair(&table, &TokenSequence::from_words(&["t"]));
        assert!((h[0] - 0.6).abs() < 1e-15);
        assert!((h[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn encoding_ignores_sentence_token_order() {
        let model = toy_model(4);
        let table = Table::from_pairs(&[("name", "zed")]).unwrap();
        let a = model.encode_pair(&table, &TokenSequence::from_words(&["a", "b", "c", "a"]));
        let b = model.encode_pair(&table, &TokenSequence::from_words(&["c", "a", "a", "b"]));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn score_with_zero_projection_is_bias() {
        let mut model = toy_model(4);
        model.set_bias(0.7);
        let table = Table::from_pairs(&[("name", "zed")]).unwrap();
        for s in [&["a"][..], &["b", "c"], &[]] {
            assert_eq!(score_pair(&model, &table, &TokenSequence::from_words(s)), 0.7);
        }
    }

    #[test]
    fn score_is_linear_projection() {
        // Table and sentence tokens all share the row (1, -1), so h = (1, -1).
        let vocab = Vocabulary::build([&TokenSequence::from_words(&["a"])]);
        let v = vocab.len();
        let emb: Vec<f64> = (0..v).flat_map(|_| [1.0, -1.0]).collect();
        let model = SelectorModel::from_parts(vocab, 2, emb, vec![2.0, 3.0], 0.0).unwrap();
        let table = Table::from_pairs(&[("a", "a")]).unwrap();
        let s = TokenSequence::from_words(&["a"]);
        assert_eq!(score_pair(&model, &table, &s), -1.0);
        assert_eq!(
            score_pair(&model, &table, &s).to_bits(),
            score_pair(&model, &table, &s).to_bits()
        );
    }

    /// A model whose score for a sentence made of one token `x` is the value chosen for `x`.
    fn scripted(values: &[(&str, f64)]) -> (SelectorModel, Table) {
        let words: Vec<&str> = values.iter().map(|(w, _)| *w).collect();
        let vocab = Vocabulary::build([&TokenSequence::from_words(&words)]);
        let mut model = SelectorModel::from_parts(vocab.clone(), 1, vec![0.0; vocab.len()], vec![1.0], 0.0).unwrap();
        // Pair has 5 positions: unk ':' unk <sep> x, all zero but x.
        for (w, v) in values {
            model.embedding_mut(w)[0] = v * 5.0;
        }
        (model, Table::from_pairs(&[("qqq", "rrr")]).unwrap())
    }

    #[test]
    fn margin_loss_examples() {
        let (model, table) = scripted(&[("y", 2.0), ("n1", 0.5), ("n2", 1.5)]);
        let y = TokenSequence::from_words(&["y"]);
        let negs = [TokenSequence::from_words(&["n1"]), TokenSequence::from_words(&["n2"])];
        assert!((margin_loss(&model, &table, &y, &negs).unwrap() - 0.5).abs() < 1e-12);

        let (model, table) = scripted(&[("y", 3.0), ("n1", 0.5), ("n2", 2.0)]);
        assert_eq!(margin_loss(&model, &table, &y, &negs).unwrap(), 0.0);

        let (model, table) = scripted(&[("y", 0.5), ("n1", 0.7)]);
        let loss = margin_loss(&model, &table, &y, &negs[..1]).unwrap();
        assert!((loss - 1.2).abs() < 1e-12);

        assert!(matches!(margin_loss(&model, &table, &y, &[]), Err(Error::InvalidConfig(_))));
        assert!(margin_loss_grad(&model, &table, &y, &[]).is_err());
    }

    #[test]
    fn inactive_hinges_give_zero_gradient() {
        let (model, table) = scripted(&[("y", 3.0), ("n1", 0.5), ("n2", 2.0)]);
        let y = TokenSequence::from_words(&["y"]);
        let negs = [TokenSequence::from_words(&["n1"]), TokenSequence::from_words(&["n2"])];
        let (loss, g) = margin_loss_grad(&model, &table, &y, &negs).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.embeddings.iter().chain(&g.projection).all(|&x| x == 0.0));
        assert_eq!(g.bias, 0.0);
    }

    #[test]
    fn exact_zero_slack_uses_zero_subgradient() {
        let (model, table) = scripted(&[("y", 1.0), ("n1", 0.0)]);
        let y = TokenSequence::from_words(&["y"]);
        let (loss, g) = margin_loss_grad(&model, &table, &y, &[TokenSequence::from_words(&["n1"])]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.embeddings.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_active_hinge_has_zero_bias_gradient() {
        let (model, table) = scripted(&[("y", 0.5), ("n1", 0.7)]);
        let y = TokenSequence::from_words(&["y"]);
        let (loss, g) = margin_loss_grad(&model, &table, &y, &[TokenSequence::from_words(&["n1"])]).unwrap();
        assert!(loss > 0.0);
        assert_eq!(g.bias, 0.0);
        assert!(g.projection.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn top_n_by_score() {
        let corpus = Corpus::new(vec![Sentence::new(1, "r1"), Sentence::new(2, "r2"), Sentence::new(3, "r3")]).unwrap();
        let (model, table) = scripted(&[("r1", 0.9), ("r2", 0.1), ("r3", 0.5)]);
        let cands = CandidateSet {
            table_id: 4,
            entries: [1, 2, 3].map(|id| Candidate { sentence_id: id, score: 1.0 }).to_vec(),
        };
        let picked = select_top_n(&model, &table, &cands, &corpus, 2).unwrap();
        assert_eq!(picked.ids(), [1, 3]);
        assert_eq!(picked.table_id, 4);
        let all = select_top_n(&model, &table, &cands, &corpus, 10).unwrap();
        assert_eq!(all.ids(), [1, 3, 2]);
        assert!(select_top_n(&model, &table, &cands, &corpus, 0).is_err());
    }

    #[test]
    fn selection_ties_by_ascending_id() {
        let corpus = Corpus::new(vec![Sentence::new(8, "same"), Sentence::new(2, "same")]).unwrap();
        let (model, table) = scripted(&[("same", 0.4)]);
        let cands = CandidateSet {
            table_id: 0,
            entries: [8, 2].map(|id| Candidate { sentence_id: id, score: 1.0 }).to_vec(),
        };
        assert_eq!(select_top_n(&model, &table, &cands, &corpus, 2).unwrap().ids(), [2, 8]);
    }

    fn tiny_problem() -> (Corpus, Vec<SelectorExample>) {
        let texts = [
            "red apple pie recipe",
            "red car on the road",
            "apple orchard in autumn",
            "green apple tart",
            "red wine and apple",
            "apple red red apple",
            "the red fox",
        ];
        let corpus = Corpus::new(texts.iter().enumerate().map(|(i, t)| Sentence::new(i as u64, *t)).collect()).unwrap();
        let index = build_index(&corpus);
        let table = Table::from_pairs(&[("fruit", "red apple")]).unwrap();
        let candidates = retrieve(&index, &table, 0, 100).unwrap();
        let ex = SelectorExample {
            id: 0,
            table,
            reference: tokenize("a red apple is a fruit"),
            candidates,
        };
        (corpus, vec![ex])
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (corpus, examples) = tiny_problem();
        let config = SelectorTrainConfig { epochs: 0, seed: 11, dim: 4, ..Default::default() };
        let (model, log) = train_selector(&examples, &corpus, &config).unwrap();
        let init = SelectorModel::init(model.vocab().clone(), 4, 11).unwrap();
        assert_eq!(model, init);
        assert!(log.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_bit_deterministic_and_lowers_loss() {
        let (corpus, examples) = tiny_problem();
        let config = SelectorTrainConfig { epochs: 30, seed: 5, dim: 8, ..Default::default() };
        let (a, log_a) = train_selector(&examples, &corpus, &config).unwrap();
        let (b, log_b) = train_selector(&examples, &corpus, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert!(log_a.epoch_losses.last().unwrap() < log_a.epoch_losses.first().unwrap());
    }

    #[test]
    fn too_few_candidates_is_an_error() {
        let (corpus, mut examples) = tiny_problem();
        examples[0].candidates.entries.truncate(2);
        examples[0].id = 42;
        let err = train_selector(&examples, &corpus, &SelectorTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientNegatives { example_id: 42, available: 2, required: 5 }));
    }

    #[test]
    fn invalid_config_rejected() {
        let (corpus, examples) = tiny_problem();
        for config in [
            SelectorTrainConfig { k: 0, ..Default::default() },
            SelectorTrainConfig { learning_rate: 0.0, ..Default::default() },
            SelectorTrainConfig { dim: 0, ..Default::default() },
        ] {
            assert!(matches!(train_selector(&examples, &corpus, &config), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn model_file_round_trip() {
        let (corpus, examples) = tiny_problem();
        let config = SelectorTrainConfig { epochs: 3, dim: 5, ..Default::default() };
        let (model, _) = train_selector(&examples, &corpus, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("selector.json");
        model.save(&path).unwrap();
        let back = SelectorModel::load(&path).unwrap();
        assert_eq!(back, model);
        let s = tokenize("red apple pie");
        assert_eq!(
            score_pair(&back, &examples[0].table, &s).to_bits(),
            score_pair(&model, &examples[0].table, &s).to_bits()
        );
    }

    #[test]
    fn augmented_dataset_shape() {
        let (corpus, _) = tiny_problem();
        let index = build_index(&corpus);
        let examples = vec![
            Example {
                id: 1,
                table: Table::from_pairs(&[("fruit", "apple")]).unwrap(),
                reference: "green apple tart".into(),
            },
            Example {
                id: 2,
                table: Table::from_pairs(&[("animal", "walrus")]).unwrap(),
                reference: "a walrus".into(),
            },
        ];
        let (model, _) = train_selector(&tiny_problem().1, &corpus, &SelectorTrainConfig { epochs: 1, dim: 4, ..Default::default() }).unwrap();
        let data = build_augmented_dataset(&examples, &index, &corpus, &model, 100, 3).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0].prototypes.len(), 3);
        assert!(!data[0].prototype_ids.contains(&3), "leaked reference");
        assert!(data[1].prototypes.is_empty());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.jsonl");
        write_augmented(&path, &data).unwrap();
        assert_eq!(read_augmented(&path, &examples).unwrap(), data);
    }
}
