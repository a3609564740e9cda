//! Lexical retrieval: tokenization, an inverted index over the corpus, Okapi
//! BM25 scoring, top-m candidate retrieval and reference-leakage filtering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::tabledata::{is_reserved, linearize_table, Corpus, Table, TokenSequence};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

const INDEX_FORMAT: &str = "tabproto-index";
const INDEX_VERSION: u32 = 1;

/// Literal reserved tokens in raw text and the tokens they are escaped to.
const ESCAPES: [(&str, &str); 6] = [
    (":", "_colon_"),
    ("|", "_bar_"),
    ("<sep>", "_sep_"),
    ("<bos>", "_bos_"),
    ("<eos>", "_eos_"),
    ("<unk>", "_unk_"),
];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'..='\u{201F}' | '\u{2010}'..='\u{2015}' | '\u{2026}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{00A1}'
        )
}

/// Lowercases, splits on Unicode whitespace and trims punctuation from both
/// ends of every piece. Internal punctuation (hyphens, apostrophes) is kept.
pub fn tokenize(text: &str) -> TokenSequence {
    let lower = text.to_lowercase();
    let tokens = lower
        .split_whitespace()
        .filter_map(|piece| {
            if let Some((_, esc)) = ESCAPES.iter().find(|(raw, _)| *raw == piece) {
                return Some(esc.to_string());
            }
            let trimmed = piece.trim_matches(is_punct);
            (!trimmed.is_empty()).then(|| trimmed.to_string())
        })
        .collect();
    TokenSequence::from_vec_unchecked(tokens)
}

/// Unique tokens in first-occurrence order, without reserved tokens.
pub fn query_terms(tokens: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    tokens
        .iter()
        .filter(|t| !is_reserved(t) && seen.insert(t.as_str()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u64,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_lengths: BTreeMap<u64, u32>,
    doc_count: usize,
    avgdl: f64,
}

impl InvertedIndex {
    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn doc_length(&self, doc: u64) -> Option<u32> {
        self.doc_lengths.get(&doc).copied()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.doc_lengths.keys().copied()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    fn term_frequency(&self, term: &str, doc: u64) -> u32 {
        let list = self.postings(term);
        list.binary_search_by_key(&doc, |p| p.doc)
            .map_or(0, |i| list[i].tf)
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.postings(term).len() as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_score(&self, idf: f64, tf: u32, doc_len: u32) -> f64 {
        let tf = f64::from(tf);
        let norm = 1.0 - BM25_B + BM25_B * f64::from(doc_len) / self.avgdl;
        idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, &IndexFile::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: IndexFile = jsonl::read_json(path)?;
        if file.format != INDEX_FORMAT || file.version != INDEX_VERSION {
            return Err(Error::Version {
                kind: "index",
                found: file.version,
                expected: INDEX_VERSION,
            });
        }
        Ok(InvertedIndex {
            postings: file.postings,
            doc_lengths: file.doc_lengths.into_iter().collect(),
            doc_count: file.doc_count,
            avgdl: file.avgdl,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    doc_count: usize,
    avgdl: f64,
    doc_lengths: Vec<(u64, u32)>,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl From<&InvertedIndex> for IndexFile {
    fn from(index: &InvertedIndex) -> Self {
        IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            doc_count: index.doc_count,
            avgdl: index.avgdl,
            doc_lengths: index.doc_lengths.iter().map(|(&d, &l)| (d, l)).collect(),
            postings: index.postings.clone(),
        }
    }
}

pub fn build_index(corpus: &Corpus) -> InvertedIndex {
    let mut sentences: Vec<_> = corpus.sentences().iter().collect();
    sentences.sort_by_key(|s| s.id);

    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut doc_lengths = BTreeMap::new();
    let mut total: u64 = 0;
    for s in sentences {
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for t in s.tokens.iter() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        for (term, tf) in counts {
            postings
                .entry(term.to_string())
                .or_default()
                .push(Posting { doc: s.id, tf });
        }
        let len = s.tokens.len() as u32;
        doc_lengths.insert(s.id, len);
        total += u64::from(len);
    }
    let doc_count = doc_lengths.len();
    let avgdl = if doc_count == 0 {
        0.0
    } else {
        total as f64 / doc_count as f64
    };
    InvertedIndex {
        postings,
        doc_lengths,
        doc_count,
        avgdl,
    }
}

/// Okapi BM25 of `doc` for the unique terms of `query`.
pub fn bm25_score(index: &InvertedIndex, query: &[String], doc: u64) -> Result<f64> {
    let doc_len = index.doc_length(doc).ok_or(Error::UnknownDocument(doc))?;
    let mut seen = HashSet::new();
    let mut score = 0.0;
    for term in query {
        if !seen.insert(term.as_str()) {
            continue;
        }
        let tf = index.term_frequency(term, doc);
        if tf > 0 {
            score += index.term_score(index.idf(term), tf, doc_len);
        }
    }
    Ok(score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub sentence_id: u64,
    pub score: f64,
}

/// Retrieved sentences for one table, by descending score then ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub table_id: u64,
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|c| c.sentence_id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Orders by descending score, breaking ties by ascending id.
pub(crate) fn rank_order(a: (f64, u64), b: (f64, u64)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Scores every document sharing a term with the query and keeps the top `m`.
pub fn retrieve_tokens(index: &InvertedIndex, query: &[String], table_id: u64, m: usize) -> CandidateSet {
    let terms = query_terms(query);
    let mut scores: HashMap<u64, f64> = HashMap::new();
    for term in &terms {
        let idf = index.idf(term);
        for p in index.postings(term) {
            let len = index.doc_lengths[&p.doc];
            *scores.entry(p.doc).or_insert(0.0) += index.term_score(idf, p.tf, len);
        }
    }
    let mut entries: Vec<Candidate> = scores
        .into_iter()
        .filter(|&(_, s)| s > 0.0)
        .map(|(sentence_id, score)| Candidate { sentence_id, score })
        .collect();
    entries.sort_by(|a, b| rank_order((a.score, a.sentence_id), (b.score, b.sentence_id)));
    entries.truncate(m);
    CandidateSet { table_id, entries }
}

pub fn retrieve(index: &InvertedIndex, table: &Table, table_id: u64, m: usize) -> Result<CandidateSet> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be at least 1".into()));
    }
    Ok(retrieve_tokens(index, &linearize_table(table), table_id, m))
}

/// Drops every candidate whose tokens equal the reference's tokens.
pub fn filter_leakage(candidates: &CandidateSet, corpus: &Corpus, reference: &str) -> Result<CandidateSet> {
    let reference = tokenize(reference);
    let mut entries = Vec::with_capacity(candidates.entries.len());
    for c in &candidates.entries {
        if corpus.sentence(c.sentence_id)?.tokens != reference {
            entries.push(*c);
        }
    }
    Ok(CandidateSet {
        table_id: candidates.table_id,
        entries,
    })
}

pub fn write_candidates(path: &Path, sets: &[CandidateSet]) -> Result<()> {
    jsonl::write(path, sets)
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateSet>> {
    jsonl::read(path)
}
