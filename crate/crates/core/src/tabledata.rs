//! Tables, labelled examples, the unlabelled sentence corpus, and the shared
//! token vocabulary.
//!
//! A table is linearized as `attr : value | attr : value`, where `:` and `|`
//! are reserved tokens that never come out of [`tokenize`](crate::tokenize)
//! on ordinary text.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::retrieval::tokenize;

pub const KEY_VALUE: &str = ":";
pub const PAIR_SEP: &str = "|";
pub const SEP: &str = "<sep>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Every reserved token, in vocabulary order.
pub const RESERVED: [&str; 6] = [UNK, BOS, EOS, SEP, KEY_VALUE, PAIR_SEP];

pub fn is_reserved(token: &str) -> bool {
    RESERVED.contains(&token)
}

/// Ordered lowercase tokens, none empty and none containing whitespace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if let Some(bad) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::InvalidInput(format!("malformed token {bad:?}")));
        }
        Ok(TokenSequence(tokens))
    }

    /// Builds a sequence from literal words. Panics on empty or whitespace tokens.
    pub fn from_words(words: &[&str]) -> Self {
        TokenSequence::new(words.iter().map(|w| w.to_string()).collect())
            .expect("well-formed tokens")
    }

    pub(crate) fn from_vec_unchecked(tokens: Vec<String>) -> Self {
        TokenSequence(tokens)
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn types(&self) -> BTreeSet<&str> {
        self.0.iter().map(String::as_str).collect()
    }
}

impl Deref for TokenSequence {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl std::fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeValuePair {
    attribute: String,
    value: String,
}

impl AttributeValuePair {
    pub fn new(attribute: impl Into<String>, value: impl Into<String>) -> Result<Self> {
        let attribute = attribute.into();
        let value = value.into();
        if attribute.trim().is_empty() || value.trim().is_empty() {
            return Err(Error::InvalidTable(format!(
                "empty attribute or value in pair ({attribute:?}, {value:?})"
            )));
        }
        Ok(AttributeValuePair { attribute, value })
    }

    pub fn attribute(&self) -> &str {
        &self.attribute
    }

    pub fn value(&self) -> &str {
        &self.value
    }
}

/// A non-empty, ordered list of attribute-value pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pairs: Vec<AttributeValuePair>,
}

impl Table {
    pub fn new(pairs: Vec<AttributeValuePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidTable("a table needs at least one pair".into()));
        }
        Ok(Table { pairs })
    }

    pub fn from_pairs<A: AsRef<str>, V: AsRef<str>>(pairs: &[(A, V)]) -> Result<Self> {
        let pairs = pairs
            .iter()
            .map(|(a, v)| AttributeValuePair::new(a.as_ref(), v.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Table::new(pairs)
    }

    pub fn pairs(&self) -> &[AttributeValuePair] {
        &self.pairs
    }
}

/// Serializes a table as `attr : value | attr : value`.
///
/// Accepts a raw pair slice so that the empty-table precondition is checked
/// here as well as at construction.
pub fn linearize_pairs(pairs: &[AttributeValuePair]) -> Result<TokenSequence> {
    if pairs.is_empty() {
        return Err(Error::InvalidTable("cannot linearize an empty table".into()));
    }
    let mut out = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        if i > 0 {
            out.push(PAIR_SEP.to_string());
        }
        out.extend(tokenize(&pair.attribute).into_inner());
        out.push(KEY_VALUE.to_string());
        out.extend(tokenize(&pair.value).into_inner());
    }
    Ok(TokenSequence(out))
}

pub fn linearize_table(table: &Table) -> TokenSequence {
    linearize_pairs(&table.pairs).expect("tables are non-empty by construction")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub table: Table,
    pub reference: String,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    id: u64,
    pairs: Vec<(String, String)>,
    reference: String,
}

impl From<&Example> for ExampleRecord {
    fn from(ex: &Example) -> Self {
        ExampleRecord {
            id: ex.id,
            pairs: ex
                .table
                .pairs
                .iter()
                .map(|p| (p.attribute.clone(), p.value.clone()))
                .collect(),
            reference: ex.reference.clone(),
        }
    }
}

/// Reads a tables file (JSONL `{id, pairs, reference}`), keeping file order.
pub fn parse_tables_file(path: &Path) -> Result<Vec<Example>> {
    let records: Vec<(usize, ExampleRecord)> = jsonl::read_numbered(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let table = Table::from_pairs(&rec.pairs).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id) {
            return Err(Error::DuplicateId(rec.id));
        }
        out.push(Example {
            id: rec.id,
            table,
            reference: rec.reference,
        });
    }
    Ok(out)
}

pub fn write_tables_file(path: &Path, examples: &[Example]) -> Result<()> {
    let records: Vec<ExampleRecord> = examples.iter().map(ExampleRecord::from).collect();
    jsonl::write(path, &records)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: u64,
    pub text: String,
    pub tokens: TokenSequence,
}

impl Sentence {
    pub fn new(id: u64, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Sentence { id, text, tokens }
    }
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    id: u64,
    text: String,
}

/// The unlabelled sentence pool, in file order, addressable by id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    sentences: Vec<Sentence>,
    by_id: HashMap<u64, usize>,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(sentences.len());
        for (i, s) in sentences.iter().enumerate() {
            if by_id.insert(s.id, i).is_some() {
                return Err(Error::DuplicateId(s.id));
            }
        }
        Ok(Corpus { sentences, by_id })
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn get(&self, id: u64) -> Option<&Sentence> {
        self.by_id.get(&id).map(|&i| &self.sentences[i])
    }

    pub fn sentence(&self, id: u64) -> Result<&Sentence> {
        self.get(id).ok_or(Error::UnknownDocument(id))
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let records: Vec<SentenceRecord> = jsonl::read(path)?;
    Corpus::new(
        records
            .into_iter()
            .map(|r| Sentence::new(r.id, r.text))
            .collect(),
    )
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let records: Vec<SentenceRecord> = corpus
        .sentences
        .iter()
        .map(|s| SentenceRecord {
            id: s.id,
            text: s.text.clone(),
        })
        .collect();
    jsonl::write(path, &records)
}

/// Token-to-index map shared by the selector and the generator.
///
/// Reserved tokens occupy the first indices; the rest are sorted so that the
/// mapping depends only on the token set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a, I>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a TokenSequence>,
    {
        let mut rest = BTreeSet::new();
        for seq in sequences {
            for t in seq.iter() {
                if !is_reserved(t) {
                    rest.insert(t.clone());
                }
            }
        }
        let tokens = RESERVED
            .iter()
            .map(|t| t.to_string())
            .chain(rest)
            .collect();
        Self::from_tokens(tokens).expect("reserved tokens are present and unique")
    }

    /// Rebuilds a vocabulary from its token list, as stored in model files.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for r in RESERVED {
            if !index.contains_key(r) {
                return Err(Error::InvalidInput(format!("vocabulary lacks {r}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, falling back to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or_else(|| self.index[UNK])
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}
