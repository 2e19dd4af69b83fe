//! Document ingestion: cleaning, segmentation, JSONL loading and
//! partitioning of a classified corpus by parent class.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ClassificationResult;
use crate::schema::ClassSchema;
use crate::store::canonical;

/// Placeholder substituted for every URL by [`ArtifactRule::CollapseUrls`].
pub const URL_TOKEN: &str = "<URL>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document {0:?} is empty after cleaning")]
    EmptyAfterCleaning(String),
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("documents without an assignment: {0:?}")]
    MissingAssignment(Vec<String>),
    #[error("document {0:?} assigned more than once")]
    DuplicateAssignment(String),
    #[error("result for {doc_id:?} names unknown parent {parent:?}")]
    UnknownParent { doc_id: String, parent: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A document as it arrives from the source system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dimensions: BTreeMap<String, String>,
}

impl RawDocument {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            timestamp: None,
            dimensions: BTreeMap::new(),
        }
    }
}

/// A cleaned, size-bounded document ready to be placed in a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedDocument {
    pub id: String,
    pub source_id: String,
    pub text: String,
    pub segment_index: usize,
    pub token_estimate: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub dimensions: BTreeMap<String, String>,
}

impl ProcessedDocument {
    /// Builds a single-segment document directly from already clean text.
    pub fn from_text(id: impl Into<String>, text: impl Into<String>) -> Self {
        let id = id.into();
        let text = text.into();
        Self {
            source_id: id.clone(),
            id,
            token_estimate: estimate_tokens(&text),
            text,
            segment_index: 0,
            timestamp: None,
            dimensions: BTreeMap::new(),
        }
    }

    /// Same document identity with replaced text (used by truncation probes).
    pub fn with_text(&self, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            token_estimate: estimate_tokens(&text),
            text,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<ProcessedDocument>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn new(documents: Vec<ProcessedDocument>, provenance: Provenance) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for doc in &documents {
            if !seen.insert(doc.id.as_str()) {
                return Err(CorpusError::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Self { documents, provenance })
    }

    /// An in-memory corpus with no file behind it.
    pub fn from_documents(documents: Vec<ProcessedDocument>) -> Result<Self, CorpusError> {
        Self::new(
            documents,
            Provenance {
                source: "memory".into(),
                config_hash: String::new(),
            },
        )
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ProcessedDocument> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Writes the processed documents as JSONL.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for doc in &self.documents {
            out.push_str(&serde_json::to_string(doc).expect("document serializes"));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads a JSONL file of already processed documents.
    pub fn read_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let body = fs::read_to_string(path)?;
        let mut documents = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let doc: ProcessedDocument =
                serde_json::from_str(line).map_err(|e| CorpusError::ParseError {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            documents.push(doc);
        }
        Self::new(
            documents,
            Provenance {
                source: path.display().to_string(),
                config_hash: String::new(),
            },
        )
    }
}

/// One cleaning step. Rules run in the order listed in [`PreprocessConfig::rules`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactRule {
    /// Drops HTML/XML tags, keeping their inner text.
    StripMarkup,
    /// Drops control characters other than newline and tab.
    StripControl,
    /// Replaces http(s) and www URLs with [`URL_TOKEN`].
    CollapseUrls,
    /// Collapses whitespace runs: runs containing a newline become one
    /// newline, all other runs become one space. Trims both ends.
    CollapseWhitespace,
}

impl ArtifactRule {
    pub fn name(self) -> &'static str {
        match self {
            Self::StripMarkup => "strip_markup",
            Self::StripControl => "strip_control",
            Self::CollapseUrls => "collapse_urls",
            Self::CollapseWhitespace => "collapse_whitespace",
        }
    }

    fn apply(self, text: &str) -> String {
        match self {
            Self::StripMarkup => markup_re()
                .replace_all(text, |caps: &regex::Captures<'_>| {
                    let m = &caps[0];
                    if m == URL_TOKEN {
                        m.to_string()
                    } else {
                        " ".to_string()
                    }
                })
                .into_owned(),
            Self::StripControl => text
                .chars()
                .filter(|c| !c.is_control() || *c == '\n' || *c == '\t')
                .collect(),
            Self::CollapseUrls => url_re().replace_all(text, URL_TOKEN).into_owned(),
            Self::CollapseWhitespace => collapse_whitespace(text),
        }
    }
}

impl fmt::Display for ArtifactRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArtifactRule {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strip_markup" => Ok(Self::StripMarkup),
            "strip_control" => Ok(Self::StripControl),
            "collapse_urls" => Ok(Self::CollapseUrls),
            "collapse_whitespace" => Ok(Self::CollapseWhitespace),
            other => Err(CorpusError::InvalidConfig(format!("unknown rule {other:?}"))),
        }
    }
}

fn markup_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"</?[A-Za-z][^<>]*>").unwrap())
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:https?://|www\.)[^\s<>]+").unwrap())
}

fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending: Option<char> = None;
    for c in text.chars() {
        if c.is_whitespace() {
            pending = match pending {
                Some('\n') => Some('\n'),
                _ if c == '\n' || c == '\r' => Some('\n'),
                _ => Some(' '),
            };
        } else {
            if let Some(ws) = pending.take() {
                if !out.is_empty() {
                    out.push(ws);
                }
            }
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub max_segment_tokens: i64,
    pub rules: Vec<ArtifactRule>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_segment_tokens: 512,
            rules: vec![
                ArtifactRule::StripMarkup,
                ArtifactRule::StripControl,
                ArtifactRule::CollapseUrls,
                ArtifactRule::CollapseWhitespace,
            ],
        }
    }
}

impl PreprocessConfig {
    /// Digest of the canonical JSON form; recorded as corpus provenance.
    pub fn hash(&self) -> String {
        canonical::digest(self)
    }

    /// Reads a TOML or JSON config (chosen by file extension).
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let body = fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&body).map_err(|e| CorpusError::InvalidConfig(e.to_string()))?
        } else {
            toml::from_str(&body).map_err(|e| CorpusError::InvalidConfig(e.to_string()))?
        };
        cfg.max_words()?;
        Ok(cfg)
    }

    /// Largest word count whose token estimate fits in `max_segment_tokens`.
    fn max_words(&self) -> Result<usize, CorpusError> {
        if self.max_segment_tokens <= 0 {
            return Err(CorpusError::InvalidConfig(
                "max_segment_tokens must be positive".into(),
            ));
        }
        let max = self.max_segment_tokens as usize;
        // ceil(1.3 w) <= max  <=>  13 w + 9 <= 10 max + 9
        let words = max * 10 / 13;
        if words == 0 {
            return Err(CorpusError::InvalidConfig(format!(
                "max_segment_tokens {max} cannot hold a single word"
            )));
        }
        Ok(words)
    }
}

/// Word count × 1.3, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    words_to_tokens(text.split_whitespace().count())
}

fn words_to_tokens(words: usize) -> usize {
    (words * 13).div_ceil(10)
}

/// Applies the configured cleaning rules in order, repeating the pass until
/// the text stops changing: removing one tag can expose another (`<a<b>>`),
/// and a second run over cleaned text must be a no-op.
pub fn normalize(text: &str, config: &PreprocessConfig) -> String {
    let pass = |t: &str| config.rules.iter().fold(t.to_string(), |acc, rule| rule.apply(&acc));
    let mut current = pass(text);
    for _ in 0..16 {
        let next = pass(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

struct Word {
    start: usize,
    end: usize,
    ends_sentence: bool,
}

fn words_with_spans(text: &str) -> Vec<Word> {
    let mut words: Vec<Word> = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                let w = &text[s..i];
                words.push(Word {
                    start: s,
                    end: i,
                    ends_sentence: w.ends_with(['.', '!', '?']) || c == '\n',
                });
            } else if c == '\n' {
                if let Some(last) = words.last_mut() {
                    last.ends_sentence = true;
                }
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        words.push(Word {
            start: s,
            end: text.len(),
            ends_sentence: true,
        });
    }
    words
}

/// Cleans a raw document and splits it into segments that respect
/// `max_segment_tokens`.
///
/// Splits land after the last sentence terminator (`.`, `!`, `?` or a line
/// break) that fits; a sentence longer than the limit is hard-split at a
/// word boundary.
pub fn preprocess(
    raw: &RawDocument,
    config: &PreprocessConfig,
) -> Result<Vec<ProcessedDocument>, CorpusError> {
    let max_words = config.max_words()?;
    let text = normalize(&raw.text, config);
    let words = words_with_spans(&text);
    if words.is_empty() {
        return Err(CorpusError::EmptyAfterCleaning(raw.id.clone()));
    }

    let mut spans = Vec::new();
    let mut first = 0;
    while first < words.len() {
        let remaining = words.len() - first;
        let take = if remaining <= max_words {
            remaining
        } else {
            let window = &words[first..first + max_words];
            match window.iter().rposition(|w| w.ends_sentence) {
                Some(i) => i + 1,
                None => max_words,
            }
        };
        let last = first + take - 1;
        spans.push((words[first].start, words[last].end, take));
        first += take;
    }

    let split = spans.len() > 1;
    Ok(spans
        .into_iter()
        .enumerate()
        .map(|(index, (start, end, n_words))| ProcessedDocument {
            id: if split {
                format!("{}#{index}", raw.id)
            } else {
                raw.id.clone()
            },
            source_id: raw.id.clone(),
            text: text[start..end].to_string(),
            segment_index: index,
            token_estimate: words_to_tokens(n_words),
            timestamp: raw.timestamp,
            dimensions: raw.dimensions.clone(),
        })
        .collect())
}

/// Reads raw documents from JSONL, preserving file order.
pub fn load_raw(path: &Path) -> Result<Vec<RawDocument>, CorpusError> {
    let body = fs::read_to_string(path)?;
    parse_raw_jsonl(&body)
}

pub fn parse_raw_jsonl(body: &str) -> Result<Vec<RawDocument>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument = serde_json::from_str(line).map_err(|e| CorpusError::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        if doc.id.is_empty() {
            return Err(CorpusError::ParseError {
                line: i + 1,
                message: "empty id".into(),
            });
        }
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Loads a raw JSONL corpus and preprocesses every document.
pub fn load_corpus(path: &Path, config: &PreprocessConfig) -> Result<Corpus, CorpusError> {
    let raw = load_raw(path)?;
    let corpus = preprocess_all(&raw, config, path.to_path_buf())?;
    Ok(corpus)
}

pub fn preprocess_all(
    raw: &[RawDocument],
    config: &PreprocessConfig,
    source: PathBuf,
) -> Result<Corpus, CorpusError> {
    let mut documents = Vec::new();
    for doc in raw {
        documents.extend(preprocess(doc, config)?);
    }
    Corpus::new(
        documents,
        Provenance {
            source: source.display().to_string(),
            config_hash: config.hash(),
        },
    )
}

/// Splits a classified corpus into one sub-corpus per parent class.
///
/// Every parent of `schema` gets an entry, empty when no document was
/// assigned to it.
pub fn partition_by_parent(
    corpus: &Corpus,
    results: &[ClassificationResult],
    schema: &ClassSchema,
) -> Result<BTreeMap<String, Corpus>, CorpusError> {
    let mut assignment: BTreeMap<&str, &str> = BTreeMap::new();
    for r in results {
        if assignment.insert(r.doc_id.as_str(), r.parent.as_str()).is_some() {
            return Err(CorpusError::DuplicateAssignment(r.doc_id.clone()));
        }
    }
    let missing: Vec<String> = corpus
        .documents
        .iter()
        .filter(|d| !assignment.contains_key(d.id.as_str()))
        .map(|d| d.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CorpusError::MissingAssignment(missing));
    }

    let mut parts: BTreeMap<String, Vec<ProcessedDocument>> = schema
        .parents
        .iter()
        .map(|p| (p.internal_name.clone(), Vec::new()))
        .collect();
    for doc in &corpus.documents {
        let parent = assignment[doc.id.as_str()];
        match parts.get_mut(parent) {
            Some(bucket) => bucket.push(doc.clone()),
            None => {
                return Err(CorpusError::UnknownParent {
                    doc_id: doc.id.clone(),
                    parent: parent.to_string(),
                })
            }
        }
    }
    parts
        .into_iter()
        .map(|(name, docs)| {
            let provenance = Provenance {
                source: format!("{}#{}", corpus.provenance.source, name),
                config_hash: corpus.provenance.config_hash.clone(),
            };
            Corpus::new(docs, provenance).map(|c| (name, c))
        })
        .collect()
}

/// Ids of all documents, in corpus order.
pub fn ids(corpus: &Corpus) -> BTreeSet<String> {
    corpus.documents.iter().map(|d| d.id.clone()).collect()
}
