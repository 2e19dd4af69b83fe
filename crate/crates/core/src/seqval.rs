//! Robustness checks for a classification setup.
//!
//! Three sequence tests ask whether the label depends on anything other than
//! the document: the order documents are sent in (statelessness), which part
//! of a long document the model reads (truncation), and the order of the
//! few-shot examples (permutation). Two input/output guards sit alongside:
//! an adversarial-phrase filter and an audit for leaked internal class names.
//!
//! A backend that cannot produce a label for a variant is recorded under
//! [`INVALID_LABEL`], so an answer that is sometimes unreadable counts as
//! unstable rather than aborting the suite.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, ProcessedDocument};
use crate::gateway::{Classifier, GatewayError};
use crate::prompting::{permutations, FewShotExample, PromptSpec};
use crate::schema::{ClassSchema, Label};

pub const INVALID_LABEL: &str = "<invalid>";
pub const DEFAULT_MIN_TOKENS: usize = 60;
pub const DEFAULT_PERMUTATION_CAP: usize = 120;

/// Injection stems flagged by default. Extend per deployment.
pub const DEFAULT_ADVERSARIAL_PHRASES: [&str; 12] = [
    "ignore previous instructions",
    "ignore all previous",
    "ignore the above",
    "disregard the above",
    "disregard previous instructions",
    "forget your instructions",
    "override your instructions",
    "new instructions",
    "classify this as",
    "label this as",
    "you are now",
    "reveal your system prompt",
];

#[derive(Debug, Error)]
pub enum SeqvalError {
    #[error("iteration count must be ≥ 1")]
    NoIterations,
    #[error("truncation proportion must be in (0, 1), got {0}")]
    InvalidProportion(f64),
    #[error("permutation test needs at least one example")]
    NoExamples,
    #[error("invalid phrase pattern {0:?}")]
    BadPattern(String),
    #[error("aborted after {} of {} iterations: {cause}", partial.completed_iterations, partial.n_iter)]
    Aborted {
        partial: Box<ShuffleReport>,
        cause: Box<GatewayError>,
    },
    #[error(transparent)]
    Gateway(Box<GatewayError>),
}

impl From<GatewayError> for SeqvalError {
    fn from(e: GatewayError) -> Self {
        SeqvalError::Gateway(Box::new(e))
    }
}

fn observed(result: Result<Label, GatewayError>) -> Result<String, GatewayError> {
    match result {
        Ok(l) => Ok(l.to_string()),
        Err(e) if e.is_label_error() => Ok(INVALID_LABEL.to_string()),
        Err(e) => Err(e),
    }
}

fn unstable(labels: BTreeMap<String, BTreeSet<String>>) -> BTreeMap<String, BTreeSet<String>> {
    labels.into_iter().filter(|(_, s)| s.len() > 1).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleReport {
    pub inconsistency_count: usize,
    pub unstable_docs: BTreeMap<String, BTreeSet<String>>,
    pub n_iter: usize,
    pub completed_iterations: usize,
    pub complete: bool,
}

/// Classifies the whole set `n_iter` times, each pass in a fresh seeded
/// shuffle, and counts documents that received more than one label.
///
/// Passes run one document at a time: the point is to catch state carried
/// between calls, which concurrency would blur.
pub fn test_statelessness<F>(mut classify: F, test_set: &Corpus, n_iter: usize, seed: u64) -> Result<ShuffleReport, SeqvalError>
where
    F: FnMut(&ProcessedDocument) -> Result<Label, GatewayError>,
{
    if n_iter == 0 {
        return Err(SeqvalError::NoIterations);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut order: Vec<&ProcessedDocument> = test_set.documents.iter().collect();
    for iteration in 0..n_iter {
        order.shuffle(&mut rng);
        for doc in &order {
            match observed(classify(doc)) {
                Ok(l) => {
                    labels.entry(doc.id.clone()).or_default().insert(l);
                }
                Err(cause) => {
                    let unstable_docs = unstable(labels);
                    return Err(SeqvalError::Aborted {
                        partial: Box::new(ShuffleReport {
                            inconsistency_count: unstable_docs.len(),
                            unstable_docs,
                            n_iter,
                            completed_iterations: iteration,
                            complete: false,
                        }),
                        cause: Box::new(cause),
                    });
                }
            }
        }
    }
    let unstable_docs = unstable(labels);
    Ok(ShuffleReport {
        inconsistency_count: unstable_docs.len(),
        unstable_docs,
        n_iter,
        completed_iterations: n_iter,
        complete: true,
    })
}

// ---------------------------------------------------------------------------
// Truncation

/// Words removed for proportion `p`: ⌊p·n⌋.
fn removed(n: usize, p: f64) -> usize {
    ((p * n as f64).floor() as usize).min(n)
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Drops the leading ⌊p·n⌋ words.
pub fn truncate_prefix(text: &str, p: f64) -> String {
    let w = words(text);
    w[removed(w.len(), p)..].join(" ")
}

/// Drops the trailing ⌊p·n⌋ words.
pub fn truncate_suffix(text: &str, p: f64) -> String {
    let w = words(text);
    w[..w.len() - removed(w.len(), p)].join(" ")
}

/// Drops a centred run of ⌊p·n⌋ words, keeping ⌈(n−r)/2⌉ words in front
/// and the rest behind.
pub fn truncate_middle(text: &str, p: f64) -> String {
    let w = words(text);
    let r = removed(w.len(), p);
    let head = (w.len() - r).div_ceil(2);
    let mut kept = w[..head].to_vec();
    kept.extend_from_slice(&w[head + r..]);
    kept.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationLabels {
    pub baseline: String,
    pub prefix: String,
    pub suffix: String,
    pub middle: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub i_prefix: usize,
    pub i_suffix: usize,
    pub i_middle: usize,
    pub p: f64,
    pub tested: usize,
    pub skipped: Vec<String>,
    pub per_doc: BTreeMap<String, TruncationLabels>,
}

/// Classifies each long document whole and with its prefix, suffix, and
/// middle cut away, counting variants whose label differs from the whole.
pub fn test_intradoc<F>(mut classify: F, long_docs: &Corpus, p: f64, min_tokens: usize) -> Result<TruncationReport, SeqvalError>
where
    F: FnMut(&ProcessedDocument) -> Result<Label, GatewayError>,
{
    if !(p > 0.0 && p < 1.0) {
        return Err(SeqvalError::InvalidProportion(p));
    }
    let mut report = TruncationReport {
        i_prefix: 0,
        i_suffix: 0,
        i_middle: 0,
        p,
        tested: 0,
        skipped: Vec::new(),
        per_doc: BTreeMap::new(),
    };
    for doc in &long_docs.documents {
        if doc.token_estimate < min_tokens {
            report.skipped.push(doc.id.clone());
            continue;
        }
        let baseline = observed(classify(doc))?;
        let mut run = |text: String| observed(classify(&doc.with_text(text)));
        let labels = TruncationLabels {
            baseline,
            prefix: run(truncate_prefix(&doc.text, p))?,
            suffix: run(truncate_suffix(&doc.text, p))?,
            middle: run(truncate_middle(&doc.text, p))?,
        };
        report.i_prefix += usize::from(labels.prefix != labels.baseline);
        report.i_suffix += usize::from(labels.suffix != labels.baseline);
        report.i_middle += usize::from(labels.middle != labels.baseline);
        report.tested += 1;
        report.per_doc.insert(doc.id.clone(), labels);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Example order

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub i_prompt: usize,
    pub permutations_tested: usize,
    pub unstable_docs: BTreeMap<String, BTreeSet<String>>,
}

/// Classifies every test document under each ordering of `examples` (all
/// of them up to `cap`, a seeded sample beyond) and counts documents whose
/// label depends on the ordering.
pub fn test_inprompt(
    examples: &[FewShotExample],
    test_set: &Corpus,
    classifier: &Classifier,
    base_spec: &PromptSpec,
    cap: usize,
    seed: u64,
) -> Result<PermutationReport, SeqvalError> {
    if examples.is_empty() {
        return Err(SeqvalError::NoExamples);
    }
    let orders = permutations(examples.len(), cap, seed);
    let mut labels: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for order in &orders {
        let spec = base_spec.clone().with_examples(examples.to_vec()).with_order(order.clone());
        let rendered = classifier.render(&spec)?;
        for doc in &test_set.documents {
            let l = observed(classifier.label_rendered(doc, &rendered))?;
            labels.entry(doc.id.clone()).or_default().insert(l);
        }
    }
    let unstable_docs = unstable(labels);
    Ok(PermutationReport {
        i_prompt: unstable_docs.len(),
        permutations_tested: orders.len(),
        unstable_docs,
    })
}

// ---------------------------------------------------------------------------
// Input filter

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseMatch {
    pub phrase: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum FilterOutcome {
    Pass,
    Flagged { matches: Vec<PhraseMatch> },
}

impl FilterOutcome {
    pub fn is_flagged(&self) -> bool {
        matches!(self, Self::Flagged { .. })
    }
}

/// Compiles phrases to case-insensitive, word-bounded patterns in which
/// any run of whitespace matches any other.
fn phrase_regex(phrase: &str) -> Result<Regex, SeqvalError> {
    let parts: Vec<String> = phrase.split_whitespace().map(regex::escape).collect();
    if parts.is_empty() {
        return Err(SeqvalError::BadPattern(phrase.into()));
    }
    let body = parts.join(r"\s+");
    // \b only makes sense next to a word character
    let first_word = phrase.trim_start().starts_with(|c: char| c.is_alphanumeric() || c == '_');
    let last_word = phrase.trim_end().ends_with(|c: char| c.is_alphanumeric() || c == '_');
    let pattern = format!(
        "{}{body}{}",
        if first_word { r"\b" } else { "" },
        if last_word { r"\b" } else { "" }
    );
    RegexBuilder::new(&pattern)
        .case_insensitive(true)
        .build()
        .map_err(|_| SeqvalError::BadPattern(phrase.into()))
}

#[derive(Debug, Clone)]
pub struct PhraseList {
    phrases: Vec<(String, Regex)>,
}

impl PhraseList {
    pub fn new<S: AsRef<str>>(phrases: &[S]) -> Result<Self, SeqvalError> {
        let phrases = phrases
            .iter()
            .map(|p| {
                let folded = p.as_ref().split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
                phrase_regex(&folded).map(|r| (folded, r))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { phrases })
    }

    pub fn default_list() -> Self {
        Self::new(&DEFAULT_ADVERSARIAL_PHRASES).expect("default phrases compile")
    }

    pub fn extend<S: AsRef<str>>(mut self, more: &[S]) -> Result<Self, SeqvalError> {
        self.phrases.extend(Self::new(more)?.phrases);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

/// Flags `doc` if any phrase occurs in it. Spans are byte offsets into the
/// document text; the document itself is untouched.
pub fn filter_adversarial(doc: &ProcessedDocument, phrases: &PhraseList) -> FilterOutcome {
    let mut matches: Vec<PhraseMatch> = phrases
        .phrases
        .iter()
        .flat_map(|(phrase, re)| {
            re.find_iter(&doc.text).map(move |m| PhraseMatch {
                phrase: phrase.clone(),
                start: m.start(),
                end: m.end(),
            })
        })
        .collect();
    if matches.is_empty() {
        return FilterOutcome::Pass;
    }
    matches.sort_by(|a, b| (a.start, a.end, &a.phrase).cmp(&(b.start, b.end, &b.phrase)));
    FilterOutcome::Flagged { matches }
}

/// Flagged documents are held back from classification, not dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub document: ProcessedDocument,
    pub matches: Vec<PhraseMatch>,
}

/// Splits a corpus into documents safe to classify and quarantined ones.
pub fn quarantine(corpus: &Corpus, phrases: &PhraseList) -> (Vec<ProcessedDocument>, Vec<Quarantined>) {
    let mut clean = Vec::new();
    let mut held = Vec::new();
    for doc in &corpus.documents {
        match filter_adversarial(doc, phrases) {
            FilterOutcome::Pass => clean.push(doc.clone()),
            FilterOutcome::Flagged { matches } => held.push(Quarantined {
                document: doc.clone(),
                matches,
            }),
        }
    }
    (clean, held)
}

// ---------------------------------------------------------------------------
// Obfuscation audit

/// Text shown to a model or a user, with a note of where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub location: String,
    pub text: String,
}

impl Artifact {
    pub fn new(location: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub location: String,
    pub internal_name: String,
    pub start: usize,
    pub end: usize,
}

/// Every occurrence of an internal class name in a user-facing artifact.
/// The schema file is not an artifact and is never scanned.
pub fn obfuscation_audit(schema: &ClassSchema, artifacts: &[Artifact]) -> Vec<Leak> {
    let names: Vec<(String, Regex)> = schema
        .internal_names()
        .into_iter()
        .filter_map(|n| phrase_regex(&n).ok().map(|r| (n, r)))
        .collect();
    let mut leaks = Vec::new();
    for a in artifacts {
        for (name, re) in &names {
            for m in re.find_iter(&a.text) {
                leaks.push(Leak {
                    location: a.location.clone(),
                    internal_name: name.clone(),
                    start: m.start(),
                    end: m.end(),
                });
            }
        }
    }
    leaks.sort_by(|a, b| (&a.location, a.start, &a.internal_name).cmp(&(&b.location, b.start, &b.internal_name)));
    leaks
}
