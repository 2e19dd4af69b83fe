//! Backend access: completions, embeddings, hierarchical classification
//! and unconstrained topic discovery.
//!
//! Prompts carry external aliases only; the gateway translates aliases
//! back to internal names when it parses a response.

mod http;
mod mock;
mod parse;

pub use http::HttpBackend;
pub use mock::{Fallback, FlipRule, KeywordRule, MockBackend, MockProfile, Parity, ReadWindow};
pub use parse::{extract_last_object, parse_classification, parse_topic, parse_winner};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, ProcessedDocument};
use crate::prompting::{build_prompt, with_document, PromptError, PromptSpec, RenderedPrompt, TASK_TOPICS};
use crate::schema::{ClassSchema, Label, Topic, TopicSet};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("text to embed is empty")]
    EmptyText,
    #[error("backend timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend rate limited the request")]
    RateLimited,
    #[error("backend returned HTTP {0}")]
    Status(u16),
    #[error("cannot parse backend response: {raw:?}")]
    UnparseableResponse { raw: String },
    #[error("response names unknown label {0:?}")]
    UnknownLabel(String),
    #[error("judge chose {0:?}, which was not offered")]
    WinnerNotCandidate(String),
    #[error("backend does not support {0}")]
    Unsupported(&'static str),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl GatewayError {
    /// True when the model answered but the answer was not a usable label.
    pub fn is_label_error(&self) -> bool {
        matches!(self, Self::UnparseableResponse { .. } | Self::UnknownLabel(_))
    }

    fn retryable(&self) -> bool {
        matches!(self, Self::Timeout | Self::Transport(_) | Self::RateLimited)
    }
}

impl From<GatewayError> for PromptError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Prompt(p) => p,
            other => PromptError::Gateway(Box::new(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retry_limit: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    /// Path to a mock profile TOML; ignored by the http backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_profile: Option<PathBuf>,
    /// Inline mock profile, used when no path is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockProfile>,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_model() -> String {
    "mock".into()
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_backoff() -> u64 {
    250
}
fn default_workers() -> usize {
    4
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            embed_endpoint: None,
            model_id: default_model(),
            temperature: 0.0,
            timeout_secs: default_timeout(),
            retry_limit: default_retries(),
            retry_backoff_ms: default_backoff(),
            mock_profile: None,
            mock: None,
            workers: default_workers(),
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }

    /// Validation suites assume greedy decoding.
    pub fn require_deterministic(&self) -> Result<(), GatewayError> {
        if self.temperature != 0.0 {
            return Err(GatewayError::Config(format!(
                "temperature must be 0 for validation, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Constructs the backend described by `config`.
pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn Backend>, GatewayError> {
    if config.temperature < 0.0 {
        return Err(GatewayError::Config("temperature must be ≥ 0".into()));
    }
    match config.kind {
        BackendKind::Http => Ok(Arc::new(HttpBackend::new(config.clone())?)),
        BackendKind::Mock => {
            let profile = match (&config.mock_profile, &config.mock) {
                (Some(path), _) => MockProfile::load(path)?,
                (None, Some(p)) => p.clone(),
                (None, None) => MockProfile::default(),
            };
            Ok(Arc::new(MockBackend::new(profile)?))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a str,
    /// Identity of the document in the prompt, when there is one. Never
    /// sent over the wire; the mock uses it to inject order faults.
    pub doc_id: Option<&'a str>,
}

impl<'a> CompletionRequest<'a> {
    pub fn new(prompt: &'a str) -> Self {
        Self { prompt, doc_id: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub dim: usize,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: impl Into<String>) -> Self {
        Self {
            dim: values.len(),
            values,
            provider_id: provider_id.into(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A model provider.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: CompletionRequest<'_>) -> Result<Completion, GatewayError>;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;
}

/// Runs `op` once plus up to `retry_limit` retries on retryable failures.
pub(crate) fn with_retries<T>(
    retry_limit: u32,
    backoff: Duration,
    mut op: impl FnMut() -> Result<T, GatewayError>,
) -> Result<T, GatewayError> {
    let mut attempt = 0;
    loop {
        match op() {
            Err(e) if e.retryable() && attempt < retry_limit => {
                attempt += 1;
                std::thread::sleep(backoff * attempt);
            }
            other => return other,
        }
    }
}

pub fn complete(backend: &dyn Backend, prompt: &str) -> Result<String, GatewayError> {
    if prompt.trim().is_empty() {
        return Err(GatewayError::EmptyPrompt);
    }
    Ok(backend.complete(CompletionRequest::new(prompt))?.text)
}

pub fn embed(backend: &dyn Backend, text: &str) -> Result<EmbeddingVector, GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::EmptyText);
    }
    backend.embed(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub doc_id: String,
    pub parent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<String>,
    pub raw_response: String,
    pub prompt_hash: String,
    pub backend_id: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
}

impl ClassificationResult {
    pub fn label(&self) -> Label {
        Label {
            parent: self.parent.clone(),
            child: self.child.clone(),
        }
    }
}

/// Classifies documents against one schema through one backend.
#[derive(Clone)]
pub struct Classifier {
    backend: Arc<dyn Backend>,
    schema: Arc<ClassSchema>,
    workers: usize,
}

impl Classifier {
    pub fn new(backend: Arc<dyn Backend>, schema: ClassSchema) -> Self {
        Self {
            backend,
            schema: Arc::new(schema),
            workers: default_workers(),
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn schema(&self) -> &ClassSchema {
        &self.schema
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn render(&self, spec: &PromptSpec) -> Result<RenderedPrompt, GatewayError> {
        Ok(build_prompt(&self.schema, spec)?)
    }

    pub fn classify(
        &self,
        doc: &ProcessedDocument,
        spec: &PromptSpec,
    ) -> Result<ClassificationResult, GatewayError> {
        let rendered = self.render(spec)?;
        self.classify_rendered(doc, &rendered)
    }

    pub fn classify_rendered(
        &self,
        doc: &ProcessedDocument,
        rendered: &RenderedPrompt,
    ) -> Result<ClassificationResult, GatewayError> {
        let prompt = with_document(&rendered.text, &doc.text);
        let completion = self.backend.complete(CompletionRequest {
            prompt: &prompt,
            doc_id: Some(&doc.id),
        })?;
        let label = parse_classification(&completion.text, &self.schema)?;
        Ok(ClassificationResult {
            doc_id: doc.id.clone(),
            parent: label.parent,
            child: label.child,
            raw_response: completion.text,
            prompt_hash: rendered.hash.clone(),
            backend_id: self.backend.id().to_string(),
            latency_ms: completion.latency.as_millis() as u64,
            timestamp: doc.timestamp,
        })
    }

    pub fn label_rendered(
        &self,
        doc: &ProcessedDocument,
        rendered: &RenderedPrompt,
    ) -> Result<Label, GatewayError> {
        self.classify_rendered(doc, rendered).map(|r| r.label())
    }

    /// Classifies a batch on a bounded worker pool. Output order follows
    /// `docs`; the first failing document aborts the batch.
    pub fn classify_batch(
        &self,
        docs: &[ProcessedDocument],
        spec: &PromptSpec,
    ) -> Result<Vec<ClassificationResult>, GatewayError> {
        let rendered = self.render(spec)?;
        fan_out(self.workers, docs, |doc| self.classify_rendered(doc, &rendered))
    }
}

/// Maps `f` over `items` on a pool of `workers` threads, keeping input order.
pub(crate) fn fan_out<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>, GatewayError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, GatewayError> + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| GatewayError::Config(e.to_string()))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Free-function form of [`Classifier::classify`].
pub fn classify(
    doc: &ProcessedDocument,
    prompt: &PromptSpec,
    schema: &ClassSchema,
    backend: Arc<dyn Backend>,
) -> Result<ClassificationResult, GatewayError> {
    Classifier::new(backend, schema.clone()).classify(doc, prompt)
}

/// Default topic-elicitation instructions. Not canonical; replace freely.
/// `{max_topics}` is substituted before sending.
pub const DEFAULT_TOPIC_PROMPT: &str = "Read the document and name the single theme it is about, \
without reference to any predefined categories. Use a short noun phrase as the theme name and \
add a one-sentence description. Across the whole collection there are at most {max_topics} \
themes, so prefer general names over specific ones.\n\n\
OUTPUT FORMAT:\nRespond with a single-line JSON object {\"topic\": \"<name>\", \"description\": \"<sentence>\"}.";

pub const OVERFLOW_TOPIC: &str = "Other";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicDiscovery {
    pub topics: TopicSet,
    pub assignments: BTreeMap<String, String>,
}

/// Maps every document to one emergent topic, independent of any schema.
///
/// Names are merged case-insensitively. When more than `max_topics`
/// distinct names come back, the `max_topics - 1` most frequent are kept
/// and the rest fold into [`OVERFLOW_TOPIC`].
pub fn discover_topics(
    corpus: &Corpus,
    topic_prompt: &str,
    max_topics: usize,
    backend: &dyn Backend,
    workers: usize,
) -> Result<TopicDiscovery, GatewayError> {
    if max_topics == 0 {
        return Err(GatewayError::Config("max_topics must be ≥ 1".into()));
    }
    let template = topic_prompt.replace("{max_topics}", &max_topics.to_string());
    let template = if template.starts_with(TASK_TOPICS) {
        template
    } else {
        format!("{TASK_TOPICS}\n{template}")
    };
    let raw: Vec<Topic> = {
        let call = |doc: &ProcessedDocument| -> Result<Topic, GatewayError> {
            let prompt = with_document(&template, &doc.text);
            let completion = backend.complete(CompletionRequest {
                prompt: &prompt,
                doc_id: Some(&doc.id),
            })?;
            parse_topic(&completion.text)
        };
        fan_out(workers, &corpus.documents, call)?
    };

    let mut proposed = TopicSet::default();
    let mut names = Vec::with_capacity(raw.len());
    for topic in raw {
        names.push(proposed.insert(topic));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for n in &names {
        *counts.entry(n.as_str()).or_default() += 1;
    }

    let (topics, keep): (TopicSet, Vec<String>) = if proposed.len() <= max_topics {
        let keep = proposed.names();
        (proposed, keep)
    } else {
        let mut ranked: Vec<(usize, &Topic)> = proposed.topics.iter().enumerate().collect();
        ranked.sort_by(|a, b| counts[b.1.name.as_str()].cmp(&counts[a.1.name.as_str()]).then(a.0.cmp(&b.0)));
        let mut kept: Vec<(usize, Topic)> = ranked
            .into_iter()
            .take(max_topics - 1)
            .map(|(i, t)| (i, t.clone()))
            .collect();
        kept.sort_by_key(|(i, _)| *i);
        let mut set = TopicSet::default();
        for (_, t) in kept {
            set.insert(t);
        }
        let keep = set.names();
        let other = set.insert(Topic {
            name: OVERFLOW_TOPIC.into(),
            description: "Documents from themes folded together to respect the topic budget."
                .into(),
        });
        debug_assert_eq!(other, OVERFLOW_TOPIC);
        (set, keep)
    };

    let assignments = corpus
        .documents
        .iter()
        .zip(names)
        .map(|(doc, name)| {
            let topic = if keep.contains(&name) {
                name
            } else {
                topics
                    .topics
                    .iter()
                    .find(|t| TopicSet::fold(&t.name) == TopicSet::fold(OVERFLOW_TOPIC))
                    .map(|t| t.name.clone())
                    .unwrap_or_else(|| OVERFLOW_TOPIC.to_string())
            };
            (doc.id.clone(), topic)
        })
        .collect();
    Ok(TopicDiscovery { topics, assignments })
}

#[cfg(test)]
mod tests;
