//! A deterministic, rule-driven stand-in for a language model.
//!
//! The mock reads the same prompt a real model would. Keyword rules fire on
//! the document text, optionally restricted to a leading fraction of it. When
//! no rule fires a configurable fallback decides. This makes every validation
//! test reproducible offline while still being sensitive to what the prompt
//! actually contains.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{parse::extract_last_object, Backend, Completion, CompletionRequest, EmbeddingVector, GatewayError};
use crate::prompting::{
    DOC_CLOSE, DOC_OPEN, SECTION_CANDIDATES, SECTION_CLASSES, SECTION_DOCUMENT, SECTION_EXAMPLES,
    SECTION_OUTPUT, SECTION_PRINCIPLES, SECTION_REASONING, TASK_JUDGE, TASK_TOPICS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRule {
    /// Word or phrase, matched case-insensitively on word boundaries.
    pub pattern: String,
    /// Parent alias to answer with.
    pub parent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<String>,
    /// Only fire when the pattern also occurs in the prompt's instructions
    /// (preamble and class list). Models the prompt text being load-bearing.
    #[serde(default)]
    pub grounded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_description: Option<String>,
}

impl KeywordRule {
    pub fn new(pattern: impl Into<String>, parent: impl Into<String>, child: Option<&str>) -> Self {
        Self {
            pattern: pattern.into(),
            parent: parent.into(),
            child: child.map(str::to_string),
            grounded: false,
            topic: None,
            topic_description: None,
        }
    }

    pub fn grounded(mut self) -> Self {
        self.grounded = true;
        self
    }

    pub fn topic(mut self, name: impl Into<String>, description: impl Into<String>) -> Self {
        self.topic = Some(name.into());
        self.topic_description = Some(description.into());
        self
    }
}

/// What to answer when no rule fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fallback {
    /// A fixed alias pair; without a parent, the first class listed.
    FixedLabel {
        #[serde(default)]
        parent: Option<String>,
        #[serde(default)]
        child: Option<String>,
    },
    /// Copy the label of the last example shown (first class if none).
    LastExampleLabel,
    /// Echo the document's first word as the label.
    FirstTokenLabel,
}

impl Default for Fallback {
    fn default() -> Self {
        Self::FixedLabel { parent: None, child: None }
    }
}

/// How much of the document the mock looks at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReadWindow {
    #[default]
    Full,
    /// Only the first ⌈fraction·n⌉ words.
    PrefixFraction { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parity {
    Odd,
    Even,
}

impl Parity {
    fn matches(self, run: u64) -> bool {
        match self {
            Parity::Odd => run % 2 == 1,
            Parity::Even => run.is_multiple_of(2),
        }
    }
}

/// Injected nondeterminism: on every run of the given parity (counting
/// classification calls per document from 0), the listed documents get
/// `parent`/`child` instead of their normal answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRule {
    pub doc_ids: Vec<String>,
    pub parity: Parity,
    pub parent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockProfile {
    #[serde(default)]
    pub keyword_rules: Vec<KeywordRule>,
    #[serde(default)]
    pub fallback: Fallback,
    #[serde(default)]
    pub read_window: ReadWindow,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_rule: Option<FlipRule>,
    #[serde(default = "default_topic")]
    pub fallback_topic: String,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
}

fn default_topic() -> String {
    "Other".into()
}
fn default_dim() -> usize {
    256
}

impl Default for MockProfile {
    fn default() -> Self {
        Self {
            keyword_rules: Vec::new(),
            fallback: Fallback::default(),
            read_window: ReadWindow::Full,
            flip_rule: None,
            fallback_topic: default_topic(),
            embedding_dim: default_dim(),
        }
    }
}

impl MockProfile {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let body = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&body)
    }

    pub fn parse(toml_body: &str) -> Result<Self, GatewayError> {
        toml::from_str(toml_body).map_err(|e| GatewayError::Config(e.to_string()))
    }
}

/// The pieces of a prompt the mock cares about.
struct PromptView<'a> {
    task: &'a str,
    instructions: &'a str,
    document: &'a str,
    examples_section: Option<&'a str>,
    classes_section: &'a str,
    candidates_section: Option<&'a str>,
    cot: bool,
}

const ALL_SECTIONS: [&str; 7] = [
    SECTION_CLASSES,
    SECTION_EXAMPLES,
    SECTION_REASONING,
    SECTION_OUTPUT,
    SECTION_DOCUMENT,
    SECTION_PRINCIPLES,
    SECTION_CANDIDATES,
];

fn header(name: &str) -> String {
    format!("\n{name}\n")
}

fn section<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    let h = header(name);
    let start = prompt.find(&h)? + h.len();
    let rest = &prompt[start..];
    let end = ALL_SECTIONS
        .iter()
        .filter_map(|s| rest.find(&format!("\n\n{s}\n")))
        .min()
        .unwrap_or(rest.len());
    Some(&rest[..end])
}

impl<'a> PromptView<'a> {
    fn new(prompt: &'a str) -> Self {
        let task = prompt.lines().next().unwrap_or("").trim();
        let doc_header = format!("\n{SECTION_DOCUMENT}\n{DOC_OPEN}\n");
        let (head, document) = match prompt.rfind(&doc_header) {
            Some(i) => {
                let body = &prompt[i + doc_header.len()..];
                let end = body.rfind(&format!("\n{DOC_CLOSE}")).unwrap_or(body.len());
                (&prompt[..i], &body[..end])
            }
            None => (prompt, ""),
        };
        let cut = [SECTION_EXAMPLES, SECTION_REASONING, SECTION_OUTPUT, SECTION_CANDIDATES]
            .iter()
            .filter_map(|s| head.find(&header(s)))
            .min()
            .unwrap_or(head.len());
        Self {
            task,
            instructions: &head[..cut],
            document,
            examples_section: section(head, SECTION_EXAMPLES),
            classes_section: section(head, SECTION_CLASSES).unwrap_or(""),
            candidates_section: section(head, SECTION_CANDIDATES),
            cot: head.contains(&header(SECTION_REASONING)),
        }
    }

    /// Aliases in list order from `- ALIAS: ...` lines.
    fn listed(section: &str, top_level_only: bool) -> Vec<String> {
        section
            .lines()
            .filter(|l| !top_level_only || !l.starts_with(' '))
            .filter_map(|l| l.trim_start().strip_prefix("- "))
            .filter_map(|l| l.split_once(':').map(|(a, _)| a.trim().to_string()))
            .collect()
    }

    fn first_class(&self) -> Option<String> {
        Self::listed(self.classes_section, true).into_iter().next()
    }

    fn last_example_output(&self) -> Option<(String, Option<String>)> {
        let section = self.examples_section?;
        let idx = section.rfind("Expected Output:\n")?;
        let line = section[idx + "Expected Output:\n".len()..].lines().next()?;
        let obj = extract_last_object(line)?;
        let parent = obj.get("parent")?.as_str()?.to_string();
        let child = obj.get("child").and_then(|c| c.as_str()).map(str::to_string);
        Some((parent, child))
    }
}

fn word_pattern(pattern: &str) -> Result<Regex, GatewayError> {
    let words: Vec<String> = pattern.split_whitespace().map(regex::escape).collect();
    if words.is_empty() {
        return Err(GatewayError::Config("keyword rule pattern is empty".into()));
    }
    Regex::new(&format!(r"(?i)\b{}\b", words.join(r"\s+")))
        .map_err(|e| GatewayError::Config(e.to_string()))
}

/// FNV-1a, 64 bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercase alphanumeric tokens.
pub(crate) fn bow_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub struct MockBackend {
    profile: MockProfile,
    rules: Vec<(Regex, KeywordRule)>,
    runs: Mutex<HashMap<String, u64>>,
    id: String,
}

impl std::fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockBackend").field("profile", &self.profile).finish()
    }
}

impl MockBackend {
    pub fn new(profile: MockProfile) -> Result<Self, GatewayError> {
        if let ReadWindow::PrefixFraction { fraction } = profile.read_window {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(GatewayError::Config(format!(
                    "read window fraction must be in (0, 1], got {fraction}"
                )));
            }
        }
        if profile.embedding_dim == 0 {
            return Err(GatewayError::Config("embedding_dim must be ≥ 1".into()));
        }
        let rules = profile
            .keyword_rules
            .iter()
            .map(|r| Ok((word_pattern(&r.pattern)?, r.clone())))
            .collect::<Result<Vec<_>, GatewayError>>()?;
        Ok(Self {
            rules,
            runs: Mutex::new(HashMap::new()),
            id: "mock".into(),
            profile,
        })
    }

    pub fn profile(&self) -> &MockProfile {
        &self.profile
    }

    fn window<'t>(&self, document: &'t str) -> std::borrow::Cow<'t, str> {
        match self.profile.read_window {
            ReadWindow::Full => document.into(),
            ReadWindow::PrefixFraction { fraction } => {
                let words: Vec<&str> = document.split_whitespace().collect();
                let keep = ((fraction * words.len() as f64) - 1e-9).ceil().max(0.0) as usize;
                words[..keep.min(words.len())].join(" ").into()
            }
        }
    }

    fn first_hit(&self, view: &PromptView<'_>) -> Option<&KeywordRule> {
        let window = self.window(view.document);
        self.rules
            .iter()
            .find(|(re, rule)| re.is_match(&window) && (!rule.grounded || re.is_match(view.instructions)))
            .map(|(_, rule)| rule)
    }

    fn next_run(&self, doc_id: &str) -> u64 {
        let mut runs = self.runs.lock().expect("run counter poisoned");
        let n = runs.entry(doc_id.to_string()).or_insert(0);
        let run = *n;
        *n += 1;
        run
    }

    fn classify(&self, view: &PromptView<'_>, doc_id: Option<&str>) -> String {
        let mut answer: Option<(String, Option<String>)> = self
            .first_hit(view)
            .map(|r| (r.parent.clone(), r.child.clone()));
        if answer.is_none() {
            answer = match &self.profile.fallback {
                Fallback::FixedLabel { parent: Some(p), child } => Some((p.clone(), child.clone())),
                Fallback::FixedLabel { parent: None, .. } => view.first_class().map(|p| (p, None)),
                Fallback::LastExampleLabel => view
                    .last_example_output()
                    .or_else(|| view.first_class().map(|p| (p, None))),
                Fallback::FirstTokenLabel => view
                    .document
                    .split_whitespace()
                    .next()
                    .map(|w| (w.trim_matches(|c: char| !c.is_alphanumeric()).to_string(), None)),
            };
        }
        if let (Some(flip), Some(id)) = (&self.profile.flip_rule, doc_id) {
            let run = self.next_run(id);
            if flip.doc_ids.iter().any(|d| d == id) && flip.parity.matches(run) {
                answer = Some((flip.parent.clone(), flip.child.clone()));
            }
        }
        let Some((parent, child)) = answer else {
            return "I cannot tell.".into();
        };
        let json = match &child {
            Some(c) => json!({"parent": parent, "child": c}),
            None => json!({"parent": parent}),
        };
        if view.cot {
            format!(
                "The document most closely matches class {parent}. {}\n{json}",
                match &child {
                    Some(c) => format!("Within {parent}, {c} is the best fit."),
                    None => "No finer class applies.".to_string(),
                }
            )
        } else {
            json.to_string()
        }
    }

    fn topic(&self, view: &PromptView<'_>) -> String {
        let hit = self.first_hit(view).and_then(|r| {
            r.topic.as_ref().map(|t| {
                (t.clone(), r.topic_description.clone().unwrap_or_else(|| t.clone()))
            })
        });
        let (name, description) = hit.unwrap_or_else(|| {
            (
                self.profile.fallback_topic.clone(),
                "Documents without a recognizable theme.".into(),
            )
        });
        json!({"topic": name, "description": description}).to_string()
    }

    fn judge(&self, view: &PromptView<'_>) -> String {
        let candidates = view.candidates_section.map(|s| PromptView::listed(s, false)).unwrap_or_default();
        let preferred = self
            .first_hit(view)
            .map(|r| r.child.clone().unwrap_or_else(|| r.parent.clone()))
            .filter(|a| candidates.iter().any(|c| c.eq_ignore_ascii_case(a)));
        match preferred.or_else(|| candidates.first().cloned()) {
            Some(w) => json!({"winner": w}).to_string(),
            None => "No candidates were offered.".into(),
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: CompletionRequest<'_>) -> Result<Completion, GatewayError> {
        if request.prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let view = PromptView::new(request.prompt);
        let text = if view.task == TASK_TOPICS {
            self.topic(&view)
        } else if view.task == TASK_JUDGE {
            self.judge(&view)
        } else {
            self.classify(&view, request.doc_id)
        };
        Ok(Completion {
            text,
            latency: Duration::ZERO,
        })
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let dim = self.profile.embedding_dim;
        let mut values = vec![0.0; dim];
        for token in bow_tokens(text) {
            values[(fnv1a(token.as_bytes()) % dim as u64) as usize] += 1.0;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(EmbeddingVector::new(values, format!("mock-bow-{dim}")))
    }
}
