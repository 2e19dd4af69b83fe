//! Classification prompts: rendering, versioned refinement, example
//! permutations, and length optimization.
//!
//! A [`PromptSpec`] never stores class text wholesale. Definitions come from
//! the schema unless a refinement has overridden them, so "untouched
//! content" stays byte-identical across iterations.

mod optimize;

pub use optimize::{optimize_prompt, segments, OptimizeReport, Segment, SegmentKind};

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::estimate_tokens;
use crate::schema::{ClassSchema, Label};
use crate::store::canonical;

pub const TASK_CLASSIFY: &str = "TASK: CLASSIFICATION";
pub const TASK_TOPICS: &str = "TASK: TOPIC DISCOVERY";
pub const TASK_JUDGE: &str = "TASK: PREFERENCE JUDGMENT";
pub const SECTION_CLASSES: &str = "CLASSES:";
pub const SECTION_EXAMPLES: &str = "EXAMPLES:";
pub const SECTION_REASONING: &str = "REASONING:";
pub const SECTION_OUTPUT: &str = "OUTPUT FORMAT:";
pub const SECTION_DOCUMENT: &str = "DOCUMENT:";
pub const SECTION_PRINCIPLES: &str = "PRINCIPLES:";
pub const SECTION_CANDIDATES: &str = "CANDIDATES:";
pub const DOC_OPEN: &str = "<<<";
pub const DOC_CLOSE: &str = ">>>";

pub const COT_INSTRUCTION: &str = "First reason about which parent class fits the document. \
Then, based on that conclusion, reason about which child class of that parent fits best. \
End with the output line.";

pub const OUTPUT_INSTRUCTION: &str = "Respond with a single-line JSON object \
{\"parent\": \"<code>\", \"child\": \"<code>\"} using only the codes listed under CLASSES. \
Omit \"child\" when the parent has no child codes.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("example {index} is labeled {label:?}, which the schema does not define")]
    OrphanExample { index: usize, label: String },
    #[error("prompt targets schema version {prompt} but schema is version {schema}")]
    SchemaMismatch { prompt: u32, schema: u32 },
    #[error("example_order is not a permutation of 0..{0}")]
    InvalidOrder(usize),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("edit removes exclusion {text:?} which {class:?} does not have")]
    MissingExclusion { class: String, text: String },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("prompt scores {score:.4} on validation, below threshold {theta:.4}")]
    ThresholdUnreachable { score: f64, theta: f64 },
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("prompt hash {stored} does not match rendered text {rendered}")]
    HashMismatch { stored: String, rendered: String },
    #[error("cannot parse prompt spec: {0}")]
    Parse(String),
    #[error(transparent)]
    Gateway(#[from] Box<crate::gateway::GatewayError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExampleOrigin {
    #[default]
    Seed,
    Preference,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub text: String,
    pub expected_parent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_child: Option<String>,
    #[serde(default)]
    pub origin: ExampleOrigin,
}

impl FewShotExample {
    pub fn new(text: impl Into<String>, label: &Label, origin: ExampleOrigin) -> Self {
        Self {
            text: text.into(),
            expected_parent: label.parent.clone(),
            expected_child: label.child.clone(),
            origin,
        }
    }

    pub fn label(&self) -> Label {
        Label {
            parent: self.expected_parent.clone(),
            child: self.expected_child.clone(),
        }
    }
}

/// Definition text for one class as rendered in a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassText {
    pub definition: String,
    #[serde(default)]
    pub exclusions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DefinitionEdit {
    SetDefinition { class: String, text: String },
    AddExclusion { class: String, text: String },
    RemoveExclusion { class: String, text: String },
}

impl DefinitionEdit {
    pub fn class(&self) -> &str {
        match self {
            Self::SetDefinition { class, .. }
            | Self::AddExclusion { class, .. }
            | Self::RemoveExclusion { class, .. } => class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub iteration: u32,
    #[serde(default)]
    pub edits: Vec<DefinitionEdit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_snapshot: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed_segments: Vec<String>,
}

/// A versioned, reconstructible classification prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub schema_version: u32,
    #[serde(default)]
    pub preamble: String,
    #[serde(default)]
    pub examples: Vec<FewShotExample>,
    #[serde(default)]
    pub example_order: Vec<usize>,
    #[serde(default)]
    pub cot_enabled: bool,
    /// Class text replacing the schema's, keyed `Parent` or `Parent/Child`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, ClassText>,
    #[serde(default)]
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_iteration: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_hash: Option<String>,
    #[serde(default)]
    pub hash: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<AuditRecord>,
}

impl PromptSpec {
    pub fn new(schema: &ClassSchema, preamble: impl Into<String>) -> Self {
        Self {
            schema_version: schema.version,
            preamble: preamble.into(),
            examples: Vec::new(),
            example_order: Vec::new(),
            cot_enabled: false,
            overrides: BTreeMap::new(),
            iteration: 0,
            parent_iteration: None,
            parent_hash: None,
            hash: String::new(),
            audit: Vec::new(),
        }
    }

    /// Replaces the examples and resets the order to identity.
    pub fn with_examples(mut self, examples: Vec<FewShotExample>) -> Self {
        self.example_order = (0..examples.len()).collect();
        self.examples = examples;
        self
    }

    pub fn with_order(mut self, order: Vec<usize>) -> Self {
        self.example_order = order;
        self
    }

    pub fn with_cot(mut self, on: bool) -> Self {
        self.cot_enabled = on;
        self
    }

    /// Renders against `schema` and stores the resulting hash.
    pub fn sealed(mut self, schema: &ClassSchema) -> Result<Self, PromptError> {
        self.hash = build_prompt(schema, &self)?.hash;
        Ok(self)
    }

    /// Examples in rendering order.
    pub fn ordered_examples(&self) -> Result<Vec<&FewShotExample>, PromptError> {
        let order = self.effective_order()?;
        Ok(order.iter().map(|&i| &self.examples[i]).collect())
    }

    fn effective_order(&self) -> Result<Vec<usize>, PromptError> {
        let n = self.examples.len();
        if self.example_order.is_empty() {
            return Ok((0..n).collect());
        }
        let mut seen = vec![false; n];
        if self.example_order.len() != n {
            return Err(PromptError::InvalidOrder(n));
        }
        for &i in &self.example_order {
            if i >= n || seen[i] {
                return Err(PromptError::InvalidOrder(n));
            }
            seen[i] = true;
        }
        Ok(self.example_order.clone())
    }

    /// Definition text for `key`, honoring overrides.
    pub fn class_text(&self, schema: &ClassSchema, key: &str) -> Option<ClassText> {
        if let Some(text) = self.overrides.get(key) {
            return Some(text.clone());
        }
        schema.class(key).map(|c| ClassText {
            definition: c.definition.clone(),
            exclusions: c.exclusions.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let body = fs::read_to_string(path)?;
        serde_json::from_str(&body).map_err(|e| PromptError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prompt spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub hash: String,
    pub tokens: usize,
}

fn render_class_line(out: &mut String, indent: &str, alias: &str, text: &ClassText) {
    out.push_str(indent);
    out.push_str("- ");
    out.push_str(alias);
    out.push(':');
    if !text.definition.trim().is_empty() {
        out.push(' ');
        out.push_str(text.definition.trim());
    }
    if !text.exclusions.is_empty() {
        out.push_str(" Exclude: ");
        out.push_str(&text.exclusions.join("; "));
        out.push('.');
    }
    out.push('\n');
}

/// The expected-output line for a label, in alias form.
pub fn output_line(schema: &ClassSchema, label: &Label) -> Option<String> {
    let parent = schema.parent_alias(&label.parent)?;
    let v = match &label.child {
        Some(_) => json!({"parent": parent, "child": schema.alias_of(label)?}),
        None => json!({"parent": parent}),
    };
    Some(v.to_string())
}

/// Renders the prompt template (everything but the document itself).
pub fn build_prompt(schema: &ClassSchema, spec: &PromptSpec) -> Result<RenderedPrompt, PromptError> {
    if spec.schema_version != schema.version {
        return Err(PromptError::SchemaMismatch {
            prompt: spec.schema_version,
            schema: schema.version,
        });
    }
    let ordered = spec.ordered_examples()?;
    for (index, ex) in spec.examples.iter().enumerate() {
        if !schema.contains(&ex.label()) {
            return Err(PromptError::OrphanExample {
                index,
                label: ex.label().to_string(),
            });
        }
    }

    let mut out = String::new();
    out.push_str(TASK_CLASSIFY);
    out.push('\n');
    if !spec.preamble.trim().is_empty() {
        out.push_str(spec.preamble.trim());
        out.push('\n');
    }
    out.push('\n');
    out.push_str(SECTION_CLASSES);
    out.push('\n');
    for parent in &schema.parents {
        let text = spec
            .class_text(schema, &parent.internal_name)
            .expect("parent exists");
        render_class_line(&mut out, "", &parent.external_alias, &text);
        for child in &parent.children {
            let key = format!("{}/{}", parent.internal_name, child.internal_name);
            let text = spec.class_text(schema, &key).expect("child exists");
            render_class_line(&mut out, "  ", &child.external_alias, &text);
        }
    }

    if !ordered.is_empty() {
        out.push('\n');
        out.push_str(SECTION_EXAMPLES);
        out.push('\n');
        for (i, ex) in ordered.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str("Description:\n");
            out.push_str(&serde_json::to_string(ex.text.trim()).expect("string serializes"));
            out.push_str("\nExpected Output:\n");
            out.push_str(&output_line(schema, &ex.label()).expect("validated above"));
            out.push('\n');
        }
    }

    if spec.cot_enabled {
        out.push('\n');
        out.push_str(SECTION_REASONING);
        out.push('\n');
        out.push_str(COT_INSTRUCTION);
        out.push('\n');
    }

    out.push('\n');
    out.push_str(SECTION_OUTPUT);
    out.push('\n');
    out.push_str(OUTPUT_INSTRUCTION);
    out.push('\n');

    Ok(RenderedPrompt {
        hash: canonical::sha256_hex(out.as_bytes()),
        tokens: estimate_tokens(&out),
        text: out,
    })
}

/// Appends the document block to a rendered template.
pub fn with_document(template: &str, document: &str) -> String {
    let mut out = String::with_capacity(template.len() + document.len() + 32);
    out.push_str(template);
    if !template.ends_with('\n') {
        out.push('\n');
    }
    out.push('\n');
    out.push_str(SECTION_DOCUMENT);
    out.push('\n');
    out.push_str(DOC_OPEN);
    out.push('\n');
    out.push_str(document);
    out.push('\n');
    out.push_str(DOC_CLOSE);
    out.push('\n');
    out
}

/// Produces iteration t+1 from iteration t by applying human-authored
/// definition edits.
pub fn refine_prompt(
    schema: &ClassSchema,
    spec: &PromptSpec,
    edits: &[DefinitionEdit],
    alignment_snapshot: Option<String>,
) -> Result<PromptSpec, PromptError> {
    let mut next = spec.clone();
    for edit in edits {
        let key = edit.class();
        let mut text = next
            .class_text(schema, key)
            .ok_or_else(|| PromptError::UnknownClass(key.to_string()))?;
        match edit {
            DefinitionEdit::SetDefinition { text: t, .. } => text.definition = t.clone(),
            DefinitionEdit::AddExclusion { text: t, .. } => text.exclusions.push(t.clone()),
            DefinitionEdit::RemoveExclusion { text: t, .. } => {
                let pos = text.exclusions.iter().position(|e| e == t).ok_or_else(|| {
                    PromptError::MissingExclusion {
                        class: key.to_string(),
                        text: t.clone(),
                    }
                })?;
                text.exclusions.remove(pos);
            }
        }
        next.overrides.insert(key.to_string(), text);
    }
    let parent_hash = build_prompt(schema, spec)?.hash;
    next.parent_iteration = Some(spec.iteration);
    next.parent_hash = Some(parent_hash);
    next.iteration = spec.iteration + 1;
    next.audit.push(AuditRecord {
        iteration: next.iteration,
        edits: edits.to_vec(),
        alignment_snapshot,
        removed_segments: Vec::new(),
    });
    next.sealed(schema)
}

/// Follows `parent_hash` links through `known` specs back to iteration 0.
/// Returns the chain newest-first, or `None` if a link is missing.
///
/// A refinement without edits renders the same text as its parent, so the
/// hash alone is ambiguous; the parent must also sit one iteration lower.
pub fn lineage<'a>(spec: &'a PromptSpec, known: &'a [PromptSpec]) -> Option<Vec<&'a PromptSpec>> {
    let mut chain = vec![spec];
    let mut cur = spec;
    while cur.iteration > 0 {
        let parent_hash = cur.parent_hash.as_deref()?;
        let parent = known
            .iter()
            .find(|s| s.hash == parent_hash && s.iteration + 1 == cur.iteration)?;
        chain.push(parent);
        cur = parent;
    }
    Some(chain)
}

fn factorial_capped(k: usize, cap: usize) -> Option<usize> {
    let mut acc: usize = 1;
    for i in 2..=k {
        acc = acc.checked_mul(i)?;
        if acc > cap {
            return None;
        }
    }
    Some(acc)
}

fn next_lexicographic(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Orderings of `k` examples: all `k!` in lexicographic order when that fits
/// under `cap`, otherwise `cap` distinct orderings sampled with `seed`.
/// The identity ordering always comes first.
pub fn permutations(k: usize, cap: usize, seed: u64) -> Vec<Vec<usize>> {
    let cap = cap.max(1);
    let identity: Vec<usize> = (0..k).collect();
    if factorial_capped(k, cap).is_some() {
        let mut out = vec![identity.clone()];
        let mut p = identity;
        while next_lexicographic(&mut p) {
            out.push(p.clone());
        }
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    seen.insert(identity.clone());
    let mut out = vec![identity.clone()];
    while out.len() < cap {
        let mut p = identity.clone();
        p.shuffle(&mut rng);
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

/// Variance of class sizes; the balance signal for the refinement loop.
pub fn class_size_variance(sizes: &[u64]) -> f64 {
    if sizes.is_empty() {
        return 0.0;
    }
    let n = sizes.len() as f64;
    let mean = sizes.iter().sum::<u64>() as f64 / n;
    sizes.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n
}
