//! Few-shot refinement from preferences: capture (human or judge), rank
//! candidate examples by embedding similarity to their class description,
//! pick how many to show under a distribution-shift budget, and measure how
//! consistently reviewers judge.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, ProcessedDocument};
use crate::drift::{golden_eval, DriftError};
use crate::gateway::{
    embed, parse_winner, Backend, Classifier, CompletionRequest, EmbeddingVector, GatewayError,
};
use crate::prompting::{
    with_document, ExampleOrigin, FewShotExample, PromptSpec, SECTION_CANDIDATES, SECTION_OUTPUT,
    SECTION_PRINCIPLES, TASK_JUDGE,
};
use crate::schema::{ClassSchema, Label};
use crate::stats::{class_distribution, cohen_kappa, kl_divergence, ClassDistribution, StatsError};
use crate::store::{GoldenSet, Store, StoreError};

pub const PREFS_KIND: &str = "prefs";
pub const PREFS_LOG: &str = "pairs";
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FewshotError {
    #[error("embeddings differ in dimension or provider ({0})")]
    DimensionMismatch(String),
    #[error("cannot compare a zero vector")]
    ZeroVector,
    #[error("no description for class {0:?}")]
    MissingDescription(String),
    #[error("winning and losing labels are both {0:?}")]
    LabelEqualsLoser(String),
    #[error("{reviewer} already judged {doc_id} in round {round}")]
    DuplicateJudgment { doc_id: String, reviewer: String, round: u32 },
    #[error("label {0:?} is not in the schema")]
    UnknownLabel(String),
    #[error("round must be ≥ 1")]
    InvalidRound,
    #[error("judge needs exactly two distinct candidates")]
    CandidateCount,
    #[error("constitution has no principles")]
    EmptyConstitution,
    #[error("reviewers {0} and {1} share fewer than two documents")]
    InsufficientOverlap(String, String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Drift(Box<DriftError>),
}

impl From<DriftError> for FewshotError {
    fn from(e: DriftError) -> Self {
        match e {
            DriftError::Gateway(g) => FewshotError::Gateway(*g),
            other => FewshotError::Drift(Box::new(other)),
        }
    }
}

/// Cosine similarity, clamped to [−1, 1].
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, FewshotError> {
    if u.dim != v.dim || u.values.len() != v.values.len() || u.provider_id != v.provider_id {
        return Err(FewshotError::DimensionMismatch(format!(
            "{}/{} vs {}/{}",
            u.provider_id, u.dim, v.provider_id, v.dim
        )));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(FewshotError::ZeroVector);
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedExample {
    pub doc_id: String,
    /// Class key, `Parent` or `Parent/Child`.
    pub class_name: String,
    pub similarity: f64,
    pub text: String,
}

impl RankedExample {
    pub fn label(&self) -> Label {
        self.class_name.parse().expect("class keys parse as labels")
    }

    pub fn to_example(&self) -> FewShotExample {
        FewShotExample::new(&self.text, &self.label(), ExampleOrigin::Preference)
    }
}

/// Definition text for every class key, honoring prompt overrides.
pub fn class_descriptions(schema: &ClassSchema, spec: &PromptSpec) -> BTreeMap<String, String> {
    schema
        .all_classes()
        .into_iter()
        .filter_map(|(key, _)| spec.class_text(schema, &key).map(|t| (key, t.definition)))
        .collect()
}

/// Scores each candidate against its own class description and sorts by
/// similarity (descending), then doc id.
pub fn rank_examples(
    candidates: &[(ProcessedDocument, Label)],
    descriptions: &BTreeMap<String, String>,
    backend: &dyn Backend,
) -> Result<Vec<RankedExample>, FewshotError> {
    let mut desc_vecs: BTreeMap<&str, EmbeddingVector> = BTreeMap::new();
    for (_, label) in candidates {
        let key = label.to_string();
        let text = descriptions
            .get(&key)
            .ok_or_else(|| FewshotError::MissingDescription(key.clone()))?;
        if !desc_vecs.contains_key(key.as_str()) {
            let (k, _) = descriptions.get_key_value(&key).expect("checked above");
            desc_vecs.insert(k.as_str(), embed(backend, text)?);
        }
    }
    let mut ranked = Vec::with_capacity(candidates.len());
    for (doc, label) in candidates {
        let key = label.to_string();
        let e = embed(backend, &doc.text)?;
        let similarity = match cosine_similarity(&e, &desc_vecs[key.as_str()]) {
            Err(FewshotError::ZeroVector) => 0.0,
            other => other?,
        };
        ranked.push(RankedExample {
            doc_id: doc.id.clone(),
            class_name: key,
            similarity,
            text: doc.text.clone(),
        });
    }
    ranked.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KStep {
    pub k: usize,
    pub validity: f64,
    pub kl: f64,
    pub feasible: bool,
    pub distribution: ClassDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectKReport {
    pub k_star: usize,
    pub epsilon: f64,
    pub smoothing: f64,
    pub baseline: ClassDistribution,
    pub steps: Vec<KStep>,
    pub chosen: Vec<FewShotExample>,
}

/// Tries k = 0..=|ranked| top-ranked examples. Validity is macro-F1 on the
/// golden set; the distribution is over parent classes on `monitoring`.
/// Returns the best-scoring k whose KL divergence from `baseline` stays
/// within `epsilon` (smallest k on ties). Without a baseline, the k = 0
/// distribution is used.
#[allow(clippy::too_many_arguments)]
pub fn select_k(
    ranked: &[RankedExample],
    validation: &GoldenSet,
    monitoring: &Corpus,
    baseline: Option<&ClassDistribution>,
    base_spec: &PromptSpec,
    classifier: &Classifier,
    epsilon: f64,
    smoothing: f64,
) -> Result<SelectKReport, FewshotError> {
    let schema = classifier.schema();
    let mut steps: Vec<KStep> = Vec::with_capacity(ranked.len() + 1);
    let mut baseline = baseline.cloned();
    for k in 0..=ranked.len() {
        let spec = base_spec
            .clone()
            .with_examples(ranked[..k].iter().map(RankedExample::to_example).collect());
        let rendered = classifier.render(&spec)?;
        let validity = golden_eval(validation, |doc| classifier.label_rendered(doc, &rendered))?.macro_f1;
        let results = classifier.classify_batch(&monitoring.documents, &spec)?;
        let distribution = class_distribution(&results, schema);
        let base = baseline.get_or_insert_with(|| distribution.clone());
        let kl = kl_divergence(&distribution, base, smoothing)?;
        steps.push(KStep {
            k,
            validity,
            kl,
            feasible: kl <= epsilon,
            distribution,
        });
    }
    let best = steps
        .iter()
        .filter(|s| s.feasible)
        .fold(None::<&KStep>, |best, s| match best {
            Some(b) if b.validity >= s.validity => Some(b),
            _ => Some(s),
        })
        .map_or(0, |s| s.k);
    Ok(SelectKReport {
        k_star: best,
        epsilon,
        smoothing,
        baseline: baseline.expect("k = 0 always runs"),
        chosen: ranked[..best].iter().map(RankedExample::to_example).collect(),
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceSource {
    Human,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub doc_id: String,
    pub y_w: Label,
    pub y_l: Label,
    pub reviewer: String,
    pub source: PreferenceSource,
    pub round: u32,
    pub created_at: DateTime<Utc>,
}

/// Checks invariants and appends the pair to the store's preference log.
#[allow(clippy::too_many_arguments)]
pub fn record_preference(
    store: &Store,
    schema: &ClassSchema,
    doc: &ProcessedDocument,
    y_w: Label,
    y_l: Label,
    reviewer: &str,
    source: PreferenceSource,
    round: u32,
    created_at: DateTime<Utc>,
) -> Result<PreferencePair, FewshotError> {
    if y_w == y_l {
        return Err(FewshotError::LabelEqualsLoser(y_w.to_string()));
    }
    for l in [&y_w, &y_l] {
        if !schema.contains(l) {
            return Err(FewshotError::UnknownLabel(l.to_string()));
        }
    }
    if round == 0 {
        return Err(FewshotError::InvalidRound);
    }
    let lock = store.lock()?;
    let existing: Vec<PreferencePair> = store.read_log(PREFS_KIND, PREFS_LOG)?;
    if existing
        .iter()
        .any(|p| p.doc_id == doc.id && p.reviewer == reviewer && p.round == round)
    {
        return Err(FewshotError::DuplicateJudgment {
            doc_id: doc.id.clone(),
            reviewer: reviewer.into(),
            round,
        });
    }
    let pair = PreferencePair {
        doc_id: doc.id.clone(),
        y_w,
        y_l,
        reviewer: reviewer.into(),
        source,
        round,
        created_at,
    };
    store.append_locked(&lock, PREFS_KIND, PREFS_LOG, &pair)?;
    Ok(pair)
}

pub fn load_preferences(store: &Store) -> Result<Vec<PreferencePair>, FewshotError> {
    Ok(store.read_log(PREFS_KIND, PREFS_LOG)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constitution {
    pub principles: Vec<String>,
    pub version: u32,
}

impl Constitution {
    /// One principle per blank-line-separated paragraph.
    pub fn parse(body: &str, version: u32) -> Self {
        let principles = body
            .split("\n\n")
            .map(|p| p.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|p| !p.is_empty())
            .collect();
        Self { principles, version }
    }
}

const JUDGE_PREAMBLE: &str = "Two candidate codes were proposed for the document below. \
Decide which one fits it better, applying the principles in order.";

/// The judge prompt: principles, candidates (aliases and definitions), and
/// the document.
pub fn judge_prompt(
    schema: &ClassSchema,
    doc: &ProcessedDocument,
    candidates: &[Label; 2],
    constitution: &Constitution,
) -> Result<String, FewshotError> {
    let mut out = format!("{TASK_JUDGE}\n{JUDGE_PREAMBLE}\n\n{SECTION_PRINCIPLES}\n");
    for (i, p) in constitution.principles.iter().enumerate() {
        out.push_str(&format!("{}. {p}\n", i + 1));
    }
    out.push('\n');
    out.push_str(SECTION_CANDIDATES);
    out.push('\n');
    for c in candidates {
        let alias = schema.alias_of(c).ok_or_else(|| FewshotError::UnknownLabel(c.to_string()))?;
        let def = &schema.class(&c.to_string()).expect("label resolved").definition;
        out.push_str(&format!("- {alias}: {def}\n"));
    }
    out.push('\n');
    out.push_str(SECTION_OUTPUT);
    out.push_str("\nRespond with a single-line JSON object {\"winner\": \"<code>\"}.\n");
    Ok(with_document(&out, &doc.text))
}

/// Asks the backend to pick between two labels under a constitution.
#[allow(clippy::too_many_arguments)]
pub fn judge_preference(
    schema: &ClassSchema,
    doc: &ProcessedDocument,
    candidates: &[Label],
    constitution: &Constitution,
    backend: &dyn Backend,
    judge_id: &str,
    round: u32,
    created_at: DateTime<Utc>,
) -> Result<PreferencePair, FewshotError> {
    let [a, b] = candidates else {
        return Err(FewshotError::CandidateCount);
    };
    if a == b {
        return Err(FewshotError::CandidateCount);
    }
    if constitution.principles.is_empty() {
        return Err(FewshotError::EmptyConstitution);
    }
    let pair = [a.clone(), b.clone()];
    let prompt = judge_prompt(schema, doc, &pair, constitution)?;
    let completion = backend.complete(CompletionRequest {
        prompt: &prompt,
        doc_id: Some(&doc.id),
    })?;
    let winner = parse_winner(&completion.text)?;
    let picked = pair
        .iter()
        .position(|c| schema.alias_of(c).is_some_and(|al| al.eq_ignore_ascii_case(&winner)))
        .ok_or(GatewayError::WinnerNotCandidate(winner))?;
    Ok(PreferencePair {
        doc_id: doc.id.clone(),
        y_w: pair[picked].clone(),
        y_l: pair[1 - picked].clone(),
        reviewer: judge_id.into(),
        source: PreferenceSource::Judge,
        round,
        created_at,
    })
}

/// reviewer → doc_id → label.
pub type Judgments = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairKappa {
    pub a: String,
    pub b: String,
    pub shared: usize,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub inter: Vec<PairKappa>,
    /// Mean kappa between consecutive rounds, per reviewer.
    pub intra: BTreeMap<String, f64>,
    pub mean_inter: Option<f64>,
    pub mean_intra: Option<f64>,
}

fn kappa_between(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> (usize, Option<f64>) {
    let pairs: Vec<(&String, &String)> = a
        .iter()
        .filter_map(|(doc, la)| b.get(doc).map(|lb| (la, lb)))
        .collect();
    if pairs.len() < 2 {
        return (pairs.len(), None);
    }
    (pairs.len(), cohen_kappa(&pairs))
}

/// Cohen's kappa for every reviewer pair, and across rounds per reviewer.
pub fn agreement(
    judgments: &Judgments,
    rounds: &BTreeMap<String, Vec<BTreeMap<String, String>>>,
) -> Result<AgreementReport, FewshotError> {
    let reviewers: Vec<&String> = judgments.keys().collect();
    let mut inter = Vec::new();
    for (i, a) in reviewers.iter().enumerate() {
        for b in &reviewers[i + 1..] {
            let (shared, kappa) = kappa_between(&judgments[*a], &judgments[*b]);
            let kappa = kappa.ok_or_else(|| FewshotError::InsufficientOverlap((*a).clone(), (*b).clone()))?;
            inter.push(PairKappa {
                a: (*a).clone(),
                b: (*b).clone(),
                shared,
                kappa,
            });
        }
    }
    let mut intra = BTreeMap::new();
    for (reviewer, per_round) in rounds {
        if per_round.len() < 2 {
            continue;
        }
        let mut ks = Vec::new();
        for w in per_round.windows(2) {
            let (_, k) = kappa_between(&w[0], &w[1]);
            ks.push(k.ok_or_else(|| FewshotError::InsufficientOverlap(reviewer.clone(), reviewer.clone()))?);
        }
        intra.insert(reviewer.clone(), ks.iter().sum::<f64>() / ks.len() as f64);
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok(AgreementReport {
        mean_inter: mean(inter.iter().map(|p| p.kappa).collect()),
        mean_intra: mean(intra.values().copied().collect()),
        inter,
        intra,
    })
}

/// Turns stored pairs into judgment maps: each reviewer's latest round for
/// inter-rater agreement, and every round in order for intra-rater.
pub fn judgments_from_pairs(
    pairs: &[PreferencePair],
) -> (Judgments, BTreeMap<String, Vec<BTreeMap<String, String>>>) {
    let mut by_round: BTreeMap<String, BTreeMap<u32, BTreeMap<String, String>>> = BTreeMap::new();
    for p in pairs {
        by_round
            .entry(p.reviewer.clone())
            .or_default()
            .entry(p.round)
            .or_default()
            .insert(p.doc_id.clone(), p.y_w.to_string());
    }
    let latest = by_round
        .iter()
        .map(|(r, rounds)| (r.clone(), rounds.values().last().cloned().unwrap_or_default()))
        .collect();
    let rounds = by_round
        .into_iter()
        .map(|(r, rounds)| (r, rounds.into_values().collect()))
        .collect();
    (latest, rounds)
}

/// Documents with at least one preference record.
pub fn reviewed_docs(pairs: &[PreferencePair]) -> BTreeSet<String> {
    pairs.iter().map(|p| p.doc_id.clone()).collect()
}

#[cfg(test)]
mod tests;
