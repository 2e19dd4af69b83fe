//! Post-deployment monitoring.
//!
//! Four signals, each computed on its own and then folded into one verdict:
//!
//! * distribution — chi-squared homogeneity between a reference and a current
//!   window, plus 3σ p-chart limits per class;
//! * cohesion — mean cosine distance of a window's documents to their class
//!   centroid, frozen from a stable window;
//! * novelty — emergent topics that sit far from every class definition;
//! * golden — macro-F1 on a fixed labelled set, tracked per prompt hash.
//!
//! The verdict is a pure function of the serialized signals and thresholds,
//! so a stored [`DriftReport`] can be replayed under different settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, ProcessedDocument};
use crate::fewshot::{cosine_similarity, FewshotError};
use crate::gateway::{discover_topics, embed, Backend, ClassificationResult, EmbeddingVector, GatewayError};
use crate::schema::{ClassSchema, Label, Topic};
use crate::stats::{chi2_homogeneity, class_distribution, ClassDistribution, StatsError, TestResult};
use crate::store::{GoldenSet, Store, StoreError};

pub const DEFAULT_TAU: f64 = 0.35;
pub const DEFAULT_EROSION_MARGIN: f64 = 0.1;
pub const DEFAULT_EROSION_WINDOWS: usize = 2;
pub const DEFAULT_F1_DROP: f64 = 0.1;
pub const DEFAULT_WINDOW_DAYS: i64 = 7;
pub const DEFAULT_WINDOW_COUNT: usize = 1000;

const METRICS_KIND: &str = "metrics";
const METRICS_LOG: &str = "golden";

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("golden set is empty")]
    EmptyGoldenSet,
    #[error("result {0} has no timestamp")]
    MissingTimestamp(String),
    #[error("result {doc_id} at {at} falls outside window [{start}, {end})")]
    OutOfWindow {
        doc_id: String,
        at: DateTime<Utc>,
        start: DateTime<Utc>,
        end: DateTime<Utc>,
    },
    #[error("windows were classified against different class lists")]
    SchemaMismatch,
    #[error("embeddings come from different providers or dimensions: {0}")]
    ProviderMismatch(String),
    #[error("no embedding for document {0}")]
    MissingEmbedding(String),
    #[error("members of {0} cancel out; centroid direction is undefined")]
    ZeroCentroid(String),
    #[error("no centroid for class {0}")]
    MissingCentroid(String),
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(Box<GatewayError>),
}

impl From<GatewayError> for DriftError {
    fn from(e: GatewayError) -> Self {
        DriftError::Gateway(Box::new(e))
    }
}

fn similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, DriftError> {
    match cosine_similarity(u, v) {
        Ok(s) => Ok(s),
        // a zero vector points nowhere: treat it as unrelated
        Err(FewshotError::ZeroVector) => Ok(0.0),
        Err(e) => Err(DriftError::ProviderMismatch(e.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Windows

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub id: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub results: Vec<ClassificationResult>,
    pub distribution: ClassDistribution,
}

impl Window {
    /// Builds a window and checks every result falls in `[start, end)`.
    pub fn new(
        id: impl Into<String>,
        start: DateTime<Utc>,
        end: DateTime<Utc>,
        results: Vec<ClassificationResult>,
        schema: &ClassSchema,
    ) -> Result<Self, DriftError> {
        for r in &results {
            let at = r.timestamp.ok_or_else(|| DriftError::MissingTimestamp(r.doc_id.clone()))?;
            if at < start || at >= end {
                return Err(DriftError::OutOfWindow {
                    doc_id: r.doc_id.clone(),
                    at,
                    start,
                    end,
                });
            }
        }
        let distribution = class_distribution(&results, schema);
        Ok(Self {
            id: id.into(),
            start,
            end,
            results,
            distribution,
        })
    }

    /// (doc_id, parent class) for every result.
    pub fn assignments(&self) -> Vec<(String, String)> {
        self.results.iter().map(|r| (r.doc_id.clone(), r.parent.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowPolicy {
    pub days: i64,
    pub max_count: usize,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        Self {
            days: DEFAULT_WINDOW_DAYS,
            max_count: DEFAULT_WINDOW_COUNT,
        }
    }
}

/// Splits timestamped results into consecutive windows. A window opens at
/// its first result and closes after `policy.days` or `policy.max_count`
/// results, whichever comes first. Ids are `w0001`, `w0002`, …
pub fn split_windows(
    results: &[ClassificationResult],
    schema: &ClassSchema,
    policy: WindowPolicy,
) -> Result<Vec<Window>, DriftError> {
    if policy.days <= 0 || policy.max_count == 0 {
        return Err(DriftError::InvalidThreshold("window length must be positive".into()));
    }
    let mut sorted = Vec::with_capacity(results.len());
    for r in results {
        let at = r.timestamp.ok_or_else(|| DriftError::MissingTimestamp(r.doc_id.clone()))?;
        sorted.push((at, r));
    }
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.doc_id.cmp(&b.1.doc_id)));

    let span = Duration::days(policy.days);
    let mut windows = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let start = sorted[i].0;
        let limit = start + span;
        let mut j = i;
        while j < sorted.len() && sorted[j].0 < limit && j - i < policy.max_count {
            j += 1;
        }
        // results sharing an instant stay together, even past the count cap
        while j < sorted.len() && j > i && sorted[j].0 == sorted[j - 1].0 {
            j += 1;
        }
        let end = if j < sorted.len() && sorted[j].0 < limit { sorted[j].0 } else { limit };
        let members = sorted[i..j].iter().map(|(_, r)| (*r).clone()).collect();
        windows.push(Window::new(format!("w{:04}", windows.len() + 1), start, end, members, schema)?);
        i = j;
    }
    Ok(windows)
}

// ---------------------------------------------------------------------------
// Distribution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PChartAlert {
    pub class: String,
    pub proportion: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Chi-squared homogeneity between the windows, and p-chart alerts for every
/// class whose current share leaves `p̄ ± 3·√(p̄(1−p̄)/n)`, with p̄ taken from
/// the reference window and n the current window's size.
pub fn distributional_drift(
    reference: &Window,
    current: &Window,
    alpha: f64,
) -> Result<(TestResult, Vec<PChartAlert>), DriftError> {
    let (r, c) = (&reference.distribution, &current.distribution);
    if r.labels != c.labels {
        return Err(DriftError::SchemaMismatch);
    }
    let test = chi2_homogeneity(r, c, alpha)?;
    Ok((test, pchart_alerts(r, c)))
}

pub fn pchart_alerts(reference: &ClassDistribution, current: &ClassDistribution) -> Vec<PChartAlert> {
    if reference.total == 0 || current.total == 0 {
        return Vec::new();
    }
    let n = current.total as f64;
    let mut alerts = Vec::new();
    for (i, class) in reference.labels.iter().enumerate() {
        let p_bar = reference.counts[i] as f64 / reference.total as f64;
        let p = current.counts[i] as f64 / n;
        let sigma = (p_bar * (1.0 - p_bar) / n).sqrt();
        let (lower, upper) = ((p_bar - 3.0 * sigma).max(0.0), (p_bar + 3.0 * sigma).min(1.0));
        let outside = if sigma == 0.0 {
            p != p_bar
        } else {
            (p - p_bar).abs() > 3.0 * sigma
        };
        if outside {
            alerts.push(PChartAlert {
                class: class.clone(),
                proportion: p,
                lower,
                upper,
            });
        }
    }
    alerts
}

// ---------------------------------------------------------------------------
// Cohesion

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroid {
    pub class_name: String,
    pub vector: EmbeddingVector,
    pub member_count: usize,
    pub frozen_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CentroidSet {
    pub centroids: BTreeMap<String, ClassCentroid>,
    /// Classes with fewer than the minimum number of members.
    pub omitted: Vec<String>,
}

/// Normalized mean embedding per parent class of `stable`.
pub fn compute_centroids(
    stable: &Window,
    embeddings: &BTreeMap<String, EmbeddingVector>,
    min_members: usize,
) -> Result<CentroidSet, DriftError> {
    let mut members: BTreeMap<&str, Vec<&EmbeddingVector>> = BTreeMap::new();
    for r in &stable.results {
        let e = embeddings
            .get(&r.doc_id)
            .ok_or_else(|| DriftError::MissingEmbedding(r.doc_id.clone()))?;
        members.entry(r.parent.as_str()).or_default().push(e);
    }
    let mut out = CentroidSet::default();
    let mut provider: Option<(&str, usize)> = None;
    for (class, vecs) in members {
        for v in &vecs {
            match provider {
                None => provider = Some((&v.provider_id, v.dim)),
                Some((p, d)) if p != v.provider_id || d != v.dim || v.values.len() != d => {
                    return Err(DriftError::ProviderMismatch(format!("{p}/{d} vs {}/{}", v.provider_id, v.dim)));
                }
                Some(_) => {}
            }
        }
        if vecs.len() < min_members.max(1) {
            out.omitted.push(class.to_string());
            continue;
        }
        let dim = vecs[0].dim;
        let mut mean = vec![0.0; dim];
        for v in &vecs {
            for (m, x) in mean.iter_mut().zip(&v.values) {
                *m += x / vecs.len() as f64;
            }
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(DriftError::ZeroCentroid(class.to_string()));
        }
        mean.iter_mut().for_each(|x| *x /= norm);
        out.centroids.insert(
            class.to_string(),
            ClassCentroid {
                class_name: class.to_string(),
                vector: EmbeddingVector::new(mean, vecs[0].provider_id.clone()),
                member_count: vecs.len(),
                frozen_at: stable.id.clone(),
            },
        );
    }
    Ok(out)
}

/// S_j: mean cosine distance from each assigned document to its class
/// centroid. Classes with no documents are absent from the map.
pub fn cohesion(
    new_docs: &[(String, String)],
    centroids: &BTreeMap<String, ClassCentroid>,
    embeddings: &BTreeMap<String, EmbeddingVector>,
) -> Result<BTreeMap<String, f64>, DriftError> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (doc_id, class) in new_docs {
        let c = centroids
            .get(class)
            .ok_or_else(|| DriftError::MissingCentroid(class.clone()))?;
        let e = embeddings
            .get(doc_id)
            .ok_or_else(|| DriftError::MissingEmbedding(doc_id.clone()))?;
        let distance = 1.0 - similarity(e, &c.vector)?;
        let slot = sums.entry(class.clone()).or_insert((0.0, 0));
        slot.0 += distance;
        slot.1 += 1;
    }
    Ok(sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

// ---------------------------------------------------------------------------
// Novelty

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelTopic {
    pub topic: String,
    pub description: String,
    pub max_similarity: f64,
    /// Class key of the closest definition.
    pub nearest_class: String,
}

/// Scores every topic against every class definition and keeps those whose
/// best similarity is strictly below `tau`.
pub fn topic_similarities(
    topics: &[Topic],
    schema: &ClassSchema,
    tau: f64,
    backend: &dyn Backend,
) -> Result<(Vec<NovelTopic>, Vec<NovelTopic>), DriftError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(DriftError::InvalidThreshold(format!("tau must be in (0, 1), got {tau}")));
    }
    let mut defs = Vec::new();
    for (key, class) in schema.all_classes() {
        defs.push((key, embed(backend, &class.definition)?));
    }
    let mut scored = Vec::new();
    for t in topics {
        let text = if t.description.trim().is_empty() { &t.name } else { &t.description };
        let e = embed(backend, text)?;
        let mut best = (f64::NEG_INFINITY, String::new());
        for (key, d) in &defs {
            let s = similarity(&e, d)?;
            if s > best.0 {
                best = (s, key.clone());
            }
        }
        scored.push(NovelTopic {
            topic: t.name.clone(),
            description: t.description.clone(),
            max_similarity: if defs.is_empty() { 0.0 } else { best.0 },
            nearest_class: best.1,
        });
    }
    let novel = scored.iter().filter(|t| t.max_similarity < tau).cloned().collect();
    Ok((scored, novel))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyConfig {
    pub tau: f64,
    pub max_topics: usize,
    pub topic_prompt: String,
    pub workers: usize,
}

impl Default for NoveltyConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            max_topics: 20,
            topic_prompt: crate::gateway::DEFAULT_TOPIC_PROMPT.into(),
            workers: 1,
        }
    }
}

/// Discovers topics on a recent sample and returns the novel ones.
pub fn novelty_scan(
    recent: &Corpus,
    schema: &ClassSchema,
    config: &NoveltyConfig,
    backend: &dyn Backend,
) -> Result<Vec<NovelTopic>, DriftError> {
    let found = discover_topics(recent, &config.topic_prompt, config.max_topics, backend, config.workers)?;
    let (_, novel) = topic_similarities(&found.topics.topics, schema, config.tau, backend)?;
    Ok(novel)
}

// ---------------------------------------------------------------------------
// Golden set

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.fp + self.fn_ + self.tn)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 { 0.0 } else { a as f64 / b as f64 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// Macro averages over every class seen in gold labels or predictions.
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    /// Exact match on (parent, child).
    pub accuracy: f64,
    /// Responses that could not be read as a label.
    pub invalid: usize,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

impl MetricsReport {
    /// One-vs-rest counts for `class` (zeros when it never occurs).
    pub fn confusion(&self, class: &str) -> Confusion {
        self.per_class.get(class).map(|m| m.confusion).unwrap_or_default()
    }
}

/// Scores `classify` against the golden set.
///
/// A response that cannot be read as a label counts as a miss for the gold
/// class and as nobody's false positive. Any other gateway error aborts.
pub fn golden_eval<F>(golden: &GoldenSet, mut classify: F) -> Result<MetricsReport, DriftError>
where
    F: FnMut(&ProcessedDocument) -> Result<Label, GatewayError>,
{
    if golden.is_empty() {
        return Err(DriftError::EmptyGoldenSet);
    }
    let mut pairs: Vec<(String, Option<String>)> = Vec::with_capacity(golden.len());
    for entry in &golden.entries {
        let predicted = match classify(&entry.document()) {
            Ok(l) => Some(l.to_string()),
            Err(e) if e.is_label_error() => None,
            Err(e) => return Err(e.into()),
        };
        pairs.push((entry.label().to_string(), predicted));
    }
    Ok(metrics_from_pairs(&pairs))
}

/// Metrics from (gold, predicted) label keys; `None` marks an unreadable
/// prediction.
pub fn metrics_from_pairs(pairs: &[(String, Option<String>)]) -> MetricsReport {
    let classes: BTreeSet<&str> = pairs
        .iter()
        .flat_map(|(g, p)| std::iter::once(g.as_str()).chain(p.as_deref()))
        .collect();
    let mut per_class = BTreeMap::new();
    for class in &classes {
        let mut c = Confusion::default();
        for (gold, pred) in pairs {
            let is_gold = gold == class;
            let is_pred = pred.as_deref() == Some(*class);
            match (is_gold, is_pred) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        per_class.insert(
            class.to_string(),
            ClassMetrics {
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                support: c.tp + c.fn_,
                confusion: c,
            },
        );
    }
    let k = per_class.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / k;
    MetricsReport {
        n: pairs.len(),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        accuracy: ratio(
            pairs.iter().filter(|(g, p)| p.as_deref() == Some(g.as_str())).count() as u64,
            pairs.len() as u64,
        ),
        invalid: pairs.iter().filter(|(_, p)| p.is_none()).count(),
        per_class,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    pub prompt_hash: String,
    pub at: DateTime<Utc>,
    pub golden: String,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Appends a golden evaluation to the store's metrics series.
pub fn record_metrics(
    store: &Store,
    prompt_hash: &str,
    golden: &str,
    at: DateTime<Utc>,
    report: &MetricsReport,
) -> Result<MetricsPoint, DriftError> {
    let point = MetricsPoint {
        prompt_hash: prompt_hash.into(),
        at,
        golden: golden.into(),
        macro_f1: report.macro_f1,
        accuracy: report.accuracy,
    };
    store.append(METRICS_KIND, METRICS_LOG, &point)?;
    Ok(point)
}

/// The metrics series, oldest first; restricted to one prompt when given.
pub fn metrics_series(store: &Store, prompt_hash: Option<&str>) -> Result<Vec<MetricsPoint>, DriftError> {
    let mut points: Vec<MetricsPoint> = store.read_log(METRICS_KIND, METRICS_LOG)?;
    if let Some(h) = prompt_hash {
        points.retain(|p| p.prompt_hash == h);
    }
    points.sort_by_key(|p| p.at);
    Ok(points)
}

// ---------------------------------------------------------------------------
// Verdict

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftVerdict {
    Stable,
    DistributionShift,
    CohesionErosion,
    ConceptualGap,
    Degraded,
}

impl DriftVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Stable => "stable",
            Self::DistributionShift => "distribution_shift",
            Self::CohesionErosion => "cohesion_erosion",
            Self::ConceptualGap => "conceptual_gap",
            Self::Degraded => "degraded",
        }
    }
}

impl fmt::Display for DriftVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftThresholds {
    pub alpha: f64,
    pub tau: f64,
    pub erosion_margin: f64,
    /// Consecutive exceedances needed for erosion (at least 2).
    pub erosion_windows: usize,
    pub f1_drop: f64,
}

impl Default for DriftThresholds {
    fn default() -> Self {
        Self {
            alpha: crate::stats::DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            erosion_margin: DEFAULT_EROSION_MARGIN,
            erosion_windows: DEFAULT_EROSION_WINDOWS,
            f1_drop: DEFAULT_F1_DROP,
        }
    }
}

impl DriftThresholds {
    pub fn validate(&self) -> Result<(), DriftError> {
        if self.erosion_windows < 2 {
            return Err(DriftError::InvalidThreshold("erosion needs at least 2 windows".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(DriftError::InvalidThreshold(format!("alpha {}", self.alpha)));
        }
        Ok(())
    }
}

/// Everything the verdict depends on, already computed.
#[derive(Debug, Clone, Default)]
pub struct DriftInputs {
    /// Frozen S_j per class from the stable window.
    pub cohesion_baseline: BTreeMap<String, f64>,
    /// S_j per window, oldest first, ending with the current window.
    pub cohesion_history: Vec<BTreeMap<String, f64>>,
    pub novel_topics: Vec<NovelTopic>,
    /// Golden macro-F1 across runs, oldest first.
    pub golden_trend: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub reference: String,
    pub current: String,
    /// Absent when the test could not be computed; see `errors`.
    pub chi2: Option<TestResult>,
    pub pchart_alerts: Vec<PChartAlert>,
    pub cohesion: BTreeMap<String, f64>,
    pub cohesion_baseline: BTreeMap<String, f64>,
    pub cohesion_history: Vec<BTreeMap<String, f64>>,
    pub novel_topics: Vec<NovelTopic>,
    pub golden_trend: Vec<f64>,
    pub thresholds: DriftThresholds,
    pub verdict: DriftVerdict,
    pub errors: Vec<String>,
}

impl DriftReport {
    /// Recomputes the verdict from the stored signals.
    pub fn replay(&self, thresholds: &DriftThresholds) -> DriftVerdict {
        verdict(self, thresholds)
    }
}

/// Classes whose S_j exceeded baseline + margin in each of the last
/// `windows` entries of `history`.
pub fn eroding_classes(
    baseline: &BTreeMap<String, f64>,
    history: &[BTreeMap<String, f64>],
    margin: f64,
    windows: usize,
) -> Vec<String> {
    if windows == 0 || history.len() < windows {
        return Vec::new();
    }
    let recent = &history[history.len() - windows..];
    baseline
        .iter()
        .filter(|(class, base)| {
            recent
                .iter()
                .all(|w| w.get(*class).is_some_and(|s| *s > *base + margin))
        })
        .map(|(c, _)| c.clone())
        .collect()
}

fn verdict(report: &DriftReport, t: &DriftThresholds) -> DriftVerdict {
    let degraded = match (report.golden_trend.first(), report.golden_trend.last()) {
        (Some(first), Some(last)) if report.golden_trend.len() >= 2 => first - last > t.f1_drop,
        _ => false,
    };
    let novel = report.novel_topics.iter().any(|n| n.max_similarity < t.tau);
    let eroding = !eroding_classes(
        &report.cohesion_baseline,
        &report.cohesion_history,
        t.erosion_margin,
        t.erosion_windows.max(2),
    )
    .is_empty();
    let shifted = report.chi2.as_ref().is_some_and(|c| c.p_value < t.alpha) || !report.pchart_alerts.is_empty();
    if degraded {
        DriftVerdict::Degraded
    } else if novel {
        DriftVerdict::ConceptualGap
    } else if eroding {
        DriftVerdict::CohesionErosion
    } else if shifted {
        DriftVerdict::DistributionShift
    } else {
        DriftVerdict::Stable
    }
}

/// Combines the signals into one report. A failing chi-squared test (e.g.
/// both windows empty) is recorded in `errors` and the remaining signals
/// still decide the verdict.
pub fn evaluate_drift(
    reference: &Window,
    current: &Window,
    inputs: DriftInputs,
    thresholds: &DriftThresholds,
) -> Result<DriftReport, DriftError> {
    thresholds.validate()?;
    let mut errors = Vec::new();
    let (chi2, pchart_alerts) = match distributional_drift(reference, current, thresholds.alpha) {
        Ok((t, a)) => (Some(t), a),
        Err(DriftError::SchemaMismatch) => return Err(DriftError::SchemaMismatch),
        Err(e) => {
            errors.push(e.to_string());
            (None, pchart_alerts(&reference.distribution, &current.distribution))
        }
    };
    let mut report = DriftReport {
        reference: reference.id.clone(),
        current: current.id.clone(),
        chi2,
        pchart_alerts,
        cohesion: inputs.cohesion_history.last().cloned().unwrap_or_default(),
        cohesion_baseline: inputs.cohesion_baseline,
        cohesion_history: inputs.cohesion_history,
        novel_topics: inputs.novel_topics,
        golden_trend: inputs.golden_trend,
        thresholds: *thresholds,
        verdict: DriftVerdict::Stable,
        errors,
    };
    report.verdict = verdict(&report, thresholds);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, MockProfile};
    use crate::schema::ClassDef;
    use crate::store::GoldenEntry;
    use approx::assert_abs_diff_eq;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t(h: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap() + Duration::hours(h)
    }

    fn two_class() -> ClassSchema {
        ClassSchema::new(1, vec![ClassDef::new("A", "first"), ClassDef::new("B", "second")])
    }

    fn res(id: &str, parent: &str, h: i64) -> ClassificationResult {
        ClassificationResult {
            doc_id: id.into(),
            parent: parent.into(),
            child: None,
            raw_response: String::new(),
            prompt_hash: "p".into(),
            backend_id: "mock".into(),
            latency_ms: 0,
            timestamp: Some(t(h)),
        }
    }

    fn window(id: &str, counts: &[(&str, usize)]) -> Window {
        let mut results = Vec::new();
        for (class, n) in counts {
            for _ in 0..*n {
                results.push(res(&format!("{id}-{}", results.len()), class, 1));
            }
        }
        Window::new(id, t(0), t(24), results, &two_class()).unwrap()
    }

    fn vector(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec(), "test")
    }

    #[test]
    fn identical_windows_are_quiet() {
        let w = window("w", &[("A", 30), ("B", 70)]);
        let (test, alerts) = distributional_drift(&w, &w, 0.05).unwrap();
        assert_eq!(test.statistic, 0.0);
        assert_abs_diff_eq!(test.p_value, 1.0, epsilon = 1e-12);
        assert!(alerts.is_empty());
    }

    #[test]
    fn thirty_seventy_versus_even_split() {
        let r = window("r", &[("A", 30), ("B", 70)]);
        let c = window("c", &[("A", 50), ("B", 50)]);
        let (test, alerts) = distributional_drift(&r, &c, 0.05).unwrap();
        assert_abs_diff_eq!(test.statistic, 25.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(test.p_value, 0.0039, epsilon = 5e-5);
        assert_eq!(alerts.len(), 2);
        assert_abs_diff_eq!(alerts[0].upper, 0.3 + 3.0 * (0.21f64 / 100.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn diffuse_shift_trips_only_chi2() {
        // five classes each moving by ~1σ: no single share leaves its 3σ
        // band, but the squared deviations add up
        let names = ["A", "B", "C", "D", "E"];
        let r = ClassDistribution::new(names.iter().map(|s| s.to_string()).collect(), vec![200, 200, 200, 200, 200]).unwrap();
        let c = ClassDistribution::new(r.labels.clone(), vec![235, 165, 235, 165, 200]).unwrap();
        let test = chi2_homogeneity(&r, &c, 0.05).unwrap();
        assert!(test.significant);
        assert!(pchart_alerts(&r, &c).is_empty());
    }

    #[test]
    fn window_bounds_are_checked() {
        let err = Window::new("w", t(0), t(1), vec![res("x", "A", 1)], &two_class()).unwrap_err();
        assert!(matches!(err, DriftError::OutOfWindow { .. }));
        let mut undated = res("y", "A", 0);
        undated.timestamp = None;
        assert!(matches!(
            Window::new("w", t(0), t(1), vec![undated], &two_class()),
            Err(DriftError::MissingTimestamp(_))
        ));
    }

    #[test]
    fn windows_close_on_time_or_count() {
        let results: Vec<_> = (0..10).map(|i| res(&format!("d{i}"), "A", i * 24)).collect();
        let ws = split_windows(&results, &two_class(), WindowPolicy { days: 3, max_count: 1000 }).unwrap();
        let sizes: Vec<usize> = ws.iter().map(|w| w.results.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let ws = split_windows(&results, &two_class(), WindowPolicy { days: 30, max_count: 4 }).unwrap();
        let sizes: Vec<usize> = ws.iter().map(|w| w.results.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(ws[0].end, ws[1].start);
        assert_eq!(ws[2].id, "w0003");
    }

    #[test]
    fn centroid_examples() {
        let stable = window("s", &[("A", 1), ("B", 2)]);
        let mut emb = BTreeMap::new();
        emb.insert("s-0".to_string(), vector(&[3.0, 4.0]));
        emb.insert("s-1".to_string(), vector(&[1.0, 0.0]));
        emb.insert("s-2".to_string(), vector(&[-1.0, 0.0]));
        assert!(matches!(compute_centroids(&stable, &emb, 1), Err(DriftError::ZeroCentroid(c)) if c == "B"));

        emb.insert("s-2".to_string(), vector(&[0.0, 1.0]));
        let set = compute_centroids(&stable, &emb, 1).unwrap();
        assert_eq!(set.centroids["A"].vector.values, vec![0.6, 0.8]);
        assert_eq!(set.centroids["A"].frozen_at, "s");

        let set = compute_centroids(&stable, &emb, 2).unwrap();
        assert_eq!(set.omitted, vec!["A".to_string()]);
        assert!(set.centroids.contains_key("B"));

        emb.insert("s-1".to_string(), EmbeddingVector::new(vec![1.0, 0.0], "other"));
        assert!(matches!(compute_centroids(&stable, &emb, 1), Err(DriftError::ProviderMismatch(_))));
    }

    fn centroid(class: &str, v: &[f64]) -> BTreeMap<String, ClassCentroid> {
        let mut m = BTreeMap::new();
        m.insert(
            class.to_string(),
            ClassCentroid {
                class_name: class.into(),
                vector: vector(v),
                member_count: 1,
                frozen_at: "s".into(),
            },
        );
        m
    }

    #[test]
    fn cohesion_examples() {
        let cents = centroid("A", &[1.0, 0.0]);
        let mut emb = BTreeMap::new();
        emb.insert("x".to_string(), vector(&[2.0, 0.0]));
        emb.insert("y".to_string(), vector(&[0.0, 1.0]));
        emb.insert("z".to_string(), vector(&[0.5, 0.75f64.sqrt()]));
        let s = cohesion(&[("x".into(), "A".into())], &cents, &emb).unwrap();
        assert_eq!(s["A"], 0.0);
        let s = cohesion(&[("z".into(), "A".into())], &cents, &emb).unwrap();
        assert_abs_diff_eq!(s["A"], 0.5, epsilon = 1e-12);
        let s = cohesion(&[("x".into(), "A".into()), ("y".into(), "A".into())], &cents, &emb).unwrap();
        assert_abs_diff_eq!(s["A"], 0.5, epsilon = 1e-12);
        assert!(!s.contains_key("B"));
        assert!(matches!(
            cohesion(&[("x".into(), "B".into())], &cents, &emb),
            Err(DriftError::MissingCentroid(_))
        ));
    }

    #[test]
    fn novelty_boundaries() {
        let backend = MockBackend::new(MockProfile::default()).unwrap();
        let schema = ClassSchema::new(
            1,
            vec![ClassDef::new("A", "apples and pears"), ClassDef::new("C", "login failures after update")],
        );
        let topic = |name: &str, d: &str| Topic {
            name: name.into(),
            description: d.into(),
        };
        let topics = vec![
            topic("Access", "login failures after update"),
            topic("Weather", "thunderstorms tomorrow evening"),
        ];
        let (all, novel) = topic_similarities(&topics, &schema, 0.35, &backend).unwrap();
        assert_abs_diff_eq!(all[0].max_similarity, 1.0, epsilon = 1e-12);
        assert_eq!(all[0].nearest_class, "C");
        assert_eq!(novel.len(), 1);
        assert_eq!(novel[0].topic, "Weather");
        assert_eq!(novel[0].max_similarity, 0.0);

        // a topic sharing one of two tokens with a one-token definition
        let schema = ClassSchema::new(1, vec![ClassDef::new("A", "apples")]);
        let (all, _) = topic_similarities(&[topic("x", "apples pears")], &schema, 0.5, &backend).unwrap();
        let s = all[0].max_similarity;
        assert_abs_diff_eq!(s, 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        let (_, novel) = topic_similarities(&[topic("x", "apples pears")], &schema, s, &backend).unwrap();
        assert!(novel.is_empty(), "similarity equal to tau is not novel");

        assert!(topic_similarities(&topics, &schema, 1.0, &backend).is_err());
    }

    fn golden(labels: &[&str]) -> GoldenSet {
        GoldenSet::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| GoldenEntry::new(format!("g{i}"), format!("doc {i}"), l.parse().unwrap()))
                .collect(),
        )
    }

    #[test]
    fn golden_perfect_and_hopeless() {
        let g = golden(&["A", "B", "A/x"]);
        let perfect = golden_eval(&g, |d| {
            let i: usize = d.id[1..].parse().unwrap();
            Ok(g.entries[i].label())
        })
        .unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.accuracy, perfect.macro_f1), (1.0, 1.0, 1.0, 1.0));

        let wrong = golden_eval(&g, |_| Ok(Label::parent("C"))).unwrap();
        assert_eq!(wrong.accuracy, 0.0);
        assert_eq!(wrong.macro_f1, 0.0);
    }

    #[test]
    fn golden_binary_confusion() {
        // 5 positives then 5 negatives; predict 4 of each right
        let g = golden(&["P", "P", "P", "P", "P", "N", "N", "N", "N", "N"]);
        let preds = ["P", "P", "P", "P", "N", "N", "N", "N", "N", "P"];
        let r = golden_eval(&g, |d| {
            let i: usize = d.id[1..].parse().unwrap();
            Ok(Label::parent(preds[i]))
        })
        .unwrap();
        let c = r.confusion("P");
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (4, 1, 1, 4));
        assert_abs_diff_eq!(c.precision(), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(c.recall(), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(c.accuracy(), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(r.accuracy, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(r.precision, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn golden_errors() {
        assert!(matches!(golden_eval(&GoldenSet::new(vec![]), |_| Ok(Label::parent("A"))), Err(DriftError::EmptyGoldenSet)));
        let g = golden(&["A", "B"]);
        let r = golden_eval(&g, |d| {
            if d.id == "g0" {
                Err(GatewayError::UnknownLabel("Z".into()))
            } else {
                Ok(Label::parent("B"))
            }
        })
        .unwrap();
        assert_eq!(r.invalid, 1);
        assert_eq!(r.confusion("A").fn_, 1);
        assert_eq!(r.confusion("B").fp, 0);
        assert!(matches!(golden_eval(&g, |_| Err(GatewayError::Timeout)), Err(DriftError::Gateway(_))));
    }

    #[test]
    fn metrics_series_per_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let r = metrics_from_pairs(&[("A".into(), Some("A".into()))]);
        record_metrics(&store, "h2", "g", t(5), &r).unwrap();
        record_metrics(&store, "h1", "g", t(1), &r).unwrap();
        record_metrics(&store, "h1", "g", t(0), &r).unwrap();
        let s = metrics_series(&store, Some("h1")).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s[0].at < s[1].at);
        assert_eq!(metrics_series(&store, None).unwrap().len(), 3);
    }

    fn novel(sim: f64) -> NovelTopic {
        NovelTopic {
            topic: "T".into(),
            description: String::new(),
            max_similarity: sim,
            nearest_class: "A".into(),
        }
    }

    #[test]
    fn verdict_precedence() {
        let th = DriftThresholds::default();
        let same = window("r", &[("A", 30), ("B", 70)]);
        let moved = window("c", &[("A", 50), ("B", 50)]);
        let r = evaluate_drift(&same, &same, DriftInputs::default(), &th).unwrap();
        assert_eq!(r.verdict, DriftVerdict::Stable);

        let r = evaluate_drift(&same, &moved, DriftInputs::default(), &th).unwrap();
        assert_eq!(r.verdict, DriftVerdict::DistributionShift);

        let gap = DriftInputs {
            novel_topics: vec![novel(0.0)],
            ..Default::default()
        };
        let r = evaluate_drift(&same, &moved, gap, &th).unwrap();
        assert_eq!(r.verdict, DriftVerdict::ConceptualGap);

        let base: BTreeMap<String, f64> = [("A".to_string(), 0.2)].into();
        let high: BTreeMap<String, f64> = [("A".to_string(), 0.35)].into();
        let once = DriftInputs {
            cohesion_baseline: base.clone(),
            cohesion_history: vec![base.clone(), high.clone()],
            ..Default::default()
        };
        assert_eq!(evaluate_drift(&same, &same, once, &th).unwrap().verdict, DriftVerdict::Stable);
        let twice = DriftInputs {
            cohesion_baseline: base.clone(),
            cohesion_history: vec![high.clone(), high.clone()],
            ..Default::default()
        };
        let r = evaluate_drift(&same, &moved, twice, &th).unwrap();
        assert_eq!(r.verdict, DriftVerdict::CohesionErosion);
        assert_eq!(r.cohesion, high);

        let degraded = DriftInputs {
            novel_topics: vec![novel(0.0)],
            golden_trend: vec![0.95, 0.70],
            ..Default::default()
        };
        let r = evaluate_drift(&same, &moved, degraded, &th).unwrap();
        assert_eq!(r.verdict, DriftVerdict::Degraded);

        // replaying under a looser drop threshold falls through to the gap
        let loose = DriftThresholds { f1_drop: 0.5, ..th };
        assert_eq!(r.replay(&loose), DriftVerdict::ConceptualGap);
        let back: DriftReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back.replay(&th), r.verdict);
    }

    #[test]
    fn empty_windows_give_a_partial_report() {
        let empty = Window::new("e", t(0), t(1), vec![], &two_class()).unwrap();
        let r = evaluate_drift(&empty, &empty, DriftInputs::default(), &DriftThresholds::default()).unwrap();
        assert!(r.chi2.is_none());
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.verdict, DriftVerdict::Stable);
        let bad = DriftThresholds {
            erosion_windows: 1,
            ..Default::default()
        };
        assert!(evaluate_drift(&empty, &empty, DriftInputs::default(), &bad).is_err());
    }

    proptest! {
        #[test]
        fn self_comparison_is_stable(a in 0usize..60, b in 0usize..60) {
            prop_assume!(a + b > 0);
            let w = window("w", &[("A", a), ("B", b)]);
            let r = evaluate_drift(&w, &w, DriftInputs::default(), &DriftThresholds::default()).unwrap();
            prop_assert_eq!(r.verdict, DriftVerdict::Stable);
            prop_assert!(r.pchart_alerts.is_empty());
        }

        #[test]
        fn cohesion_stays_in_range(vs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..10)) {
            let cents = centroid("A", &[0.3, -0.2, 0.9]);
            let mut emb = BTreeMap::new();
            let mut docs = Vec::new();
            for (i, v) in vs.iter().enumerate() {
                prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
                emb.insert(format!("d{i}"), vector(v));
                docs.push((format!("d{i}"), "A".to_string()));
            }
            let s = cohesion(&docs, &cents, &emb).unwrap()["A"];
            prop_assert!((0.0..=2.0).contains(&s));
        }
    }
}
