//! HTTP API behind the review screens. Labels only ever leave the server as
//! aliases; internal class names stay inside the store.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use taxonomist::alignment::{AlignmentMatrix, ClassDiagnostic};
use taxonomist::corpus::{Corpus, ProcessedDocument};
use taxonomist::drift::DriftReport;
use taxonomist::fewshot::{load_preferences, record_preference, reviewed_docs, FewshotError, PreferenceSource};
use taxonomist::gateway::ClassificationResult;
use taxonomist::schema::{ClassSchema, Label};
use taxonomist::store::{RunManifest, Store, StoreError};

use crate::commands::{ALIGNMENT_KIND, DIAGNOSTICS_KIND, DRIFT_KIND, DRIFT_LOG};
use crate::CliError;

pub struct AppState {
    pub store: Store,
    pub schema: ClassSchema,
    pub corpus: Option<Corpus>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/alignment/{run}", get(get_alignment))
        .route("/api/diagnostics/{run}", get(get_diagnostics))
        .route("/api/review/queue", get(review_queue))
        .route("/api/preferences", post(post_preference))
        .route("/api/drift/latest", get(latest_drift))
        .with_state(state)
}

/// Binds `127.0.0.1:port` and serves until the process is stopped.
pub fn run_blocking(port: u16, store: Store, schema: ClassSchema, corpus: Option<Corpus>) -> Result<(), CliError> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let app = router(Arc::new(AppState { store, schema, corpus }));
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|_| CliError::PortInUse(port))?;
        axum::serve(listener, app).await?;
        Ok(())
    })
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::NotFound(_) => StatusCode::NOT_FOUND,
            StoreError::Locked(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<FewshotError> for ApiError {
    fn from(e: FewshotError) -> Self {
        let status = match &e {
            FewshotError::LabelEqualsLoser(_) | FewshotError::UnknownLabel(_) | FewshotError::InvalidRound => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            FewshotError::DuplicateJudgment { .. } => StatusCode::CONFLICT,
            FewshotError::Store(StoreError::Locked(_)) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Alias for a stored class key: a parent name or `Parent/Child`.
fn alias_for(schema: &ClassSchema, key: &str) -> String {
    if let Some(a) = schema.parent_alias(key) {
        return a.to_string();
    }
    key.parse::<Label>()
        .ok()
        .and_then(|l| schema.alias_of(&l).map(str::to_string))
        .unwrap_or_else(|| "unknown".to_string())
}

fn label_alias(schema: &ClassSchema, label: &Label) -> String {
    schema.alias_of(label).map_or_else(|| "unknown".to_string(), str::to_string)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultView {
    pub doc_id: String,
    pub label: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<chrono::DateTime<Utc>>,
}

fn view(schema: &ClassSchema, r: &ClassificationResult) -> ResultView {
    ResultView {
        doc_id: r.doc_id.clone(),
        label: label_alias(schema, &r.label()),
        latency_ms: r.latency_ms,
        timestamp: r.timestamp,
    }
}

async fn list_runs(State(s): State<Arc<AppState>>) -> ApiResult<Vec<RunManifest>> {
    Ok(Json(s.store.list_runs()?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunView {
    pub manifest: RunManifest,
    pub results: Vec<ResultView>,
}

async fn get_run(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<RunView> {
    let record = s.store.load_run(&id)?;
    Ok(Json(RunView {
        manifest: s.store.load_manifest(&id)?,
        results: record.results.iter().map(|r| view(&s.schema, r)).collect(),
    }))
}

async fn get_alignment(State(s): State<Arc<AppState>>, Path(run): Path<String>) -> ApiResult<AlignmentMatrix> {
    let mut m: AlignmentMatrix = s.store.get_artifact(ALIGNMENT_KIND, &run)?;
    m.rows = m.rows.iter().map(|r| alias_for(&s.schema, r)).collect();
    Ok(Json(m))
}

async fn get_diagnostics(State(s): State<Arc<AppState>>, Path(run): Path<String>) -> ApiResult<Vec<ClassDiagnostic>> {
    let mut d: Vec<ClassDiagnostic> = s.store.get_artifact(DIAGNOSTICS_KIND, &run)?;
    for row in &mut d {
        row.class_name = alias_for(&s.schema, &row.class_name);
    }
    Ok(Json(d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub doc_id: String,
    pub text: Option<String>,
    pub candidate_a: String,
    pub candidate_b: String,
    pub context: Value,
}

/// Documents on which the two most recent runs disagree and that nobody
/// has judged yet.
async fn review_queue(State(s): State<Arc<AppState>>) -> ApiResult<Vec<QueueItem>> {
    let mut runs = s.store.list_runs()?;
    runs.sort_by(|a, b| (a.started, &a.run_id).cmp(&(b.started, &b.run_id)));
    let [.., previous, latest] = runs.as_slice() else {
        return Ok(Json(Vec::new()));
    };
    let latest = s.store.load_run(&latest.run_id)?;
    let previous = s.store.load_run(&previous.run_id)?;
    let before: BTreeMap<&str, &ClassificationResult> =
        previous.results.iter().map(|r| (r.doc_id.as_str(), r)).collect();
    let reviewed = reviewed_docs(&load_preferences(&s.store)?);
    let items = latest
        .results
        .iter()
        .filter(|r| !reviewed.contains(&r.doc_id))
        .filter_map(|r| {
            let old = before.get(r.doc_id.as_str())?;
            (old.label() != r.label()).then(|| QueueItem {
                doc_id: r.doc_id.clone(),
                text: s.corpus.as_ref().and_then(|c| c.get(&r.doc_id)).map(|d| d.text.clone()),
                candidate_a: label_alias(&s.schema, &r.label()),
                candidate_b: label_alias(&s.schema, &old.label()),
                context: json!({ "latest_run": latest.run_id, "previous_run": previous.run_id }),
            })
        })
        .collect();
    Ok(Json(items))
}

#[derive(Debug, Clone, Deserialize)]
pub struct PreferenceBody {
    pub doc_id: String,
    pub y_w: String,
    pub y_l: String,
    pub reviewer: String,
    #[serde(default = "first_round")]
    pub round: u32,
}

fn first_round() -> u32 {
    1
}

async fn post_preference(
    State(s): State<Arc<AppState>>,
    Json(body): Json<PreferenceBody>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let resolve = |alias: &str| {
        s.schema
            .resolve_alias(alias)
            .ok_or_else(|| ApiError(StatusCode::UNPROCESSABLE_ENTITY, format!("unknown label {alias:?}")))
    };
    let (w, l) = (resolve(&body.y_w)?, resolve(&body.y_l)?);
    let doc = ProcessedDocument::from_text(body.doc_id.clone(), "");
    let pair = record_preference(&s.store, &s.schema, &doc, w, l, &body.reviewer, PreferenceSource::Human, body.round, Utc::now())?;
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "doc_id": pair.doc_id,
            "y_w": body.y_w,
            "y_l": body.y_l,
            "reviewer": pair.reviewer,
            "round": pair.round,
            "created_at": pair.created_at,
        })),
    ))
}

async fn latest_drift(State(s): State<Arc<AppState>>) -> ApiResult<DriftReport> {
    let reports: Vec<DriftReport> = s.store.read_log(DRIFT_KIND, DRIFT_LOG)?;
    let mut report = reports
        .into_iter()
        .last()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "no drift report yet".into()))?;
    let schema = &s.schema;
    for a in &mut report.pchart_alerts {
        a.class = alias_for(schema, &a.class);
    }
    let remap = |m: &BTreeMap<String, f64>| m.iter().map(|(k, v)| (alias_for(schema, k), *v)).collect();
    report.cohesion = remap(&report.cohesion);
    report.cohesion_baseline = remap(&report.cohesion_baseline);
    report.cohesion_history = report.cohesion_history.iter().map(remap).collect();
    for t in &mut report.novel_topics {
        t.nearest_class = alias_for(schema, &t.nearest_class);
    }
    Ok(Json(report))
}
