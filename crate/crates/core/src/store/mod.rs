//! Plain-directory persistence: runs, golden sets, preference records, and
//! derived artifacts, content-addressed by canonical-JSON digests.
//!
//! ```text
//! <root>/
//!   runs/<run_id>/manifest.json   runs/<run_id>/results.jsonl
//!   golden/  prefs/  windows/  alignment/  diagnostics/  drift/  prompts/ ...
//! ```
//!
//! Nothing is ever rewritten. Re-saving identical content is a no-op;
//! saving different content under an existing name is a conflict.

pub mod canonical;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ProcessedDocument;
use crate::gateway::ClassificationResult;
use crate::schema::{ClassSchema, Label};

pub const STORE_ENV: &str = "TAXONOMIST_STORE";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("integrity check failed for {item}: expected {expected}, found {actual}")]
    IntegrityError {
        item: String,
        expected: String,
        actual: String,
    },
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("golden set is empty")]
    EmptyGoldenSet,
    #[error("store is locked by another writer ({0}); remove the file if no writer is running")]
    Locked(PathBuf),
    #[error("{0} already exists with different content")]
    Conflict(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One classification pass over a corpus with one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub prompt_hash: String,
    pub schema_version: u32,
    pub backend_id: String,
    pub results: Vec<ClassificationResult>,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    prompt_hash: &'a str,
    schema_version: u32,
    backend_id: &'a str,
    results: &'a [ClassificationResult],
    started: &'a DateTime<Utc>,
    finished: &'a DateTime<Utc>,
}

impl RunRecord {
    /// Builds a record whose id is derived from its content.
    pub fn new(
        prompt_hash: impl Into<String>,
        schema_version: u32,
        backend_id: impl Into<String>,
        results: Vec<ClassificationResult>,
        started: DateTime<Utc>,
        finished: DateTime<Utc>,
    ) -> Result<Self, StoreError> {
        let mut record = Self {
            run_id: String::new(),
            prompt_hash: prompt_hash.into(),
            schema_version,
            backend_id: backend_id.into(),
            results,
            started,
            finished,
        };
        record.validate()?;
        record.run_id = record.content_id();
        Ok(record)
    }

    fn content_id(&self) -> String {
        let identity = RunIdentity {
            prompt_hash: &self.prompt_hash,
            schema_version: self.schema_version,
            backend_id: &self.backend_id,
            results: &self.results,
            started: &self.started,
            finished: &self.finished,
        };
        canonical::digest(&identity)[..16].to_string()
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if let Some(r) = self.results.iter().find(|r| r.prompt_hash != self.prompt_hash) {
            return Err(StoreError::InvalidRecord(format!(
                "result for {} carries prompt hash {} instead of {}",
                r.doc_id, r.prompt_hash, self.prompt_hash
            )));
        }
        if self.finished < self.started {
            return Err(StoreError::InvalidRecord("run finished before it started".into()));
        }
        Ok(())
    }

    pub fn result(&self, doc_id: &str) -> Option<&ClassificationResult> {
        self.results.iter().find(|r| r.doc_id == doc_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub prompt_hash: String,
    pub schema_version: u32,
    pub backend_id: String,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub result_count: usize,
    pub results_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenEntry {
    pub doc_id: String,
    pub text: String,
    pub parent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<String>,
}

impl GoldenEntry {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
            parent: label.parent,
            child: label.child,
        }
    }

    pub fn label(&self) -> Label {
        Label {
            parent: self.parent.clone(),
            child: self.child.clone(),
        }
    }

    pub fn document(&self) -> ProcessedDocument {
        ProcessedDocument::from_text(&self.doc_id, &self.text)
    }
}

/// Expert-labeled documents, with the labeling round they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenSet {
    pub entries: Vec<GoldenEntry>,
    pub provenance: String,
}

impl GoldenSet {
    pub fn new(entries: Vec<GoldenEntry>) -> Self {
        Self {
            entries,
            provenance: "memory".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn documents(&self) -> Vec<ProcessedDocument> {
        self.entries.iter().map(GoldenEntry::document).collect()
    }
}

/// Reads a golden JSONL file and validates every label against `schema`.
pub fn load_golden(path: &Path, schema: &ClassSchema) -> Result<GoldenSet, StoreError> {
    let body = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: GoldenEntry = serde_json::from_str(line).map_err(|e| StoreError::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        if !schema.contains(&entry.label()) {
            return Err(StoreError::UnknownLabel {
                line: line_no,
                label: entry.label().to_string(),
            });
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(StoreError::EmptyGoldenSet);
    }
    let provenance = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(GoldenSet { entries, provenance })
}

pub fn write_golden(path: &Path, golden: &GoldenSet) -> Result<(), StoreError> {
    let mut out = String::new();
    for e in &golden.entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Held while writing; released on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A store rooted at a directory.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Opens (creating if needed) a store at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("runs"))?;
        Ok(Self { root })
    }

    /// Opens an existing store without creating anything.
    pub fn existing(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(StoreError::NotFound(root.display().to_string()));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Takes the single-writer lock.
    pub fn lock(&self) -> Result<StoreLock, StoreError> {
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(StoreError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    /// Persists a run atomically and returns its id. Saving the same record
    /// twice is harmless.
    pub fn save_run(&self, record: &RunRecord) -> Result<String, StoreError> {
        record.validate()?;
        if record.run_id.is_empty() || record.run_id.contains(['/', '\\', '.']) {
            return Err(StoreError::InvalidRecord(format!("bad run id {:?}", record.run_id)));
        }
        let _lock = self.lock()?;
        let dir = self.run_dir(&record.run_id);
        let mut results = Vec::new();
        for r in &record.results {
            results.extend_from_slice(canonical::to_string(r).as_bytes());
            results.push(b'\n');
        }
        let manifest = RunManifest {
            run_id: record.run_id.clone(),
            prompt_hash: record.prompt_hash.clone(),
            schema_version: record.schema_version,
            backend_id: record.backend_id.clone(),
            started: record.started,
            finished: record.finished,
            result_count: record.results.len(),
            results_digest: canonical::sha256_hex(&results),
        };
        let manifest_bytes = canonical::to_pretty(&manifest);
        if dir.exists() {
            let existing = fs::read(dir.join("manifest.json"))?;
            return if existing == manifest_bytes.as_bytes() {
                Ok(record.run_id.clone())
            } else {
                Err(StoreError::Conflict(format!("run {}", record.run_id)))
            };
        }
        let tmp = self.root.join("runs").join(format!(".tmp-{}-{}", record.run_id, std::process::id()));
        let _ = fs::remove_dir_all(&tmp);
        fs::create_dir_all(&tmp)?;
        fs::write(tmp.join("results.jsonl"), &results)?;
        fs::write(tmp.join("manifest.json"), manifest_bytes)?;
        fs::rename(&tmp, &dir)?;
        Ok(record.run_id.clone())
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.run_dir(run_id).join("manifest.json");
        if run_id.contains(['/', '\\']) || run_id.starts_with('.') || !path.exists() {
            return Err(StoreError::NotFound(format!("run {run_id}")));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn load_run(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        let manifest = self.load_manifest(run_id)?;
        let bytes = fs::read(self.run_dir(run_id).join("results.jsonl"))?;
        let actual = canonical::sha256_hex(&bytes);
        if actual != manifest.results_digest {
            return Err(StoreError::IntegrityError {
                item: format!("run {run_id}"),
                expected: manifest.results_digest,
                actual,
            });
        }
        let text = String::from_utf8(bytes).map_err(|e| StoreError::InvalidRecord(e.to_string()))?;
        let results = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| StoreError::ParseError {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<ClassificationResult>, _>>()?;
        let record = RunRecord {
            run_id: manifest.run_id,
            prompt_hash: manifest.prompt_hash,
            schema_version: manifest.schema_version,
            backend_id: manifest.backend_id,
            results,
            started: manifest.started,
            finished: manifest.finished,
        };
        if record.results.len() != manifest.result_count {
            return Err(StoreError::IntegrityError {
                item: format!("run {run_id}"),
                expected: format!("{} results", manifest.result_count),
                actual: format!("{} results", record.results.len()),
            });
        }
        Ok(record)
    }

    /// Manifests of every stored run, oldest first (ties by id).
    pub fn list_runs(&self) -> Result<Vec<RunManifest>, StoreError> {
        let mut out = Vec::new();
        let dir = self.root.join("runs");
        if !dir.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || !entry.path().join("manifest.json").exists() {
                continue;
            }
            out.push(self.load_manifest(&name)?);
        }
        out.sort_by(|a, b| a.started.cmp(&b.started).then_with(|| a.run_id.cmp(&b.run_id)));
        Ok(out)
    }

    fn artifact_path(&self, kind: &str, name: &str) -> Result<PathBuf, StoreError> {
        let ok = |s: &str| !s.is_empty() && !s.contains(['/', '\\']) && !s.starts_with('.');
        if !ok(kind) || !ok(name) {
            return Err(StoreError::InvalidRecord(format!("bad artifact path {kind}/{name}")));
        }
        Ok(self.root.join(kind).join(format!("{name}.json")))
    }

    /// Writes `value` as `<kind>/<name>.json` (canonical, pretty). Returns
    /// the path. Identical re-writes are no-ops.
    pub fn put_artifact<T: Serialize>(&self, kind: &str, name: &str, value: &T) -> Result<PathBuf, StoreError> {
        let path = self.artifact_path(kind, name)?;
        let bytes = canonical::to_pretty(value);
        let _lock = self.lock()?;
        write_new(&path, bytes.as_bytes())?;
        Ok(path)
    }

    pub fn get_artifact<T: DeserializeOwned>(&self, kind: &str, name: &str) -> Result<T, StoreError> {
        let path = self.artifact_path(kind, name)?;
        if !path.exists() {
            return Err(StoreError::NotFound(format!("{kind}/{name}")));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn has_artifact(&self, kind: &str, name: &str) -> bool {
        self.artifact_path(kind, name).map(|p| p.exists()).unwrap_or(false)
    }

    fn log_path(&self, kind: &str, log: &str) -> Result<PathBuf, StoreError> {
        let ok = |s: &str| !s.is_empty() && !s.contains(['/', '\\']) && !s.starts_with('.');
        if !ok(kind) || !ok(log) {
            return Err(StoreError::InvalidRecord(format!("bad log path {kind}/{log}")));
        }
        Ok(self.root.join(kind).join(format!("{log}.jsonl")))
    }

    /// Appends one record to `<kind>/<log>.jsonl`. The caller must hold the
    /// lock; see [`Store::lock`].
    pub fn append_locked<T: Serialize>(&self, _lock: &StoreLock, kind: &str, log: &str, value: &T) -> Result<(), StoreError> {
        let path = self.log_path(kind, log)?;
        fs::create_dir_all(path.parent().expect("log has a parent"))?;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut line = canonical::to_string(value);
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    pub fn append<T: Serialize>(&self, kind: &str, log: &str, value: &T) -> Result<(), StoreError> {
        let lock = self.lock()?;
        self.append_locked(&lock, kind, log, value)
    }

    /// All records of `<kind>/<log>.jsonl`; missing logs read as empty.
    pub fn read_log<T: DeserializeOwned>(&self, kind: &str, log: &str) -> Result<Vec<T>, StoreError> {
        let path = self.log_path(kind, log)?;
        if !path.exists() {
            return Ok(Vec::new());
        }
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| StoreError::ParseError {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }
}

/// Atomically creates `path` with `bytes`. Existing identical content is
/// accepted; anything else is a conflict.
pub fn write_new(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if path.exists() {
        return if fs::read(path)? == bytes {
            Ok(())
        } else {
            Err(StoreError::Conflict(path.display().to_string()))
        };
    }
    let parent = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
