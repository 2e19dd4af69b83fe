//! The TOML config file and the per-invocation context built from it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use taxonomist::alignment::DiagnosticThresholds;
use taxonomist::corpus::PreprocessConfig;
use taxonomist::drift::{DriftThresholds, WindowPolicy};
use taxonomist::gateway::{build_backend, Backend, BackendConfig, BackendKind, Classifier};
use taxonomist::schema::ClassSchema;
use taxonomist::store::Store;

use crate::args::{BackendArg, Cli, DEFAULT_STORE};
use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub backend: BackendConfig,
    pub preprocess: PreprocessConfig,
    pub thresholds: Thresholds,
    pub drift: DriftSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    #[serde(flatten)]
    pub diagnostics: DiagnosticThresholds,
    /// Minimum macro-F1 the optimizer must keep.
    pub theta: f64,
    /// KL budget for few-shot selection.
    pub epsilon: f64,
    /// Largest inconsistency count a validation may report and still pass.
    pub stateless_budget: usize,
    pub intradoc_budget: usize,
    pub inprompt_budget: usize,
    pub adversarial_budget: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            diagnostics: DiagnosticThresholds::default(),
            theta: 0.8,
            epsilon: taxonomist::fewshot::DEFAULT_EPSILON,
            stateless_budget: 0,
            intradoc_budget: 0,
            inprompt_budget: 0,
            adversarial_budget: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSection {
    #[serde(flatten)]
    pub thresholds: DriftThresholds,
    pub window_days: i64,
    pub window_count: usize,
    pub min_members: usize,
    pub max_topics: usize,
}

impl Default for DriftSection {
    fn default() -> Self {
        let w = WindowPolicy::default();
        Self {
            thresholds: DriftThresholds::default(),
            window_days: w.days,
            window_count: w.max_count,
            min_members: 1,
            max_topics: 20,
        }
    }
}

impl Config {
    /// Reads the file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let mut config: Config =
            toml::from_str(&body).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if let (Some(p), Some(dir)) = (&config.backend.mock_profile, path.parent()) {
            if p.is_relative() {
                config.backend.mock_profile = Some(dir.join(p));
            }
        }
        Ok(config)
    }
}

/// Everything a command needs besides its own arguments.
pub struct Context {
    pub config: Config,
    pub store_root: PathBuf,
    pub seed: u64,
    pub json: bool,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Self, CliError> {
        let mut config = match &cli.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        match cli.backend {
            Some(BackendArg::Mock) => config.backend.kind = BackendKind::Mock,
            Some(BackendArg::Http) => config.backend.kind = BackendKind::Http,
            None => {}
        }
        Ok(Self {
            config,
            store_root: cli.store.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_STORE)),
            seed: cli.seed,
            json: cli.json,
        })
    }

    pub fn store(&self) -> Result<Store, CliError> {
        Ok(Store::open(&self.store_root)?)
    }

    pub fn backend(&self) -> Result<Arc<dyn Backend>, CliError> {
        Ok(build_backend(&self.config.backend)?)
    }

    pub fn classifier(&self, schema: &ClassSchema) -> Result<Classifier, CliError> {
        Ok(Classifier::new(self.backend()?, schema.clone()).with_workers(self.config.backend.workers))
    }

    /// Validation suites refuse sampled decoding.
    pub fn deterministic_classifier(&self, schema: &ClassSchema) -> Result<Classifier, CliError> {
        self.config.backend.require_deterministic()?;
        self.classifier(schema)
    }

    fn is_mock(&self) -> bool {
        self.config.backend.kind == BackendKind::Mock
    }

    /// Wall-clock time, except under the mock backend, where time is frozen
    /// at the Unix epoch so repeated invocations write identical bytes.
    pub fn now(&self) -> DateTime<Utc> {
        if self.is_mock() {
            Utc.timestamp_opt(0, 0).unwrap()
        } else {
            Utc::now()
        }
    }

    /// Start time for a new run. Under the mock clock each stored run is one
    /// second after the previous, so "latest run" stays meaningful.
    pub fn run_clock(&self, store: &Store) -> Result<DateTime<Utc>, CliError> {
        if self.is_mock() {
            let n = store.list_runs()?.len() as i64;
            Ok(self.now() + Duration::seconds(n))
        } else {
            Ok(Utc::now())
        }
    }
}
