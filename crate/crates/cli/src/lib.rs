//! Command surface for the taxonomist workbench: one subcommand per library
//! operation, a TOML config, a run store, and a small HTTP API for review.
//!
//! Exit codes: 0 success, 1 operational or usage error, 2 when a check ran
//! and said no (budget exceeded, non-stable drift).

pub mod args;
pub mod commands;
pub mod config;
pub mod serve;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use serde::Serialize;
use thiserror::Error;

pub use args::Cli;
pub use config::{Config, Context};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_REJECTED: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] taxonomist::corpus::CorpusError),
    #[error(transparent)]
    Schema(#[from] taxonomist::schema::SchemaError),
    #[error(transparent)]
    Gateway(#[from] taxonomist::gateway::GatewayError),
    #[error(transparent)]
    Prompt(#[from] taxonomist::prompting::PromptError),
    #[error(transparent)]
    Alignment(#[from] taxonomist::alignment::AlignmentError),
    #[error(transparent)]
    Stats(#[from] taxonomist::stats::StatsError),
    #[error(transparent)]
    Fewshot(#[from] taxonomist::fewshot::FewshotError),
    #[error(transparent)]
    Seqval(#[from] taxonomist::seqval::SeqvalError),
    #[error(transparent)]
    Drift(#[from] taxonomist::drift::DriftError),
    #[error(transparent)]
    Store(#[from] taxonomist::store::StoreError),
}

/// What a command produced: an exit code, a line or two for humans, and
/// the machine-readable result.
#[derive(Debug, Clone)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub summary: String,
    pub json: Option<serde_json::Value>,
    pub json_path: Option<PathBuf>,
}

impl CommandOutcome {
    pub fn ok(summary: impl Into<String>, value: &impl Serialize) -> Self {
        Self {
            exit_code: EXIT_OK,
            summary: summary.into(),
            json: Some(taxonomist::store::canonical::to_value(value)),
            json_path: None,
        }
    }

    /// Exit 2 unless `pass`.
    pub fn gate(pass: bool, summary: impl Into<String>, value: &impl Serialize) -> Self {
        Self {
            exit_code: if pass { EXIT_OK } else { EXIT_REJECTED },
            ..Self::ok(summary, value)
        }
    }

    pub fn with_path(mut self, path: PathBuf) -> Self {
        self.json_path = Some(path);
        self
    }

    fn error(e: &CliError) -> Self {
        Self {
            exit_code: EXIT_ERROR,
            summary: format!("error: {e}"),
            json: Some(serde_json::json!({ "error": e.to_string() })),
            json_path: None,
        }
    }

    /// Text for stdout: canonical pretty JSON with `--json`, else the summary.
    pub fn render(&self, json: bool) -> String {
        match (&self.json, json) {
            (Some(v), true) => taxonomist::store::canonical::to_pretty(v),
            _ => {
                let mut s = self.summary.clone();
                if let Some(p) = &self.json_path {
                    s.push_str(&format!("\nwrote {}", p.display()));
                }
                s.push('\n');
                s
            }
        }
    }
}

/// Parses `argv` and runs the command. Never panics on bad input; usage
/// errors come back with exit code 1 and clap's help text.
pub fn run<I, T>(argv: I) -> (CommandOutcome, bool)
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let outcome = CommandOutcome {
                exit_code: code,
                summary: e.render().to_string().trim_end().to_string(),
                json: None,
                json_path: None,
            };
            return (outcome, false);
        }
    };
    let json = cli.json;
    let outcome = Context::from_cli(&cli)
        .and_then(|ctx| commands::dispatch(&ctx, cli.command))
        .unwrap_or_else(|e| CommandOutcome::error(&e));
    (outcome, json)
}
