//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const DEFAULT_STORE: &str = "taxonomist-store";

#[derive(Parser, Debug)]
#[command(name = "taxonomist", version, about = "Build, validate, and monitor LLM document classifiers")]
pub struct Cli {
    /// TOML config with [backend], [preprocess], [thresholds], [drift] sections
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run store directory
    #[arg(long, global = true, env = "TAXONOMIST_STORE")]
    pub store: Option<PathBuf>,
    /// Override the configured backend
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendArg>,
    /// Seed for every shuffle and sample
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print machine-readable JSON instead of a summary
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Mock,
    Http,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean and segment a raw JSONL corpus
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify a processed corpus and store the run
    Classify(ClassifyArgs),
    /// Discover schema-free topics in a corpus
    Topics {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_topics: usize,
        /// File with replacement topic instructions
        #[arg(long)]
        instructions: Option<PathBuf>,
    },
    /// Cross-tabulate a run against a topic discovery
    Align {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        run: String,
        /// Topic discovery id printed by `topics`
        #[arg(long)]
        topics: String,
    },
    /// Per-class verdicts from a stored alignment
    Diagnose {
        #[arg(long)]
        run: String,
        /// Also write the heatmap here
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long, default_value = "svg")]
        format: String,
    },
    /// Print the rendered prompt text
    Render {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Write the text here instead of printing it
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply definition edits to a prompt
    Refine {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        /// JSON list of definition edits
        #[arg(long)]
        edits: PathBuf,
        /// Run whose alignment motivated the edits
        #[arg(long)]
        snapshot: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove prompt segments while validity stays at or above theta
    Optimize {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        golden: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Few-shot example ranking and selection
    #[command(subcommand)]
    Fewshot(FewshotCommand),
    /// Preference records
    #[command(subcommand)]
    Prefs(PrefsCommand),
    /// Robustness checks
    #[command(subcommand)]
    Validate(ValidateCommand),
    /// Standalone statistical tests
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Drift monitoring
    #[command(subcommand)]
    Drift(DriftCommand),
    /// Golden-set evaluation
    #[command(subcommand)]
    Golden(GoldenCommand),
    /// Serve the review API over HTTP
    Serve {
        #[arg(long, default_value_t = 8321)]
        port: u16,
        #[arg(long)]
        schema: PathBuf,
        /// Processed corpus used to show document text in the review queue
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Write the synthetic fruit fixtures (schema, mock profile, corpus, golden set)
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        docs: usize,
    },
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Prompt spec JSON; a plain prompt is built from the schema otherwise
    #[arg(long)]
    pub prompt: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum FewshotCommand {
    /// Rank labelled candidates by similarity to their class description
    Rank {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Labelled candidates, golden-set JSONL format
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose k under a KL budget
    Select {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Output of `fewshot rank`
        #[arg(long)]
        ranked: PathBuf,
        #[arg(long)]
        golden: PathBuf,
        /// Processed corpus whose label distribution must stay put
        #[arg(long)]
        monitor: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = taxonomist::stats::DEFAULT_SMOOTHING)]
        smoothing: f64,
    },
}

#[derive(Subcommand, Debug)]
pub enum PrefsCommand {
    /// Record a human judgment (labels as aliases or Parent/Child)
    Add {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        doc: String,
        #[arg(long = "winner")]
        y_w: String,
        #[arg(long = "loser")]
        y_l: String,
        #[arg(long)]
        reviewer: String,
        #[arg(long, default_value_t = 1)]
        round: u32,
    },
    /// Ask the backend to judge between two labels
    Judge {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        doc: String,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Plain text, one principle per paragraph
        #[arg(long)]
        constitution: PathBuf,
        #[arg(long, default_value_t = 1)]
        round: u32,
        #[arg(long, default_value = "judge")]
        judge_id: String,
        /// Store the judgment in the preference log
        #[arg(long)]
        record: bool,
    },
    /// Inter- and intra-rater kappa over stored preferences
    Agreement,
}

#[derive(Args, Debug)]
pub struct Target {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub prompt: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum ValidateCommand {
    /// Repeated shuffled passes must agree
    Stateless {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Cutting the prefix, suffix, or middle must not change labels
    Intradoc {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = 0.3)]
        p: f64,
        #[arg(long, default_value_t = taxonomist::seqval::DEFAULT_MIN_TOKENS)]
        min_tokens: usize,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Example order must not change labels
    Inprompt {
        #[command(flatten)]
        target: Target,
        #[arg(long, default_value_t = taxonomist::seqval::DEFAULT_PERMUTATION_CAP)]
        cap: usize,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Flag documents containing injection phrases
    Adversarial {
        #[arg(long)]
        corpus: PathBuf,
        /// Extra phrases, one per line
        #[arg(long)]
        phrases: Option<PathBuf>,
        /// Write flagged documents here
        #[arg(long)]
        quarantine: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Look for internal class names in prompts and stored outputs
    Obfuscation {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
        /// Also scan the raw responses of this run
        #[arg(long)]
        run: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum StatsCommand {
    /// McNemar's test from discordant counts
    Mcnemar {
        #[arg(long)]
        b: u64,
        #[arg(long)]
        c: u64,
        #[arg(long)]
        corrected: bool,
        #[arg(long, default_value_t = taxonomist::stats::DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Chi-squared homogeneity of two count vectors
    Chisq {
        #[arg(long, value_delimiter = ',')]
        a: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        b: Vec<u64>,
        #[arg(long, default_value_t = taxonomist::stats::DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// KL divergence D(p ‖ q) in nats
    Kl {
        #[arg(long, value_delimiter = ',')]
        p: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        q: Vec<f64>,
        /// Treat p and q as counts and smooth them
        #[arg(long)]
        counts: bool,
        #[arg(long, default_value_t = taxonomist::stats::DEFAULT_SMOOTHING)]
        smoothing: f64,
    },
}

#[derive(Subcommand, Debug)]
pub enum DriftCommand {
    /// Split a run into time/count windows and store them
    Windows {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        run: String,
    },
    /// Compare a current window against a reference window
    Check {
        #[arg(long)]
        schema: PathBuf,
        /// A run id (the whole run) or `<run>:<window>` from `drift windows`
        #[arg(long)]
        reference: String,
        #[arg(long)]
        current: String,
        /// Processed corpus holding both runs' documents; enables cohesion
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Recent sample to scan for topics no class covers
        #[arg(long)]
        recent: Option<PathBuf>,
        /// Prompt hash whose golden metrics form the trend
        #[arg(long)]
        golden_prompt: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum GoldenCommand {
    /// Score a prompt on a golden set and append to the metrics series
    Eval {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        golden: PathBuf,
    },
}
