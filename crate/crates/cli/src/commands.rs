//! One handler per subcommand. Each loads its inputs, calls exactly one
//! library operation (plus storage), and returns a [`CommandOutcome`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Duration;
use serde::Serialize;
use taxonomist::alignment::{build_alignment, diagnose, export_heatmap, AlignmentMatrix, HeatmapFormat};
use taxonomist::corpus::{load_raw, preprocess_all, Corpus, ProcessedDocument, RawDocument};
use taxonomist::drift::{
    cohesion, compute_centroids, evaluate_drift, golden_eval, metrics_series, novelty_scan, record_metrics,
    split_windows, DriftInputs, DriftReport, NoveltyConfig, Window, WindowPolicy,
};
use taxonomist::fewshot::{
    agreement, class_descriptions, judge_preference, judgments_from_pairs, load_preferences, rank_examples,
    record_preference, select_k, Constitution, PreferenceSource, RankedExample, PREFS_KIND, PREFS_LOG,
};
use taxonomist::gateway::{discover_topics, embed, EmbeddingVector, TopicDiscovery, DEFAULT_TOPIC_PROMPT};
use taxonomist::prompting::{build_prompt, optimize_prompt, refine_prompt, DefinitionEdit, PromptSpec};
use taxonomist::schema::{ClassSchema, Label};
use taxonomist::seqval::{
    obfuscation_audit, quarantine, test_inprompt, test_intradoc, test_statelessness, Artifact, PhraseList,
};
use taxonomist::stats::{chi2_homogeneity, kl_divergence, kl_probabilities, mcnemar_counts, ClassDistribution};
use taxonomist::store::{canonical, load_golden, write_golden, RunRecord};
use taxonomist::synthetic::{fruit_documents, fruit_profile, fruit_schema};

use crate::args::{
    ClassifyArgs, Command, DriftCommand, FewshotCommand, GoldenCommand, PrefsCommand, StatsCommand, Target,
    ValidateCommand,
};
use crate::config::Context;
use crate::{CliError, CommandOutcome};

pub const DEFAULT_PREAMBLE: &str = "Assign the document to the single class that fits it best.";
pub const TOPICS_KIND: &str = "topics";
pub const ALIGNMENT_KIND: &str = "alignment";
pub const DIAGNOSTICS_KIND: &str = "diagnostics";
pub const DRIFT_KIND: &str = "drift";
pub const DRIFT_LOG: &str = "reports";
pub const WINDOWS_KIND: &str = "windows";

pub fn dispatch(ctx: &Context, command: Command) -> Result<CommandOutcome, CliError> {
    match command {
        Command::Ingest { input, out } => ingest(ctx, &input, &out),
        Command::Classify(args) => classify(ctx, &args),
        Command::Topics {
            corpus,
            max_topics,
            instructions,
        } => topics(ctx, &corpus, max_topics, instructions.as_deref()),
        Command::Align { schema, run, topics } => align(ctx, &schema, &run, &topics),
        Command::Diagnose { run, heatmap, format } => diagnose_run(ctx, &run, heatmap.as_deref(), &format),
        Command::Render { schema, prompt, out } => render(&schema, prompt.as_deref(), out.as_deref()),
        Command::Refine {
            schema,
            prompt,
            edits,
            snapshot,
            out,
        } => refine(&schema, &prompt, &edits, snapshot, &out),
        Command::Optimize {
            schema,
            prompt,
            golden,
            theta,
            out,
        } => optimize(ctx, &schema, &prompt, &golden, theta, &out),
        Command::Fewshot(c) => fewshot(ctx, c),
        Command::Prefs(c) => prefs(ctx, c),
        Command::Validate(c) => validate(ctx, c),
        Command::Stats(c) => stats(c),
        Command::Drift(c) => drift(ctx, c),
        Command::Golden(c) => golden(ctx, c),
        Command::Serve { port, schema, corpus } => {
            let schema = load_schema(&schema)?;
            let corpus = corpus.as_deref().map(load_processed).transpose()?;
            crate::serve::run_blocking(port, ctx.store()?, schema, corpus)?;
            Ok(CommandOutcome::ok("server stopped", &serde_json::json!({ "port": port })))
        }
        Command::Fixtures { out, docs } => fixtures(ctx, &out, docs),
    }
}

// ---------------------------------------------------------------------------
// Input helpers

pub fn load_schema(path: &Path) -> Result<ClassSchema, CliError> {
    Ok(ClassSchema::load(path)?)
}

fn load_processed(path: &Path) -> Result<Corpus, CliError> {
    Ok(Corpus::read_jsonl(path)?)
}

fn load_spec(path: Option<&Path>, schema: &ClassSchema) -> Result<PromptSpec, CliError> {
    match path {
        Some(p) => Ok(PromptSpec::load(p)?),
        None => Ok(PromptSpec::new(schema, DEFAULT_PREAMBLE)),
    }
}

/// Accepts an alias (`K-01.2`) or a `Parent/Child` name.
pub fn parse_label(schema: &ClassSchema, text: &str) -> Result<Label, CliError> {
    if let Some(l) = schema.resolve_alias(text) {
        return Ok(l);
    }
    let label: Label = text
        .parse()
        .map_err(|_| CliError::Input(format!("cannot read label {text:?}")))?;
    if !schema.contains(&label) {
        return Err(CliError::Input(format!("label {text:?} is not in the schema")));
    }
    Ok(label)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, canonical::to_pretty(value))?;
    Ok(())
}

fn short_digest(value: &impl Serialize) -> String {
    canonical::digest(value)[..16].to_string()
}

// ---------------------------------------------------------------------------
// Pipeline

fn ingest(ctx: &Context, input: &Path, out: &Path) -> Result<CommandOutcome, CliError> {
    let raw = load_raw(input)?;
    let corpus = preprocess_all(&raw, &ctx.config.preprocess, input.to_path_buf())?;
    corpus.write_jsonl(out)?;
    let summary = serde_json::json!({
        "raw_documents": raw.len(),
        "segments": corpus.len(),
        "config_hash": corpus.provenance.config_hash,
        "out": out.display().to_string(),
    });
    Ok(CommandOutcome::ok(
        format!("{} raw documents → {} segments", raw.len(), corpus.len()),
        &summary,
    )
    .with_path(out.to_path_buf()))
}

fn classify(ctx: &Context, args: &ClassifyArgs) -> Result<CommandOutcome, CliError> {
    let schema = load_schema(&args.schema)?;
    let corpus = load_processed(&args.corpus)?;
    let spec = load_spec(args.prompt.as_deref(), &schema)?;
    let classifier = ctx.classifier(&schema)?;
    let store = ctx.store()?;
    let started = ctx.run_clock(&store)?;
    let rendered = classifier.render(&spec)?;
    let results = classifier.classify_batch(&corpus.documents, &spec)?;
    let finished = if started.timestamp() < 1_000_000 { started } else { chrono::Utc::now() };
    let record = RunRecord::new(
        rendered.hash,
        schema.version,
        classifier.backend().id(),
        results,
        started,
        finished,
    )?;
    let id = store.save_run(&record)?;
    let manifest = store.load_manifest(&id)?;
    Ok(CommandOutcome::ok(
        format!("run {id}: {} documents classified", record.results.len()),
        &manifest,
    ))
}

fn topics(ctx: &Context, corpus: &Path, max_topics: usize, instructions: Option<&Path>) -> Result<CommandOutcome, CliError> {
    let corpus = load_processed(corpus)?;
    let prompt = match instructions {
        Some(p) => fs::read_to_string(p)?,
        None => DEFAULT_TOPIC_PROMPT.to_string(),
    };
    let backend = ctx.backend()?;
    let found = discover_topics(&corpus, &prompt, max_topics, backend.as_ref(), ctx.config.backend.workers)?;
    let id = short_digest(&(&found, backend.id()));
    ctx.store()?.put_artifact(TOPICS_KIND, &id, &found)?;
    #[derive(Serialize)]
    struct Out<'a> {
        id: &'a str,
        discovery: &'a TopicDiscovery,
    }
    Ok(CommandOutcome::ok(
        format!("topics {id}: {} topics over {} documents", found.topics.len(), found.assignments.len()),
        &Out { id: &id, discovery: &found },
    ))
}

fn align(ctx: &Context, schema: &Path, run_id: &str, topics_id: &str) -> Result<CommandOutcome, CliError> {
    let schema = load_schema(schema)?;
    let store = ctx.store()?;
    let run = store.load_run(run_id)?;
    let found: TopicDiscovery = store.get_artifact(TOPICS_KIND, topics_id)?;
    let class_map: BTreeMap<String, String> = run.results.iter().map(|r| (r.doc_id.clone(), r.parent.clone())).collect();
    let matrix = build_alignment(
        &class_map,
        &found.assignments,
        &schema.parent_names(),
        &found.topics.names(),
        &run.run_id,
    )?;
    store.put_artifact(ALIGNMENT_KIND, &run.run_id, &matrix)?;
    Ok(CommandOutcome::ok(
        format!("alignment for run {}: {}×{}, {} documents", run.run_id, matrix.rows.len(), matrix.cols.len(), matrix.total()),
        &matrix,
    ))
}

fn diagnose_run(ctx: &Context, run_id: &str, heatmap: Option<&Path>, format: &str) -> Result<CommandOutcome, CliError> {
    let store = ctx.store()?;
    let matrix: AlignmentMatrix = store.get_artifact(ALIGNMENT_KIND, run_id)?;
    let diagnostics = diagnose(&matrix, &ctx.config.thresholds.diagnostics)?;
    store.put_artifact(DIAGNOSTICS_KIND, run_id, &diagnostics)?;
    if let Some(out) = heatmap {
        let format: HeatmapFormat = format.parse()?;
        export_heatmap(&matrix, out, format)?;
    }
    let lines: Vec<String> = diagnostics
        .iter()
        .map(|d| format!("{:<24} {:<12} purity {:.2} share {:.3}", d.class_name, d.verdict.as_str(), d.purity, d.support_share))
        .collect();
    let outcome = CommandOutcome::ok(lines.join("\n"), &diagnostics);
    Ok(match heatmap {
        Some(p) => outcome.with_path(p.to_path_buf()),
        None => outcome,
    })
}

fn render(schema: &Path, prompt: Option<&Path>, out: Option<&Path>) -> Result<CommandOutcome, CliError> {
    let schema = load_schema(schema)?;
    let spec = load_spec(prompt, &schema)?;
    let rendered = build_prompt(&schema, &spec)?;
    match out {
        Some(path) => {
            fs::write(path, &rendered.text)?;
            Ok(CommandOutcome::ok(format!("{} tokens, hash {}", rendered.tokens, rendered.hash), &rendered)
                .with_path(path.to_path_buf()))
        }
        None => Ok(CommandOutcome::ok(rendered.text.trim_end(), &rendered)),
    }
}

fn refine(schema: &Path, prompt: &Path, edits: &Path, snapshot: Option<String>, out: &Path) -> Result<CommandOutcome, CliError> {
    let schema = load_schema(schema)?;
    let spec = PromptSpec::load(prompt)?;
    let body = fs::read_to_string(edits)?;
    let edits: Vec<DefinitionEdit> =
        serde_json::from_str(&body).map_err(|e| CliError::Input(format!("{}: {e}", edits.display())))?;
    let next = refine_prompt(&schema, &spec, &edits, snapshot)?;
    write_json(out, &next)?;
    Ok(CommandOutcome::ok(
        format!("iteration {} → {} ({} edits), hash {}", spec.iteration, next.iteration, edits.len(), next.hash),
        &next,
    )
    .with_path(out.to_path_buf()))
}

fn optimize(ctx: &Context, schema: &Path, prompt: &Path, golden: &Path, theta: Option<f64>, out: &Path) -> Result<CommandOutcome, CliError> {
    let schema = load_schema(schema)?;
    let spec = PromptSpec::load(prompt)?;
    let validation = load_golden(golden, &schema)?;
    let theta = theta.unwrap_or(ctx.config.thresholds.theta);
    let classifier = ctx.classifier(&schema)?;
    let (best, report) = optimize_prompt(&spec, &validation, theta, &classifier)?;
    write_json(out, &best)?;
    Ok(CommandOutcome::ok(
        format!(
            "{} → {} tokens; validity {:.4} → {:.4} (θ = {theta}); {} segments removed",
            report.input_tokens,
            report.output_tokens,
            report.input_score,
            report.output_score,
            report.removed.len()
        ),
        &report,
    )
    .with_path(out.to_path_buf()))
}

// ---------------------------------------------------------------------------
// Few-shot and preferences

fn fewshot(ctx: &Context, command: FewshotCommand) -> Result<CommandOutcome, CliError> {
    match command {
        FewshotCommand::Rank {
            schema,
            prompt,
            candidates,
            out,
        } => {
            let schema = load_schema(&schema)?;
            let spec = load_spec(prompt.as_deref(), &schema)?;
            let labelled = load_golden(&candidates, &schema)?;
            let pairs: Vec<(ProcessedDocument, Label)> =
                labelled.entries.iter().map(|e| (e.document(), e.label())).collect();
            let backend = ctx.backend()?;
            let ranked = rank_examples(&pairs, &class_descriptions(&schema, &spec), backend.as_ref())?;
            let outcome = CommandOutcome::ok(format!("ranked {} candidates", ranked.len()), &ranked);
            Ok(match out {
                Some(p) => {
                    write_json(&p, &ranked)?;
                    outcome.with_path(p)
                }
                None => outcome,
            })
        }
        FewshotCommand::Select {
            schema,
            prompt,
            ranked,
            golden,
            monitor,
            epsilon,
            smoothing,
        } => {
            let schema = load_schema(&schema)?;
            let spec = load_spec(prompt.as_deref(), &schema)?;
            let body = fs::read_to_string(&ranked)?;
            let ranked: Vec<RankedExample> =
                serde_json::from_str(&body).map_err(|e| CliError::Input(format!("{}: {e}", ranked.display())))?;
            let validation = load_golden(&golden, &schema)?;
            let monitor = load_processed(&monitor)?;
            let epsilon = epsilon.unwrap_or(ctx.config.thresholds.epsilon);
            let classifier = ctx.classifier(&schema)?;
            let report = select_k(&ranked, &validation, &monitor, None, &spec, &classifier, epsilon, smoothing)?;
            Ok(CommandOutcome::ok(
                format!("k* = {} of {} (ε = {epsilon})", report.k_star, ranked.len()),
                &report,
            ))
        }
    }
}

fn prefs(ctx: &Context, command: PrefsCommand) -> Result<CommandOutcome, CliError> {
    let store = ctx.store()?;
    match command {
        PrefsCommand::Add {
            schema,
            doc,
            y_w,
            y_l,
            reviewer,
            round,
        } => {
            let schema = load_schema(&schema)?;
            let (w, l) = (parse_label(&schema, &y_w)?, parse_label(&schema, &y_l)?);
            let doc = ProcessedDocument::from_text(doc, "");
            let pair = record_preference(&store, &schema, &doc, w, l, &reviewer, PreferenceSource::Human, round, ctx.now())?;
            Ok(CommandOutcome::ok(format!("recorded {} > {} for {}", pair.y_w, pair.y_l, pair.doc_id), &pair))
        }
        PrefsCommand::Judge {
            schema,
            corpus,
            doc,
            a,
            b,
            constitution,
            round,
            judge_id,
            record,
        } => {
            let schema = load_schema(&schema)?;
            let corpus = load_processed(&corpus)?;
            let document = corpus
                .get(&doc)
                .ok_or_else(|| CliError::Input(format!("document {doc:?} is not in the corpus")))?;
            let constitution = Constitution::parse(&fs::read_to_string(&constitution)?, 1);
            let candidates = [parse_label(&schema, &a)?, parse_label(&schema, &b)?];
            let backend = ctx.backend()?;
            let pair = judge_preference(&schema, document, &candidates, &constitution, backend.as_ref(), &judge_id, round, ctx.now())?;
            if record {
                let lock = store.lock()?;
                store.append_locked(&lock, PREFS_KIND, PREFS_LOG, &pair)?;
            }
            Ok(CommandOutcome::ok(format!("judge prefers {} over {}", pair.y_w, pair.y_l), &pair))
        }
        PrefsCommand::Agreement => {
            let pairs = load_preferences(&store)?;
            let (latest, rounds) = judgments_from_pairs(&pairs);
            let report = agreement(&latest, &rounds)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |k| format!("{k:.3}"));
            Ok(CommandOutcome::ok(
                format!("inter-rater κ {}; intra-rater κ {}", fmt(report.mean_inter), fmt(report.mean_intra)),
                &report,
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Validation

fn load_target(ctx: &Context, target: &Target) -> Result<(ClassSchema, Corpus, PromptSpec), CliError> {
    let schema = load_schema(&target.schema)?;
    let corpus = load_processed(&target.corpus)?;
    let spec = load_spec(target.prompt.as_deref(), &schema)?;
    let _ = ctx;
    Ok((schema, corpus, spec))
}

fn validate(ctx: &Context, command: ValidateCommand) -> Result<CommandOutcome, CliError> {
    let th = &ctx.config.thresholds;
    match command {
        ValidateCommand::Stateless { target, runs, budget } => {
            let (schema, corpus, spec) = load_target(ctx, &target)?;
            let classifier = ctx.deterministic_classifier(&schema)?;
            let rendered = classifier.render(&spec)?;
            let report = test_statelessness(|d| classifier.label_rendered(d, &rendered), &corpus, runs, ctx.seed)?;
            let budget = budget.unwrap_or(th.stateless_budget);
            Ok(CommandOutcome::gate(
                report.inconsistency_count <= budget,
                format!("I = {} over {} passes (budget {budget})", report.inconsistency_count, report.n_iter),
                &report,
            ))
        }
        ValidateCommand::Intradoc {
            target,
            p,
            min_tokens,
            budget,
        } => {
            let (schema, corpus, spec) = load_target(ctx, &target)?;
            let classifier = ctx.deterministic_classifier(&schema)?;
            let rendered = classifier.render(&spec)?;
            let report = test_intradoc(|d| classifier.label_rendered(d, &rendered), &corpus, p, min_tokens)?;
            let budget = budget.unwrap_or(th.intradoc_budget);
            let worst = report.i_prefix.max(report.i_suffix).max(report.i_middle);
            Ok(CommandOutcome::gate(
                worst <= budget,
                format!(
                    "prefix {} / suffix {} / middle {} of {} tested, {} skipped (budget {budget})",
                    report.i_prefix,
                    report.i_suffix,
                    report.i_middle,
                    report.tested,
                    report.skipped.len()
                ),
                &report,
            ))
        }
        ValidateCommand::Inprompt { target, cap, budget } => {
            let (schema, corpus, spec) = load_target(ctx, &target)?;
            let classifier = ctx.deterministic_classifier(&schema)?;
            let examples = spec.examples.clone();
            let report = test_inprompt(&examples, &corpus, &classifier, &spec, cap, ctx.seed)?;
            let budget = budget.unwrap_or(th.inprompt_budget);
            Ok(CommandOutcome::gate(
                report.i_prompt <= budget,
                format!("i_prompt = {} over {} orderings (budget {budget})", report.i_prompt, report.permutations_tested),
                &report,
            ))
        }
        ValidateCommand::Adversarial {
            corpus,
            phrases,
            quarantine: held_path,
            budget,
        } => {
            let corpus = load_processed(&corpus)?;
            let mut list = PhraseList::default_list();
            if let Some(p) = phrases {
                let body = fs::read_to_string(&p)?;
                let extra: Vec<&str> = body.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
                list = list.extend(&extra)?;
            }
            let (clean, held) = quarantine(&corpus, &list);
            if let Some(path) = &held_path {
                let lines: String = held.iter().map(|q| canonical::to_string(q) + "\n").collect();
                fs::write(path, lines)?;
            }
            let budget = budget.unwrap_or(th.adversarial_budget);
            #[derive(Serialize)]
            struct Out<'a> {
                clean: usize,
                flagged: &'a [taxonomist::seqval::Quarantined],
            }
            let outcome = CommandOutcome::gate(
                held.len() <= budget,
                format!("{} flagged, {} clean (budget {budget})", held.len(), clean.len()),
                &Out {
                    clean: clean.len(),
                    flagged: &held,
                },
            );
            Ok(match held_path {
                Some(p) => outcome.with_path(p),
                None => outcome,
            })
        }
        ValidateCommand::Obfuscation { schema, prompt, run } => {
            let schema = load_schema(&schema)?;
            let spec = load_spec(prompt.as_deref(), &schema)?;
            let rendered = build_prompt(&schema, &spec)?;
            let mut artifacts = vec![Artifact::new("prompt", rendered.text)];
            if let Some(id) = run {
                let record = ctx.store()?.load_run(&id)?;
                artifacts.extend(
                    record
                        .results
                        .iter()
                        .map(|r| Artifact::new(format!("run:{id}:{}", r.doc_id), r.raw_response.clone())),
                );
            }
            let leaks = obfuscation_audit(&schema, &artifacts);
            Ok(CommandOutcome::gate(
                leaks.is_empty(),
                format!("{} leaks across {} artifacts", leaks.len(), artifacts.len()),
                &leaks,
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Statistics

fn stats(command: StatsCommand) -> Result<CommandOutcome, CliError> {
    match command {
        StatsCommand::Mcnemar { b, c, corrected, alpha } => {
            let r = mcnemar_counts(b, c, corrected, alpha)?;
            Ok(CommandOutcome::ok(format!("χ² = {:.4}, p = {:.4}", r.statistic, r.p_value), &r))
        }
        StatsCommand::Chisq { a, b, alpha } => {
            let r = chi2_homogeneity(&ClassDistribution::from_counts(&a), &ClassDistribution::from_counts(&b), alpha)?;
            Ok(CommandOutcome::ok(
                format!("χ² = {:.4}, df = {}, p = {:.4}", r.statistic, r.df, r.p_value),
                &r,
            ))
        }
        StatsCommand::Kl { p, q, counts, smoothing } => {
            let kl = if counts {
                let as_counts = |v: &[f64]| -> Result<Vec<u64>, CliError> {
                    v.iter()
                        .map(|x| {
                            if *x >= 0.0 && x.fract() == 0.0 {
                                Ok(*x as u64)
                            } else {
                                Err(CliError::Input(format!("{x} is not a count")))
                            }
                        })
                        .collect()
                };
                kl_divergence(
                    &ClassDistribution::from_counts(&as_counts(&p)?),
                    &ClassDistribution::from_counts(&as_counts(&q)?),
                    smoothing,
                )?
            } else {
                if p.len() != q.len() || p.is_empty() {
                    return Err(CliError::Input("p and q need the same, non-zero length".into()));
                }
                kl_probabilities(&p, &q)
            };
            Ok(CommandOutcome::ok(format!("D_KL = {kl:.6} nats"), &serde_json::json!({ "kl": kl })))
        }
    }
}

// ---------------------------------------------------------------------------
// Drift and golden metrics

/// A run as a window: bounds from its result timestamps (the run start
/// stands in for documents without one).
fn run_window(run: &RunRecord, schema: &ClassSchema) -> Result<Window, CliError> {
    let mut results = run.results.clone();
    for r in &mut results {
        r.timestamp.get_or_insert(run.started);
    }
    let start = results.iter().filter_map(|r| r.timestamp).min().unwrap_or(run.started);
    let end = results.iter().filter_map(|r| r.timestamp).max().unwrap_or(run.started) + Duration::seconds(1);
    Ok(Window::new(run.run_id.clone(), start, end, results, schema)?)
}

/// Artifact name for window `wid` of `run`.
fn window_key(run: &str, wid: &str) -> String {
    format!("{run}-{wid}")
}

/// `<run>` is the whole run as one window; `<run>:<window>` is a window
/// stored by `drift windows`.
fn load_window(store: &taxonomist::store::Store, schema: &ClassSchema, reference: &str) -> Result<Window, CliError> {
    match reference.split_once(':') {
        Some((run, wid)) => Ok(store.get_artifact(WINDOWS_KIND, &window_key(run, wid))?),
        None => run_window(&store.load_run(reference)?, schema),
    }
}

#[derive(Serialize)]
struct WindowManifest<'a> {
    id: &'a str,
    start: chrono::DateTime<chrono::Utc>,
    end: chrono::DateTime<chrono::Utc>,
    count: usize,
    distribution: &'a ClassDistribution,
}

fn split_run(ctx: &Context, schema: &Path, run_id: &str) -> Result<CommandOutcome, CliError> {
    let schema = load_schema(schema)?;
    let store = ctx.store()?;
    let run = store.load_run(run_id)?;
    let mut results = run.results.clone();
    for r in &mut results {
        r.timestamp.get_or_insert(run.started);
    }
    let policy = WindowPolicy {
        days: ctx.config.drift.window_days,
        max_count: ctx.config.drift.window_count,
    };
    let mut windows = Vec::new();
    for w in split_windows(&results, &schema, policy)? {
        let named = Window::new(format!("{}:{}", run.run_id, w.id), w.start, w.end, w.results, &schema)?;
        store.put_artifact(WINDOWS_KIND, &window_key(&run.run_id, &w.id), &named)?;
        windows.push(named);
    }
    let manifests: Vec<WindowManifest> = windows
        .iter()
        .map(|w| WindowManifest {
            id: &w.id,
            start: w.start,
            end: w.end,
            count: w.results.len(),
            distribution: &w.distribution,
        })
        .collect();
    let lines: Vec<String> = manifests
        .iter()
        .map(|m| format!("{}  {} → {}  {} results", m.id, m.start.to_rfc3339(), m.end.to_rfc3339(), m.count))
        .collect();
    Ok(CommandOutcome::ok(lines.join("\n"), &manifests))
}

fn drift(ctx: &Context, command: DriftCommand) -> Result<CommandOutcome, CliError> {
    let (schema, reference, current, corpus, recent, golden_prompt) = match command {
        DriftCommand::Windows { schema, run } => return split_run(ctx, &schema, &run),
        DriftCommand::Check {
            schema,
            reference,
            current,
            corpus,
            recent,
            golden_prompt,
        } => (schema, reference, current, corpus, recent, golden_prompt),
    };
    let schema = load_schema(&schema)?;
    let store = ctx.store()?;
    let section = &ctx.config.drift;
    let reference = load_window(&store, &schema, &reference)?;
    let current = load_window(&store, &schema, &current)?;
    let backend = ctx.backend()?;
    let mut inputs = DriftInputs::default();

    if let Some(path) = corpus {
        let corpus = load_processed(&path)?;
        let mut embeddings: BTreeMap<String, EmbeddingVector> = BTreeMap::new();
        for r in reference.results.iter().chain(&current.results) {
            if embeddings.contains_key(&r.doc_id) {
                continue;
            }
            let doc = corpus
                .get(&r.doc_id)
                .ok_or_else(|| CliError::Input(format!("document {} is not in {}", r.doc_id, path.display())))?;
            embeddings.insert(r.doc_id.clone(), embed(backend.as_ref(), &doc.text)?);
        }
        let centroids = compute_centroids(&reference, &embeddings, section.min_members)?.centroids;
        let covered = |w: &Window| -> Vec<(String, String)> {
            w.assignments().into_iter().filter(|(_, c)| centroids.contains_key(c)).collect()
        };
        inputs.cohesion_baseline = cohesion(&covered(&reference), &centroids, &embeddings)?;
        let previous: Vec<DriftReport> = store.read_log(DRIFT_KIND, DRIFT_LOG)?;
        inputs.cohesion_history = previous
            .into_iter()
            .filter(|r| r.reference == reference.id && r.current != current.id && !r.cohesion.is_empty())
            .map(|r| r.cohesion)
            .collect();
        inputs.cohesion_history.push(cohesion(&covered(&current), &centroids, &embeddings)?);
    }
    if let Some(path) = recent {
        let recent = load_processed(&path)?;
        let config = NoveltyConfig {
            tau: section.thresholds.tau,
            max_topics: section.max_topics,
            workers: ctx.config.backend.workers,
            ..NoveltyConfig::default()
        };
        inputs.novel_topics = novelty_scan(&recent, &schema, &config, backend.as_ref())?;
    }
    if let Some(hash) = golden_prompt {
        inputs.golden_trend = metrics_series(&store, Some(&hash))?.iter().map(|p| p.macro_f1).collect();
    }
    let report = evaluate_drift(&reference, &current, inputs, &section.thresholds)?;
    store.append(DRIFT_KIND, DRIFT_LOG, &report)?;
    let stable = report.verdict == taxonomist::drift::DriftVerdict::Stable;
    Ok(CommandOutcome::gate(
        stable,
        format!("{} → {}: {}", report.reference, report.current, report.verdict),
        &report,
    ))
}

fn golden(ctx: &Context, command: GoldenCommand) -> Result<CommandOutcome, CliError> {
    let GoldenCommand::Eval { schema, prompt, golden } = command;
    let schema = load_schema(&schema)?;
    let spec = load_spec(prompt.as_deref(), &schema)?;
    let set = load_golden(&golden, &schema)?;
    let classifier = ctx.classifier(&schema)?;
    let rendered = classifier.render(&spec)?;
    let report = golden_eval(&set, |d| classifier.label_rendered(d, &rendered))?;
    record_metrics(&ctx.store()?, &rendered.hash, &set.provenance, ctx.now(), &report)?;
    Ok(CommandOutcome::ok(
        format!(
            "macro-F1 {:.4}, accuracy {:.4}, precision {:.4}, recall {:.4} on {} documents",
            report.macro_f1, report.accuracy, report.precision, report.recall, report.n
        ),
        &report,
    ))
}

// ---------------------------------------------------------------------------
// Fixtures

/// Writes the synthetic fruit set: `schema.json`, `mock.toml`,
/// `taxonomist.toml`, `corpus.jsonl` (raw), and `golden.jsonl`.
fn fixtures(ctx: &Context, out: &Path, n: usize) -> Result<CommandOutcome, CliError> {
    fs::create_dir_all(out)?;
    let docs = fruit_documents(n, ctx.seed);
    let files: Vec<PathBuf> = ["schema.json", "mock.toml", "taxonomist.toml", "corpus.jsonl", "golden.jsonl"]
        .iter()
        .map(|f| out.join(f))
        .collect();
    fs::write(&files[0], fruit_schema().to_json() + "\n")?;
    let profile = toml::to_string(&fruit_profile()).map_err(|e| CliError::Input(e.to_string()))?;
    fs::write(&files[1], profile)?;
    fs::write(
        &files[2],
        "[backend]\nkind = \"mock\"\nmock_profile = \"mock.toml\"\nworkers = 1\n\n[thresholds]\ntheta = 0.8\n\n[drift]\nmin_members = 1\n",
    )?;
    let raw: String = docs
        .iter()
        .map(|(d, _)| {
            let mut r = RawDocument::new(d.id.clone(), d.text.clone());
            r.timestamp = d.timestamp;
            r.dimensions = d.dimensions.clone();
            canonical::to_string(&r) + "\n"
        })
        .collect();
    fs::write(&files[3], raw)?;
    let golden = taxonomist::store::GoldenSet::new(
        docs.iter()
            .take(n.min(40))
            .map(|(d, l)| taxonomist::store::GoldenEntry::new(d.id.clone(), d.text.clone(), l.clone()))
            .collect(),
    );
    write_golden(&files[4], &golden)?;
    let names: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
    Ok(CommandOutcome::ok(format!("wrote {} documents to {}", n, out.display()), &names))
}
