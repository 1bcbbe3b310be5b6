mod config;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use labelflow::corpus::CorpusStore;
use labelflow::eval::{run_experiment, EvalConfig};
use labelflow::nih::{assert_non_interference, resolve_sources, verify_sources, Verdict};
use labelflow::pipelines::{Mode, PipelineKind, PipelineOutput, Query, RaMethod};
use labelflow::policy::{LabelAction, Principal, SecurityLabel, UserId};
use labelflow::synth::{generate, SynthConfig};
use labelflow::{HarnessError, PipelineError};
use serde_json::json;

use crate::config::CliConfig;

#[derive(Parser, Debug)]
#[command(name = "labelflow", version, about = "Label-aware language-model pipelines over a labeled corpus")]
struct Cli {
    /// JSON settings file.
    #[arg(long, global = true, env = "LABELFLOW_CONFIG")]
    settings: Option<PathBuf>,
    /// Journal path; overrides the settings file.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest a JSONL file of documents as one batch.
    Ingest { file: PathBuf },
    /// Change a document's label.
    Label {
        doc: String,
        #[command(subcommand)]
        action: LabelCmd,
    },
    /// Score (or generate from) a query under one pipeline.
    Query(QueryArgs),
    /// Run the perplexity experiment and write CSV reports.
    Eval {
        /// Experiment config (JSON). Defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "eval-out")]
        out: PathBuf,
    },
    /// List occupied lattice nodes and their projections.
    Lattice,
    /// Sample mutations outside each principal's projection and compare outputs.
    CheckNi(CheckNiArgs),
    /// Re-run a saved query output on its declared sources.
    Attribution { output: PathBuf },
    /// Write the seeded synthetic corpus and pretraining text.
    Synth {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        authors: Option<usize>,
        #[arg(long)]
        docs: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum LabelCmd {
    Grant { user: String },
    Revoke { user: String },
    Declassify,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PipelineArg {
    Zero,
    Ra,
    Personalized,
    Dp,
    Global,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Knn,
    Prompt,
}

#[derive(clap::Args, Debug)]
struct PipelineOpts {
    #[arg(long, value_enum, default_value = "ra")]
    pipeline: PipelineArg,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, value_enum, default_value = "knn")]
    method: MethodArg,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    /// Per-user event cap for the DP pipeline.
    #[arg(long, default_value_t = 100)]
    cap: u64,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Deliver the global fine-tuned model's output under the required label.
    #[arg(long)]
    declassify: bool,
}

impl PipelineOpts {
    fn kind(&self) -> PipelineKind {
        match self.pipeline {
            PipelineArg::Zero => PipelineKind::ZeroShot,
            PipelineArg::Personalized => PipelineKind::Personalized,
            PipelineArg::Ra => PipelineKind::RetrievalAugmented {
                method: match self.method {
                    MethodArg::Knn => RaMethod::Knn,
                    MethodArg::Prompt => RaMethod::Prompt,
                },
                k: self.k,
                lambda: self.lambda,
            },
            PipelineArg::Dp => PipelineKind::GlobalDp {
                epsilon: self.epsilon,
                delta: self.delta,
                cap: self.cap,
                noise_seed: self.noise_seed,
            },
            PipelineArg::Global => PipelineKind::GlobalFineTune { declassify: self.declassify },
        }
    }
}

#[derive(clap::Args, Debug)]
struct QueryArgs {
    text: String,
    /// Comma-separated user ids.
    #[arg(long)]
    principal: String,
    #[command(flatten)]
    pipeline: PipelineOpts,
    #[arg(long)]
    seed: Option<u64>,
    /// Text to score after the query text.
    #[arg(long)]
    continuation: Option<String>,
    /// "public" or comma-separated user ids. Defaults to the principal.
    #[arg(long)]
    required_label: Option<String>,
    /// Generate this many tokens instead of scoring.
    #[arg(long)]
    generate: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    /// Print retrieval scores and per-token log-probabilities to stderr.
    #[arg(long)]
    explain: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum ExpectArg {
    NonInterfering,
    Interfering,
}

#[derive(clap::Args, Debug)]
struct CheckNiArgs {
    #[command(flatten)]
    pipeline: PipelineOpts,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Principals as comma-separated user ids; repeatable. Defaults to the
    /// first `--max-principals` lattice nodes that cannot read everything.
    #[arg(long)]
    principal: Vec<String>,
    #[arg(long, default_value_t = 5)]
    max_principals: usize,
    #[arg(long, default_value = "the results of this study show")]
    query: String,
    #[arg(long)]
    continuation: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "non-interfering")]
    expect: ExpectArg,
}

/// A failure the caller asked to detect, as opposed to a usage or IO error.
#[derive(Debug)]
struct Expected(String);

impl std::fmt::Display for Expected {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Expected {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Expected>() {
            return 1;
        }
        let refused = |e: &PipelineError| matches!(e, PipelineError::DeliveryRefused(_));
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            if refused(e) {
                return 1;
            }
        }
        if let Some(HarnessError::Pipeline(e)) = cause.downcast_ref::<HarnessError>() {
            if refused(e) {
                return 1;
            }
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    let mut config = CliConfig::load(cli.settings.as_deref())?;
    if let Some(store) = cli.store {
        config.store = store;
    }
    match cli.command {
        Command::Ingest { file } => ingest(&config, &file),
        Command::Label { doc, action } => label(&config, &doc, action),
        Command::Query(args) => query(&config, args),
        Command::Eval { config: eval_config, out } => eval(&config, eval_config.as_deref(), &out),
        Command::Lattice => lattice(&config),
        Command::CheckNi(args) => check_ni(&config, args),
        Command::Attribution { output } => attribution(&config, &output),
        Command::Synth { out, seed, authors, docs } => synth(&out, seed, authors, docs),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn parse_principal(text: &str) -> Result<Principal> {
    Principal::new(text.split(',').map(str::trim).filter(|s| !s.is_empty()))
        .with_context(|| format!("invalid principal {text:?}"))
}

fn parse_label(text: &str) -> Result<SecurityLabel> {
    if text == "public" {
        return Ok(SecurityLabel::Public);
    }
    Ok(parse_principal(text)?.as_label()?)
}

fn ingest(config: &CliConfig, file: &Path) -> Result<()> {
    let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let mut store = CorpusStore::open(&config.store, config.max_chunk_tokens)?;
    let count = store.ingest_jsonl(&text)?;
    print_json(&json!({ "ingested": count, "version": store.version(), "documents": store.snapshot().len() }))
}

fn label(config: &CliConfig, doc: &str, action: LabelCmd) -> Result<()> {
    let action = match action {
        LabelCmd::Grant { user } => LabelAction::Grant(UserId::new(user)?),
        LabelCmd::Revoke { user } => LabelAction::Revoke(UserId::new(user)?),
        LabelCmd::Declassify => LabelAction::Declassify,
    };
    let mut store = CorpusStore::open(&config.store, config.max_chunk_tokens)?;
    let label = store.update_label(doc, action)?;
    print_json(&json!({ "doc": doc, "label": label, "version": store.version() }))
}

fn query(config: &CliConfig, args: QueryArgs) -> Result<()> {
    let snapshot = config.snapshot()?;
    let engine = config.engine()?;
    let kind = args.pipeline.kind();
    let mut query = Query::new(args.text, parse_principal(&args.principal)?, args.seed.unwrap_or(config.seed));
    if let Some(c) = args.continuation {
        query = query.with_continuation(c);
    }
    if let Some(l) = &args.required_label {
        query = query.with_required_label(parse_label(l)?);
    }
    let output = match args.generate {
        Some(n) => engine.generate(&kind, &query, &snapshot, n, args.temperature)?,
        None => engine.answer(&kind, &query, &snapshot)?,
    };
    if args.explain {
        explain(&engine, &kind, &query, &snapshot, &output);
    }
    print_json(&output)
}

fn explain(
    engine: &labelflow::pipelines::Engine,
    kind: &PipelineKind,
    query: &Query,
    snapshot: &labelflow::corpus::CorpusSnapshot,
    output: &PipelineOutput,
) {
    eprintln!("pipeline {}  label {}", kind.name(), output.output_label);
    if let PipelineKind::RetrievalAugmented { k, .. } = kind {
        for (doc, chunk, score) in engine.retrieve(query, snapshot, *k).attribution() {
            eprintln!("  retrieved {doc}#{chunk}  score {score:.6}");
        }
    }
    if let Mode::Scored { tokens, log_probs, .. } = &output.mode {
        for (token, lp) in tokens.iter().zip(log_probs) {
            eprintln!("  {token:<16} {lp:.6}");
        }
        if let Some(ppl) = output.perplexity() {
            eprintln!("perplexity {ppl:.6}");
        }
    }
}

fn eval(config: &CliConfig, eval_config: Option<&Path>, out: &Path) -> Result<()> {
    let eval_config: EvalConfig = match eval_config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => EvalConfig::default(),
    };
    let snapshot = config.snapshot()?;
    let engine = config.engine()?;
    let report = run_experiment(&eval_config, &snapshot, &engine)?;
    report.write_to(out)?;
    eprintln!("wrote {} rows to {}", report.rows.len(), out.display());
    print_json(&report.manifest)
}

fn lattice(config: &CliConfig) -> Result<()> {
    let snapshot = config.snapshot()?;
    let nodes = snapshot.lattice_nodes();
    print_json(&json!({ "version": snapshot.version(), "node_count": nodes.len(), "nodes": nodes }))
}

fn check_ni(config: &CliConfig, args: CheckNiArgs) -> Result<()> {
    let snapshot = config.snapshot()?;
    let engine = config.engine()?;
    let kind = args.pipeline.kind();
    let seed = args.seed.unwrap_or(config.seed);
    let principals: Vec<Principal> = if args.principal.is_empty() {
        let all: BTreeSet<String> = snapshot.documents().map(|d| d.id.clone()).collect();
        snapshot
            .lattice_nodes()
            .into_iter()
            .filter(|n| n.items != all)
            .take(args.max_principals)
            .map(|n| n.principal)
            .collect()
    } else {
        args.principal.iter().map(|p| parse_principal(p)).collect::<Result<_>>()?
    };
    if principals.is_empty() {
        bail!("no principal has hidden data to mutate");
    }
    let mut reports = Vec::new();
    for principal in principals {
        let mut template = Query::new(args.query.clone(), principal, seed);
        if let Some(c) = &args.continuation {
            template = template.with_continuation(c.clone());
        }
        reports.push(assert_non_interference(&engine, &kind, &template, &snapshot, args.trials, seed)?);
    }
    let want = match args.expect {
        ExpectArg::NonInterfering => Verdict::NonInterfering,
        ExpectArg::Interfering => Verdict::Interfering,
    };
    let unexpected: Vec<String> =
        reports.iter().filter(|r| r.verdict != want).map(|r| r.principal.to_string()).collect();
    print_json(&reports)?;
    if !unexpected.is_empty() {
        return Err(Expected(format!("unexpected verdict for {}", unexpected.join(", "))).into());
    }
    Ok(())
}

fn attribution(config: &CliConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let output: PipelineOutput = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let snapshot = config.snapshot_at(output.snapshot_version)?;
    let engine = config.engine()?;
    let resolved = resolve_sources(&output.query, &snapshot, &output)?;
    let verified = verify_sources(&engine, &output.pipeline, &output.query, &snapshot, &output)?;
    let documents: Vec<&str> = resolved.documents().map(|d| d.id.as_str()).collect();
    print_json(&json!({
        "verified": verified,
        "snapshot_version": output.snapshot_version,
        "sources": output.sources,
        "resolved_documents": documents,
    }))?;
    if !verified {
        return Err(Expected("output is not reproduced by its sources".into()).into());
    }
    Ok(())
}

fn synth(out: &Path, seed: Option<u64>, authors: Option<usize>, docs: Option<usize>) -> Result<()> {
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        seed: seed.unwrap_or(defaults.seed),
        authors: authors.unwrap_or(defaults.authors),
        docs: docs.unwrap_or(defaults.docs),
        ..defaults
    };
    if config.authors == 0 || config.docs == 0 {
        bail!("authors and docs must be at least 1");
    }
    let corpus = generate(&config);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("corpus.jsonl"), corpus.to_jsonl())?;
    std::fs::write(out.join("pretrain.txt"), corpus.pretrain_text())?;
    print_json(&json!({ "config": config, "documents": corpus.records.len(), "pretrain_lines": corpus.pretrain.len() }))
}
