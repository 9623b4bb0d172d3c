//! The `ddcot` command line.
//!
//! Exit codes: 0 ok, 1 output I/O, 2 usage, 3 config, 4 dataset (including
//! unknown problem ids), 5 backend, 6 self-test failure.

mod manifest;
mod show;

use std::ffi::OsString;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use manifest::{
    canonicalize_predictions, canonicalize_telemetry, check_counts, run_id, ConfigSnapshot, RunCounts, RunManifest,
    Selection,
};
pub use show::render as render_transcript;

use crate::backends::config::ConfigError;
use crate::backends::{BackendConfig, DiskStore};
use crate::dataset::{self, DatasetError};
use crate::eval::{self, EvalError, ReportFormat};
use crate::model::{letter_index, validate_problem, ErrorTag, ImageRef, Prediction, Problem, Split, Subject};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::prompting::{sha256_hex, TemplateSet};
use crate::selftest::{run_selftest, SelftestOptions};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Pipeline(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("problem `{0}` not found in the dataset")]
    NotFound(String),
    #[error("{path}: {message}")]
    Predictions { path: PathBuf, message: String },
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("self-test failed: {0}")]
    Selftest(String),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) | CliError::Pipeline(_) => 3,
            CliError::Dataset(_) | CliError::Eval(_) | CliError::NotFound(_) | CliError::Predictions { .. } => 4,
            CliError::Backend(_) => 5,
            CliError::Selftest(_) => 6,
        }
    }

    /// Short machine-readable tag printed with the message.
    pub fn tag(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
            CliError::Config(_) | CliError::Pipeline(_) => "config",
            CliError::Dataset(_) | CliError::Predictions { .. } => "dataset",
            CliError::Eval(_) => "eval",
            CliError::NotFound(_) => "not_found",
            CliError::Backend(_) => "backend",
            CliError::Selftest(_) => "selftest",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.into(), source }
}

#[derive(Debug, Parser)]
#[command(name = "ddcot", version, about = "Duty-distinct chain-of-thought runs, scoring and self-tests")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one question and print the staged transcript.
    Rationale(RationaleArgs),
    /// Run a dataset split and write predictions plus a run manifest.
    Run(RunArgs),
    /// Score a predictions file.
    Eval(EvalArgs),
    /// Numeric checks of the attention, RCVE and DLP code.
    Selftest(SelftestArgs),
    /// Inspect or clear the response cache.
    Cache(CacheArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PipelineFlags {
    /// Skip the caption fetch.
    #[arg(long)]
    pub no_caption: bool,
    /// Deconstruction retries after an unparseable reply.
    #[arg(long, default_value_t = 1)]
    pub retries: u32,
    /// Concurrent VQA calls per problem.
    #[arg(long, default_value_t = 4)]
    pub parallel_vqa: usize,
}

#[derive(Debug, Clone, Args)]
pub struct RationaleArgs {
    #[arg(long)]
    pub backends: PathBuf,
    /// Dataset holding `--problem-id`.
    #[arg(long, requires = "problem_id")]
    pub dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset", conflicts_with = "question")]
    pub problem_id: Option<String>,
    /// Inline question (instead of a dataset problem).
    #[arg(long, required_unless_present = "problem_id")]
    pub question: Option<String>,
    /// Inline option; repeat for each choice.
    #[arg(long = "choice")]
    pub choices: Vec<String>,
    #[arg(long)]
    pub context: Option<String>,
    #[arg(long)]
    pub image: Option<String>,
    /// Correct option letter for the inline question.
    #[arg(long)]
    pub answer: Option<char>,
    /// Drop the image, so nothing is routed to recognition.
    #[arg(long)]
    pub no_image: bool,
    /// Also print each stage's prompt.
    #[arg(long)]
    pub show_prompts: bool,
    /// Print the prediction as JSON (latency zeroed) instead of text.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub split: Split,
    #[arg(long)]
    pub subject: Option<Subject>,
    /// Stratified sample size.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub backends: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Problems in flight at once.
    #[arg(long, default_value_t = 4)]
    pub parallel: usize,
    /// Write predictions without stage transcripts.
    #[arg(long)]
    pub no_transcript: bool,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// One or more of md, json, csv (comma separated or repeated).
    #[arg(long, value_delimiter = ',', default_value = "md")]
    pub format: Vec<ReportFormat>,
    /// Directory for `report.<ext>` files; stdout when absent (single format only).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Row label in the report.
    #[arg(long, default_value = eval::DEFAULT_MODEL_TAG)]
    pub model: String,
}

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    /// Smaller instance counts; finishes in a few seconds.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale analytic gradients by 1 + δ (mutation check of the suite itself).
    #[arg(long, hide = true)]
    pub perturb_gradient: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CacheArgs {
    #[command(subcommand)]
    pub action: CacheAction,
    /// Backend config naming the cache directory.
    #[arg(long, global = true, conflicts_with = "dir")]
    pub backends: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum CacheAction {
    Stats,
    Clear,
}

impl PipelineFlags {
    fn config(&self, parallel_problems: usize) -> PipelineConfig {
        PipelineConfig {
            max_parallel_problems: parallel_problems,
            max_parallel_vqa: self.parallel_vqa,
            deconstruction_retries: self.retries,
            include_caption: !self.no_caption,
            ..PipelineConfig::default()
        }
    }
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime")
}

/// Reads `problems.json`, or one problem per line for `.jsonl`.
pub fn load_dataset(path: &Path) -> Result<(Vec<Problem>, String), CliError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io { path: path.into(), source })?;
    let digest = sha256_hex(&bytes);
    let problems = if path.extension().is_some_and(|e| e == "jsonl") {
        dataset::import_jsonl(BufReader::new(bytes.as_slice()))?
    } else {
        dataset::load_scienceqa(path)?
    };
    Ok((problems, digest))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Predictions { path: path.into(), message: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Predictions { path: path.into(), message: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

fn inline_problem(a: &RationaleArgs) -> Result<Problem, CliError> {
    let answer_index = match a.answer {
        Some(c) => Some(letter_index(c).ok_or_else(|| CliError::Usage(format!("`{c}` is not an option letter")))?),
        None => None,
    };
    let p = Problem {
        id: "inline".into(),
        question: a.question.clone().unwrap_or_default(),
        choices: a.choices.clone(),
        answer_index,
        hint: a.context.clone(),
        image: a.image.clone().map(ImageRef::new),
        subject: Subject::Natural,
        grade: 1,
        topic: None,
        split: Split::Test,
        reference_rationale: None,
    };
    validate_problem(p).map_err(|e| {
        let why: Vec<String> = e.violations.iter().map(|v| v.to_string()).collect();
        CliError::Usage(format!("inline question: {}", why.join("; ")))
    })
}

/// Runs one problem. The printed output leaves out latency.
pub fn cmd_rationale(a: &RationaleArgs, out: &mut dyn Write) -> Result<Prediction, CliError> {
    let cfg = BackendConfig::load(&a.backends)?;
    let mut problem = match (&a.dataset, &a.problem_id) {
        (Some(path), Some(id)) => {
            let (problems, _) = load_dataset(path)?;
            problems.into_iter().find(|p| &p.id == id).ok_or_else(|| CliError::NotFound(id.clone()))?
        }
        _ => inline_problem(a)?,
    };
    if a.no_image {
        problem.image = None;
    }
    let (backends, _) = cfg.build()?;
    let pipeline = Pipeline::new(backends, a.pipeline.config(1)).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut pred = runtime().block_on(pipeline.run(&problem));
    pred.transcript.clear_latency();
    let text = if a.json {
        serde_json::to_string_pretty(&pred).expect("prediction serializes") + "\n"
    } else {
        render_transcript(&problem, &pred, a.show_prompts)
    };
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))?;
    if let Some(ErrorTag::Backend { stage, class, message }) =
        pred.errors.iter().find(|e| matches!(e, ErrorTag::Backend { .. }))
    {
        return Err(CliError::Backend(format!("{stage}: {class}: {message}")));
    }
    Ok(pred)
}

fn selected(a: &RunArgs, problems: &[Problem]) -> Vec<Problem> {
    let pool = dataset::filter(problems, Some(a.split), a.subject, None);
    match a.sample {
        Some(n) => dataset::stratified_sample(&pool, n, a.seed),
        None => pool,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// Runs the selected problems and writes `predictions.jsonl` and
/// `manifest.json` under `--out`.
pub fn cmd_run(a: &RunArgs) -> Result<RunManifest, CliError> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let cfg = BackendConfig::load(&a.backends)?;
    let (problems, dataset_digest) = load_dataset(&a.dataset)?;
    let problems = selected(a, &problems);
    let pipeline_cfg = a.pipeline.config(a.parallel);
    let (backends, telemetry) = cfg.build()?;
    let templates = TemplateSet::builtin();
    let config = ConfigSnapshot {
        backends: cfg,
        generation: backends.generation.clone(),
        pipeline: pipeline_cfg.clone(),
        selection: Selection {
            split: a.split.as_str().into(),
            subject: a.subject.map(|s| s.as_scienceqa().into()),
            sample: a.sample,
            seed: a.seed,
        },
        transcripts: !a.no_transcript,
        templates_version: templates.version().into(),
    };
    let pipeline = Pipeline::new(backends, pipeline_cfg).map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut predictions = runtime().block_on(pipeline.run_batch(&problems));
    if a.no_transcript {
        for p in &mut predictions {
            p.transcript = Default::default();
        }
    }

    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let mut lines = String::new();
    for p in &predictions {
        lines.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        lines.push('\n');
    }
    write_file(&a.out.join(PREDICTIONS_FILE), &lines)?;

    let mut counts = RunCounts::tally(&predictions);
    counts.cache_hits = telemetry.cache_hits();
    counts.backend_calls = telemetry.backend_calls();
    let manifest = RunManifest {
        run_id: run_id(&config, &dataset_digest, templates.manifest_hash()),
        dataset: a.dataset.display().to_string(),
        dataset_digest,
        template_manifest_hash: templates.manifest_hash().into(),
        config,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        counts,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&a.out.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

/// Scores predictions; returns `(format, rendered report)` pairs.
pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<Vec<(ReportFormat, String)>, CliError> {
    let mut formats = a.format.clone();
    formats.dedup();
    if a.out.is_none() && formats.len() != 1 {
        return Err(CliError::Usage("several formats need --out <dir>".into()));
    }
    let predictions = read_predictions(&a.predictions)?;
    let (problems, _) = load_dataset(&a.dataset)?;
    let mut report = eval::score(&predictions, &problems)?;
    report.model = a.model.clone();
    let rendered: Vec<(ReportFormat, String)> = formats.iter().map(|f| (*f, eval::emit_report(&report, *f))).collect();
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            for (f, text) in &rendered {
                write_file(&dir.join(format!("report.{}", f.extension())), text)?;
            }
        }
        None => out.write_all(rendered[0].1.as_bytes()).map_err(io_err(Path::new("<stdout>")))?,
    }
    Ok(rendered)
}

pub fn cmd_selftest(a: &SelftestArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let opts = SelftestOptions { quick: a.quick, gradient_perturbation: a.perturb_gradient, seed: a.seed };
    let results = run_selftest(&opts);
    let mut first_failure = None;
    for r in &results {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{mark} {:<22} {:>6} ms  {}", r.name, r.elapsed_ms, r.detail);
        if !r.passed && first_failure.is_none() {
            first_failure = Some(format!("{}: {}", r.name, r.detail));
        }
    }
    let passed = results.iter().filter(|r| r.passed).count();
    let _ = writeln!(out, "{passed}/{} checks passed", results.len());
    match first_failure {
        Some(f) => Err(CliError::Selftest(f)),
        None => Ok(()),
    }
}

pub fn cmd_cache(a: &CacheArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = match (&a.dir, &a.backends) {
        (Some(d), _) => d.clone(),
        (None, Some(cfg)) => BackendConfig::load(cfg)?
            .cache_dir()
            .ok_or_else(|| ConfigError::Invalid("backend config has no cache_dir".into()))?,
        (None, None) => return Err(CliError::Usage("cache needs --backends <config> or --dir <path>".into())),
    };
    let store = DiskStore::new(&dir);
    let line = match a.action {
        CacheAction::Stats => {
            let (entries, bytes) = store.usage().map_err(io_err(&dir))?;
            format!("{}: {entries} entries, {bytes} bytes\n", dir.display())
        }
        CacheAction::Clear => {
            let removed = store.clear().map_err(io_err(&dir))?;
            format!("{}: removed {removed} entries\n", dir.display())
        }
    };
    out.write_all(line.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Rationale(a) => cmd_rationale(a, out).map(|_| ()),
        Command::Run(a) => {
            let m = cmd_run(a)?;
            let c = &m.counts;
            let _ = writeln!(
                out,
                "run {}: {} predictions ({} with errors), {} backend calls, {} cache hits -> {}",
                m.run_id,
                c.predictions,
                c.failures,
                c.backend_calls,
                c.cache_hits,
                a.out.display()
            );
            Ok(())
        }
        Command::Eval(a) => cmd_eval(a, out).map(|_| ()),
        Command::Selftest(a) => cmd_selftest(a, out),
        Command::Cache(a) => cmd_cache(a, out),
    }
}

/// Parses, runs and reports; returns the process exit code.
pub fn run_with_io<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error[{}]: {e}", e.tag());
            e.exit_code()
        }
    }
}

pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    run_with_io(args, &mut out, &mut err)
}
