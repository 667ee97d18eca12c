//! Command-line front end. `run` parses arguments, dispatches to a
//! subcommand and maps failures onto the exit-code taxonomy:
//! 1 configuration, 2 data, 3 numerical abort.

pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use camnet_core::baselines::cvm_prediction_set;
use camnet_core::dataset::{dataset_split, dataset_stats};
use camnet_core::metrics::{evaluate, MetricsReport, PredictionSet};
use camnet_core::pipeline::{camify, ingest_records, IngestReport};
use camnet_core::records::{parse_records, write_jsonl, RecordFormat};
use camnet_core::scenario::{read_scenario, read_scenarios, write_scenarios, Scenario, MANIFEST_FILE};
use camnet_model::ablation::{ablation_csv, default_strategies, run_ablation};
use camnet_model::model::{SampleOptions, ScenarioSamples};
use camnet_model::train::{load_checkpoint, train};
use camnet_model::{ExperimentConfig, ModelError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Autodiff(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "camnet", version, about = "CAM trajectory data pipeline and graph-attention VRNN forecaster")]
pub struct Cli {
    /// Seed for every stochastic step (split shuffle, training, sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn CAM record files into validated scenarios.
    Ingest(IngestArgs),
    /// Replay the CAM generation rules over dense scenario data.
    Camify(CamifyArgs),
    /// Dataset summary statistics.
    Stats(StatsArgs),
    /// Seeded train/validation split.
    Split(SplitArgs),
    /// Train the model.
    Train(TrainArgs),
    /// Score a checkpoint or the CVM baseline.
    Eval(EvalArgs),
    /// Sample future trajectories for one scenario.
    Predict(PredictArgs),
    /// Render a scenario and its predictions as SVG.
    Plot(PlotArgs),
    /// Train and score one model per graph connectivity strategy.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Jsonl,
    Csv,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Record file or directory of record files.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: Format,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 110)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct CamifyArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f64,
    /// Parent of the `train/` and `val/` directories (defaults to the parent of `--in`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment JSON (`{"model": {...}, "train": {...}}`); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint's parameters with fresh optimizer and schedules.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Predictor {
    Camnet,
    Cvm,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,6")]
    pub k: Vec<usize>,
    #[arg(long, value_enum, default_value = "camnet")]
    pub baseline: Predictor,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output of `predict`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// CSV with one row per strategy.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
/// `Ok` carries text for stdout; help and version are returned as `Ok` too.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => return Ok(e.to_string()),
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed;
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Camify(a) => camify_cmd(a),
        Command::Stats(a) => stats(a),
        Command::Split(a) => split(a, seed.unwrap_or(0)),
        Command::Train(a) => train_cmd(a, seed),
        Command::Eval(a) => eval(a, seed.unwrap_or(0)),
        Command::Predict(a) => predict(a, seed.unwrap_or(0)),
        Command::Plot(a) => plot_cmd(a),
        Command::Ablate(a) => ablate(a, seed),
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable output") + "\n"
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Scenario files plus a manifest, so other files in `dir` are ignored on load.
fn write_set(dir: &Path, set: &[Scenario]) -> Result<(), CliError> {
    write_scenarios(dir, set).map_err(data)?;
    let manifest: String = set.iter().map(|s| format!("{}.json\n", s.id)).collect();
    write(&dir.join(MANIFEST_FILE), &manifest)
}

fn load_set(path: &Path) -> Result<Vec<Scenario>, CliError> {
    let s = read_scenarios(path).map_err(data)?;
    if s.is_empty() {
        return Err(CliError::Data(format!("{}: no scenarios", path.display())));
    }
    Ok(s)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn record_files(input: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .{ext} files", input.display())));
    }
    Ok(files)
}

#[derive(Serialize)]
struct IngestSummary<'a> {
    files: usize,
    malformed_lines: usize,
    #[serde(flatten)]
    report: &'a IngestReport,
}

pub const INGEST_REPORT: &str = "ingest_report.json";

fn ingest(a: IngestArgs) -> Result<String, CliError> {
    if a.stride == 0 {
        return Err(CliError::Config("--stride must be positive".into()));
    }
    let (fmt, ext) = match a.format {
        Format::Jsonl => (RecordFormat::Jsonl, "jsonl"),
        Format::Csv => (RecordFormat::Csv, "csv"),
    };
    let files = record_files(&a.input, ext)?;
    let mut records = Vec::new();
    let mut malformed = 0;
    for f in &files {
        let p = parse_records(f, fmt).map_err(data)?;
        malformed += p.rejected;
        records.extend(p.records);
    }
    let report = ingest_records(records, a.stride);
    write_set(&a.out, &report.scenarios)?;
    let summary = to_json(&IngestSummary { files: files.len(), malformed_lines: malformed, report: &report });
    write(&a.out.join(INGEST_REPORT), &summary)?;
    Ok(summary)
}

fn camify_cmd(a: CamifyArgs) -> Result<String, CliError> {
    let scenarios = load_set(&a.input)?;
    let records = camify(&scenarios).map_err(data)?;
    write_jsonl(&a.out, &records).map_err(data)?;
    Ok(to_json(&serde_json::json!({ "scenarios": scenarios.len(), "records": records.len() })))
}

fn stats(a: StatsArgs) -> Result<String, CliError> {
    let scenarios = read_scenarios(&a.input).map_err(data)?;
    let text = to_json(&dataset_stats(&scenarios));
    write(&a.out, &text)?;
    Ok(text)
}

fn split(a: SplitArgs, seed: u64) -> Result<String, CliError> {
    let scenarios = load_set(&a.input)?;
    let (tr, va) = dataset_split(scenarios, a.ratio, seed).map_err(|e| CliError::Config(e.to_string()))?;
    let out = match a.out {
        Some(o) => o,
        None => a.input.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    for (name, set) in [("train", &tr), ("val", &va)] {
        let dir = out.join(name);
        write_set(&dir, set)?;
    }
    Ok(to_json(&serde_json::json!({ "train": tr.len(), "val": va.len(), "seed": seed })))
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<String, CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let init = match &a.warm_start {
        Some(p) => {
            let (m, side) = load_checkpoint(p)?;
            if side.config.model != cfg.model {
                log::warn!("warm start: checkpoint config differs from {}; using the new config", a.config.as_ref().map_or("defaults".into(), |p| p.display().to_string()));
            }
            Some(m)
        }
        None => None,
    };
    let tr = load_set(&a.train)?;
    let va = match &a.val {
        Some(p) => load_set(p)?,
        None => Vec::new(),
    };
    let out = train(&cfg, &tr, &va, Some(&a.out), init)?;
    let last = out.log.last().copied();
    Ok(to_json(&serde_json::json!({ "epochs": out.log.len(), "best_epoch": out.best_epoch, "last": last })))
}

#[derive(Serialize)]
struct EvalReport {
    predictor: &'static str,
    scenarios: usize,
    /// `None` where the predictor has fewer modes than `k`.
    reports: Vec<(usize, Option<MetricsReport>)>,
}

fn eval(a: EvalArgs, seed: u64) -> Result<String, CliError> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(CliError::Config("--k needs positive values".into()));
    }
    let scenarios = load_set(&a.data)?;
    let kmax = *a.k.iter().max().unwrap();
    let (name, sets): (_, Vec<PredictionSet>) = match a.baseline {
        Predictor::Cvm => ("cvm", scenarios.iter().map(cvm_prediction_set).collect::<Result<_, _>>().map_err(data)?),
        Predictor::Camnet => {
            let path = a.ckpt.as_ref().ok_or_else(|| CliError::Config("--ckpt is required for camnet".into()))?;
            let (model, _) = load_checkpoint(path)?;
            ("camnet", camnet_model::train::predict_sets(&model, &scenarios, kmax, seed)?)
        }
    };
    let modes = sets.iter().map(|s| s.modes.len()).min().unwrap_or(0);
    let mut reports = Vec::new();
    for &k in &a.k {
        let r = if k <= modes { Some(evaluate(&sets, k).map_err(data)?) } else { None };
        reports.push((k, r));
    }
    let text = to_json(&EvalReport { predictor: name, scenarios: scenarios.len(), reports });
    if let Some(p) = &a.out {
        write(p, &text)?;
    }
    Ok(text)
}

fn predict(a: PredictArgs, seed: u64) -> Result<String, CliError> {
    if a.k == 0 {
        return Err(CliError::Config("--k must be positive".into()));
    }
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let scenario = read_scenario(&a.scenario).map_err(data)?;
    let mut out = model.sample_trajectories(&[scenario], SampleOptions { k: a.k, seed, prior_scale: 1.0 })?;
    let text = to_json(&out.remove(0));
    if let Some(p) = &a.out {
        write(p, &text)?;
    }
    Ok(text)
}

fn plot_cmd(a: PlotArgs) -> Result<String, CliError> {
    let scenario = read_scenario(&a.scenario).map_err(data)?;
    let pred: Option<ScenarioSamples> = match &a.pred {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    if let Some(p) = &pred {
        if p.scenario_id != scenario.id {
            return Err(CliError::Data(format!("predictions are for {}, scenario is {}", p.scenario_id, scenario.id)));
        }
    }
    let svg = plot::render(&scenario, pred.as_ref());
    write(&a.out, &svg)?;
    Ok(String::new())
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> Result<String, CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let tr = load_set(&a.train)?;
    let va = load_set(&a.val)?;
    let rows = run_ablation(&cfg, &tr, &va, &default_strategies())?;
    let text = ablation_csv(&rows);
    write(&a.out, &text)?;
    Ok(text)
}
