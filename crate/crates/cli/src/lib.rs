//! Command-line front end for training, ablations and diagnostics.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use crlc::critics::CriticKind;
use crlc::data::{self, Dataset};
use crlc::losses::check_pc_gradient;
use crlc::pipeline::{self, AblationAxis, PcBackend, RunConfig, RunReport, TrainOutcome};
use crlc::{CrlcError, TwoHeadModel};

/// Environment variable consulted when no `--seed` flag is given.
pub const SEED_ENV: &str = "CRLC_SEED";

/// Largest relative error `grad-check` accepts.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "crlc", version, about = "Contrastive clustering with probability and feature heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Joint end-to-end training.
    Train(TrainArgs),
    /// Feature pretraining, neighbor mining, then cluster training.
    TwoStage(TrainArgs),
    /// End-to-end training plus cross-entropy on a few labeled samples.
    Semi(TrainArgs),
    /// One training run per value of a hyperparameter.
    Ablate(AblateArgs),
    /// Checks the closed-form probability-loss gradient against finite differences.
    GradCheck(GradCheckArgs),
    /// Cosine nearest neighbors of every sample.
    MineNeighbors(MineArgs),
    /// Scores a saved model on a labeled CSV dataset.
    Eval(EvalArgs),
    /// Writes a synthetic Gaussian mixture as CSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; falls back to CRLC_SEED, then to the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Zero the wall-clock fields so identical runs give identical files.
    #[arg(long)]
    reproducible: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch curve CSV; defaults to the report path with a .csv extension.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Save the trained model here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisName {
    Critic,
    Lambda2,
    PcBackend,
    Momentum,
    NumNegatives,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    axis: AxisName,
    /// Comma-separated values, e.g. `log_dot,dot` or `0,10`.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// JSON array of reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MineArgs {
    /// CSV dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k: usize,
    /// Embed with this model first; otherwise rows are normalized as given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CSV with one row of neighbor indices per sample.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Subhead to score.
    #[arg(long, default_value_t = 0)]
    head: usize,
    /// Also read the subhead with the class identity mapping.
    #[arg(long)]
    labeled_mapping: bool,
    /// Evaluation JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    n_per_class: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure of one invocation, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<CrlcError> for CliError {
    fn from(e: CrlcError) -> Self {
        let code = match e {
            CrlcError::Io { .. } | CrlcError::Parse { .. } | CrlcError::Schema(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), executes the command, prints
/// diagnostics to stderr and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("crlc: {}", e.message);
            e.code
        }
    }
}

fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train(a) => train(a, Mode::EndToEnd),
        Command::TwoStage(a) => train(a, Mode::TwoStage),
        Command::Semi(a) => train(a, Mode::Semi),
        Command::Ablate(a) => ablate(a),
        Command::GradCheck(a) => grad_check(a),
        Command::MineNeighbors(a) => mine(a),
        Command::Eval(a) => eval(a),
        Command::GenData(a) => gen_data(a),
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

/// Reads the config file (or defaults) and applies the seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> std::result::Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed.map_or_else(env_seed, |s| Ok(Some(s)))? {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError { code: 1, message: format!("cannot write {}: {e}", path.display()) })
}

fn report_json(report: &mut RunReport, reproducible: bool) -> CliResult<String> {
    if reproducible {
        report.strip_timing();
    }
    let mut s = report.to_json()?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Copy)]
enum Mode {
    EndToEnd,
    TwoStage,
    Semi,
}

fn train(a: TrainArgs, mode: Mode) -> CliResult<()> {
    let cfg = load_config(a.run.config.as_deref(), a.run.seed)?;
    let TrainOutcome { mut report, model } = match mode {
        Mode::EndToEnd => pipeline::train_end_to_end(&cfg)?,
        Mode::TwoStage => pipeline::train_two_stage(&cfg)?,
        Mode::Semi => {
            let ds = cfg.dataset.load(cfg.seed)?;
            let labeled = pipeline::labeled_subset(&cfg, &ds)?;
            pipeline::train_semi_on(&cfg, &ds, &labeled)?
        }
    };
    write_file(&a.out, &report_json(&mut report, a.run.reproducible)?)?;
    let curves = a.curves.unwrap_or_else(|| a.out.with_extension("csv"));
    write_file(&curves, &report.curves_csv())?;
    if let Some(path) = &a.checkpoint {
        model.save(path)?;
    }
    if let Some(m) = report.final_metrics {
        println!("acc {:.4} nmi {:.4} ari {:.4}", m.acc, m.nmi, m.ari);
    }
    Ok(())
}

fn parse_values<T: std::str::FromStr>(values: &[String]) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    values
        .iter()
        .map(|v| v.trim().parse::<T>().map_err(|e| CliError::usage(format!("invalid axis value {v:?}: {e}"))))
        .collect()
}

fn parse_axis(name: AxisName, values: &[String]) -> CliResult<AblationAxis> {
    Ok(match name {
        AxisName::Critic => AblationAxis::Critic(parse_values::<CriticKind>(values)?),
        AxisName::Lambda2 => AblationAxis::Lambda2(parse_values(values)?),
        AxisName::Momentum => AblationAxis::Momentum(parse_values(values)?),
        AxisName::NumNegatives => AblationAxis::NumNegatives(parse_values(values)?),
        AxisName::PcBackend => AblationAxis::PcBackend(
            values
                .iter()
                .map(|v| match v.trim() {
                    "in_batch" => Ok(PcBackend::InBatch),
                    "memory_bank" => Ok(PcBackend::MemoryBank),
                    other => Err(CliError::usage(format!("invalid pc backend {other:?}"))),
                })
                .collect::<CliResult<_>>()?,
        ),
    })
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let cfg = load_config(a.run.config.as_deref(), a.run.seed)?;
    let axis = parse_axis(a.axis, &a.values)?;
    let mut reports = pipeline::ablation_sweep(&cfg, &axis, a.jobs)?;
    if a.run.reproducible {
        reports.iter_mut().for_each(RunReport::strip_timing);
    }
    let mut json = serde_json::to_string_pretty(&reports).map_err(CrlcError::from)?;
    json.push('\n');
    write_file(&a.out, &json)?;
    for (v, r) in a.values.iter().zip(&reports) {
        if let Some(m) = r.final_metrics {
            println!("{v}: acc {:.4} nmi {:.4} ari {:.4}", m.acc, m.nmi, m.ari);
        }
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CliResult<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let worst = check_pc_gradient(a.trials, seed)?;
    println!("max relative error {worst:e} over {} trials", a.trials);
    if worst <= GRAD_CHECK_TOL {
        Ok(())
    } else {
        Err(CliError { code: 1, message: format!("gradient check failed: {worst:e} > {GRAD_CHECK_TOL:e}") })
    }
}

fn mine(a: MineArgs) -> CliResult<()> {
    let ds = data::load_csv(&a.data, None)?;
    let features = match &a.checkpoint {
        Some(path) => {
            let model = TwoHeadModel::load(path)?;
            pipeline::embed(&model, ds.features.view())?
        }
        None => {
            let mut f = ds.features.clone();
            for (i, mut row) in f.outer_iter_mut().enumerate() {
                let n = row.dot(&row).sqrt();
                if n == 0.0 {
                    return Err(CliError { code: 1, message: format!("row {i} has zero norm") });
                }
                row /= n;
            }
            f
        }
    };
    let neighbors = pipeline::mine_neighbors(features.view(), a.k)?;
    let mut out = String::new();
    for row in &neighbors {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    write_file(&a.out, &out)
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let model = TwoHeadModel::load(&a.checkpoint)?;
    let ds: Dataset = data::load_csv(&a.data, Some(model.spec().classes))?;
    let record = pipeline::evaluate(&model, &ds, a.head, a.labeled_mapping)?;
    let mut json = serde_json::to_string_pretty(&record).map_err(CrlcError::from)?;
    json.push('\n');
    match &a.out {
        Some(p) => write_file(p, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let ds = data::gen_mixture(
        a.classes,
        a.dim,
        a.n_per_class,
        a.separation,
        crlc::seed::derive_seed(seed, crlc::seed::DATA),
    )?;
    data::write_csv(&ds, &a.out)?;
    Ok(())
}
