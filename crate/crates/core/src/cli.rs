//! The `vcd` command line. Exit codes: 0 on success, 1 when a run fails, 2 for
//! usage or configuration errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::metrics::{read_scores, write_profile_csv, MetricsError, MetricsReport, DEFAULT_RESAMPLES};
use crate::networks::Checkpoint;
use crate::trainer::{
    self, plan_ablation, run_ablation, AblationAxis, TrainConfig, TrainError, EFFECTIVE_CONFIG, EVAL_CHECKPOINT,
    FINAL_CHECKPOINT, NONFINITE_DUMP, RUN_LOG, TIMING_LOG,
};

#[derive(Debug, Parser)]
#[command(name = "vcd", version, about = "View-consistent dynamics on a pixel gridworld")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one agent and write its run directory.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Train a grid of configurations and seeds and collect their scores.
    Ablate(AblateArgs),
    /// Aggregate statistics and performance profile of a score file.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite the artifacts of an earlier run in --out.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config whose environment section describes the evaluation environment.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub episodes: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Axis to sweep: lambda, k_steps, mode, predictors or tau. Repeat for a cross product.
    #[arg(long = "axis", required = true)]
    pub axes: Vec<String>,
    /// Comma-separated values, one --values per --axis, in the same order.
    #[arg(long = "values", required = true)]
    pub values: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// CSV with header config,seed,score or task,run,score.
    #[arg(long)]
    pub scores: PathBuf,
    /// JSON report to write.
    #[arg(long)]
    pub report: PathBuf,
    /// Profile CSV to write (rho,fraction,ci_low,ci_high).
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

/// Reads a TOML config; every field is optional and unknown keys are errors.
pub fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let config: TrainConfig =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    config
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
    Ok(config)
}

const RUN_ARTIFACTS: [&str; 6] = [
    RUN_LOG,
    TIMING_LOG,
    FINAL_CHECKPOINT,
    EVAL_CHECKPOINT,
    EFFECTIVE_CONFIG,
    NONFINITE_DUMP,
];

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let out = &args.out;
    let existing: Vec<PathBuf> = RUN_ARTIFACTS.iter().map(|n| out.join(n)).filter(|p| p.exists()).collect();
    if !existing.is_empty() {
        if !args.force {
            return Err(CliError::Usage(format!(
                "{} already holds a run; pass --force to overwrite it",
                out.display()
            )));
        }
        for p in existing {
            fs::remove_file(&p).map_err(|e| CliError::Runtime(format!("cannot remove {}: {e}", p.display())))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let outcome = trainer::train(&config, Some(out))?;
    match outcome.final_score {
        Some(s) => println!(
            "seed {}: final eval score {s} after {} steps ({} updates); artifacts in {}",
            config.seed,
            config.total_env_steps,
            outcome.updates,
            out.display()
        ),
        None => println!("no environment steps; initial checkpoint in {}", out.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluationRecord {
    checkpoint: String,
    episodes: u32,
    seed: u64,
    mean_return: f64,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let config = load_config(args.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(|e| CliError::Usage(e.to_string()))?;
    let stack = ckpt.to_stack().map_err(|e| CliError::Usage(e.to_string()))?;
    if stack.input_dim != config.env.observation_len() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} input features but the environment renders {}",
            stack.input_dim,
            config.env.observation_len()
        )));
    }
    if args.episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    let mean_return = trainer::evaluate(&stack, &config.env, args.episodes, args.seed)?;
    println!("mean return over {} episodes: {mean_return}", args.episodes);
    if let Some(out) = args.out {
        let rec = EvaluationRecord {
            checkpoint: args.checkpoint.display().to_string(),
            episodes: args.episodes,
            seed: args.seed,
            mean_return,
        };
        fs::write(&out, serde_json::to_string_pretty(&rec).expect("serializes"))
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    }
    Ok(())
}

fn split_csv(text: &str) -> Vec<String> {
    text.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    if args.axes.len() != args.values.len() {
        return Err(CliError::Usage(format!(
            "{} --axis flags but {} --values flags",
            args.axes.len(),
            args.values.len()
        )));
    }
    let axes = args
        .axes
        .iter()
        .zip(&args.values)
        .map(|(a, v)| Ok((a.parse::<AblationAxis>()?, split_csv(v))))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let seeds = split_csv(&args.seeds)
        .iter()
        .map(|s| s.parse::<u64>().map_err(|_| CliError::Usage(format!("invalid seed '{s}'"))))
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds is empty".into()));
    }
    let base = load_config(args.config.as_deref())?;
    if base.total_env_steps == 0 {
        return Err(CliError::Usage("ablations need total_env_steps > 0".into()));
    }
    let plan = plan_ablation(&base, &axes, &seeds)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;
    println!("{} runs ({} configurations x {} seeds)", plan.len(), plan.len() / seeds.len(), seeds.len());
    let outcome = run_ablation(&base, &axes, &seeds, &args.out, args.jobs)?;
    for (name, col) in outcome.scores.task_names().iter().zip(outcome.scores.columns()) {
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        println!("{name}: mean normalized score {mean:.4}");
    }
    println!("scores written to {}", args.out.join("scores.csv").display());
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<(), CliError> {
    let matrix = read_scores(&args.scores).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = MetricsReport::compute(&matrix, args.resamples, args.alpha, args.seed).map_err(|e| match e {
        MetricsError::TooFewResamples(_) | MetricsError::InvalidAlpha(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&args.report, json)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", args.report.display())))?;
    if let Some(p) = &args.profile {
        write_profile_csv(p, &report.profile).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let o = &report.overall;
    println!(
        "{} tasks x {} runs: IQM {:.4} [{:.4}, {:.4}], mean {:.4} [{:.4}, {:.4}], median {:.4} [{:.4}, {:.4}]",
        report.num_tasks,
        report.num_runs,
        o.iqm.value,
        o.iqm.ci_low,
        o.iqm.ci_high,
        o.mean.value,
        o.mean.ci_low,
        o.mean.ci_high,
        o.median.value,
        o.median.ci_low,
        o.median.ci_high
    );
    for t in &report.per_task {
        println!(
            "  {}: IQM {:.4} [{:.4}, {:.4}]",
            t.task, t.aggregates.iqm.value, t.aggregates.iqm.ci_low, t.aggregates.iqm.ci_high
        );
    }
    Ok(())
}
