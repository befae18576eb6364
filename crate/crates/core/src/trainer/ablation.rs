//! Sweeps over one or more configuration axes. Every (configuration, seed)
//! pair trains in its own directory named by a hash of its full config, so an
//! interrupted sweep resumes by skipping runs that already wrote a score.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, train, TrainConfig, TrainError, SCORE_FILE};
use crate::losses::LossMode;
use crate::metrics::{write_scores_csv, ScoreMatrix};

pub const ABLATION_MANIFEST: &str = "ablation.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Lambda,
    KSteps,
    Mode,
    Predictors,
    Tau,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Lambda,
        AblationAxis::KSteps,
        AblationAxis::Mode,
        AblationAxis::Predictors,
        AblationAxis::Tau,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Lambda => "lambda",
            AblationAxis::KSteps => "k_steps",
            AblationAxis::Mode => "mode",
            AblationAxis::Predictors => "predictors",
            AblationAxis::Tau => "tau",
        }
    }

    /// Sets this axis of `config` to `value` and validates the result.
    pub fn apply(self, config: &mut TrainConfig, value: &str) -> Result<(), TrainError> {
        let invalid = |why: &str| TrainError::Config(format!("{}={value}: {why}", self.as_str()));
        match self {
            AblationAxis::Lambda => {
                config.loss.lambda = value.parse().map_err(|_| invalid("not a number"))?;
            }
            AblationAxis::KSteps => {
                config.loss.pred_steps = value.parse().map_err(|_| invalid("not a positive integer"))?;
            }
            AblationAxis::Mode => {
                config.loss.mode = value.parse::<LossMode>().map_err(|e| invalid(&e.to_string()))?;
            }
            AblationAxis::Predictors => {
                config.network.num_predictors = value.parse().map_err(|_| invalid("expected 0, 1 or 2"))?;
            }
            AblationAxis::Tau => {
                config.ema_tau = value.parse().map_err(|_| invalid("not a number"))?;
            }
        }
        config.validate().map_err(|e| invalid(&e.to_string()))
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationAxis::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            TrainError::Config(format!(
                "unknown ablation axis '{s}' (expected one of lambda, k_steps, mode, predictors, tau)"
            ))
        })
    }
}

/// One planned (configuration, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    /// Row label such as `lambda=0.5;k_steps=2`.
    pub label: String,
    pub seed: u64,
    /// Directory name under `runs/`: a hash of the full config.
    pub run_id: String,
    pub config: TrainConfig,
}

/// Content of each run's `score.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub run_id: String,
    pub seed: u64,
    pub label: String,
    /// Mean return of the last evaluation.
    pub eval_score: f64,
    /// `eval_score` min-max normalized by the environment's return range.
    pub normalized_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    /// Normalized final scores, one task column per configuration.
    pub scores: ScoreMatrix,
    pub runs: Vec<RunScore>,
}

pub fn run_id(config: &TrainConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
}

/// Expands the cross product of `axes` over `seeds`, validating every value
/// before anything runs. Rows are ordered with the first axis slowest.
pub fn plan_ablation(
    base: &TrainConfig,
    axes: &[(AblationAxis, Vec<String>)],
    seeds: &[u64],
) -> Result<Vec<AblationRun>, TrainError> {
    if axes.is_empty() {
        return Err(TrainError::Config("at least one ablation axis is required".into()));
    }
    if seeds.is_empty() {
        return Err(TrainError::Config("seed list is empty".into()));
    }
    let mut seen_seeds = seeds.to_vec();
    seen_seeds.sort_unstable();
    if seen_seeds.windows(2).any(|w| w[0] == w[1]) {
        return Err(TrainError::Config("seed list contains duplicates".into()));
    }
    for (i, (axis, values)) in axes.iter().enumerate() {
        if values.is_empty() {
            return Err(TrainError::Config(format!("axis {axis} has no values")));
        }
        if axes[..i].iter().any(|(a, _)| a == axis) {
            return Err(TrainError::Config(format!("axis {axis} given twice")));
        }
        for (j, v) in values.iter().enumerate() {
            if values[..j].contains(v) {
                return Err(TrainError::Config(format!("axis {axis} repeats value {v}")));
            }
            axis.apply(&mut base.clone(), v)?;
        }
    }

    let mut rows: Vec<(String, TrainConfig)> = vec![(String::new(), base.clone())];
    for (axis, values) in axes {
        let mut next = Vec::with_capacity(rows.len() * values.len());
        for (label, cfg) in &rows {
            for v in values {
                let mut c = cfg.clone();
                axis.apply(&mut c, v)?;
                let sep = if label.is_empty() { "" } else { ";" };
                next.push((format!("{label}{sep}{axis}={v}"), c));
            }
        }
        rows = next;
    }

    let mut runs = Vec::with_capacity(rows.len() * seeds.len());
    for (label, cfg) in rows {
        for &seed in seeds {
            let config = TrainConfig { seed, ..cfg.clone() };
            runs.push(AblationRun {
                label: label.clone(),
                seed,
                run_id: run_id(&config),
                config,
            });
        }
    }
    Ok(runs)
}

fn run_one(run: &AblationRun, runs_dir: &Path) -> Result<RunScore, TrainError> {
    let dir = runs_dir.join(&run.run_id);
    let score_path = dir.join(SCORE_FILE);
    if let Ok(text) = fs::read_to_string(&score_path) {
        if let Ok(done) = serde_json::from_str::<RunScore>(&text) {
            if done.run_id == run.run_id {
                ::log::info!("reusing finished run {} ({} seed {})", run.run_id, run.label, run.seed);
                return Ok(RunScore {
                    label: run.label.clone(),
                    ..done
                });
            }
        }
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    ::log::info!("starting run {} ({} seed {})", run.run_id, run.label, run.seed);
    let outcome = train(&run.config, Some(&dir))?;
    let eval_score = outcome
        .final_score
        .ok_or_else(|| TrainError::Config("ablation runs need total_env_steps > 0".into()))?;
    let (lo, hi) = run.config.env.return_range();
    let score = RunScore {
        run_id: run.run_id.clone(),
        seed: run.seed,
        label: run.label.clone(),
        eval_score,
        normalized_score: crate::metrics::normalize_hns(eval_score, lo, hi)?,
    };
    let text = serde_json::to_string_pretty(&score).expect("score serializes");
    fs::write(&score_path, text).map_err(io_err(&score_path))?;
    Ok(score)
}

#[derive(Serialize)]
struct Manifest<'a> {
    axes: Vec<(String, &'a [String])>,
    seeds: &'a [u64],
    runs: Vec<ManifestRun<'a>>,
}

#[derive(Serialize)]
struct ManifestRun<'a> {
    label: &'a str,
    seed: u64,
    dir: PathBuf,
}

/// Trains every planned run (at most `jobs` at a time) under `out/runs/`, then
/// writes `out/scores.csv` with one row per (configuration, seed) and a
/// manifest. Results are identical for any `jobs`.
pub fn run_ablation(
    base: &TrainConfig,
    axes: &[(AblationAxis, Vec<String>)],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<AblationOutcome, TrainError> {
    let plan = plan_ablation(base, axes, seeds)?;
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(io_err(&runs_dir))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<RunScore> =
        pool.install(|| plan.par_iter().map(|r| run_one(r, &runs_dir)).collect::<Result<_, _>>())?;

    let mut labels: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for r in &results {
        match labels.iter().position(|l| *l == r.label) {
            Some(i) => columns[i].push(r.normalized_score),
            None => {
                labels.push(r.label.clone());
                columns.push(vec![r.normalized_score]);
            }
        }
    }
    let scores = ScoreMatrix::new(labels, columns)?;
    let seed_labels: Vec<String> = seeds.iter().map(u64::to_string).collect();
    write_scores_csv(&out.join("scores.csv"), &scores, &seed_labels)?;

    let manifest = Manifest {
        axes: axes.iter().map(|(a, v)| (a.to_string(), v.as_slice())).collect(),
        seeds,
        runs: plan
            .iter()
            .map(|r| ManifestRun {
                label: &r.label,
                seed: r.seed,
                dir: PathBuf::from("runs").join(&r.run_id),
            })
            .collect(),
    };
    let path = out.join(ABLATION_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&path))?;
    Ok(AblationOutcome { scores, runs: results })
}
