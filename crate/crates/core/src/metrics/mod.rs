//! Aggregate statistics over runs and tasks: normalization, mean, median and
//! interquartile mean, stratified percentile bootstrap intervals, and
//! performance profiles.
//!
//! Scores are stored per task column; every column holds the same number of
//! runs. Aggregates follow the usual conventions of the RL evaluation
//! literature: the mean is taken over all runs and tasks, the median over
//! per-task means, and the IQM over all scores pooled.

mod io;

pub use io::{
    read_scores, read_scores_from, write_profile_csv, write_scores_csv, MetricsReport, ProfilePoint, TaskReport,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, SplitMix64};

pub const DEFAULT_RESAMPLES: usize = 2000;
pub const MIN_RESAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no scores")]
    Empty,
    #[error("task '{task}' has {got} runs, expected {expected}")]
    RaggedTask { task: String, expected: usize, got: usize },
    #[error("score for task '{task}' is not finite")]
    NonFinite { task: String },
    #[error("normalization bounds are degenerate (low {low} == high {high})")]
    DegenerateNormalization { low: f64, high: f64 },
    #[error("{got} normalization bounds for {expected} tasks")]
    BoundsCount { expected: usize, got: usize },
    #[error("at least {MIN_RESAMPLES} resamples are required, got {0}")]
    TooFewResamples(usize),
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("threshold grid must be sorted ascending")]
    UnsortedGrid,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("{path}: line {line}: {message}")]
    Csv { path: String, line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Scores of M runs on N tasks, stored as N columns of length M.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    task_names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(task_names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        if columns.is_empty() || columns[0].is_empty() {
            return Err(MetricsError::Empty);
        }
        if task_names.len() != columns.len() {
            return Err(MetricsError::BoundsCount {
                expected: columns.len(),
                got: task_names.len(),
            });
        }
        let m = columns[0].len();
        for (name, col) in task_names.iter().zip(&columns) {
            if col.len() != m {
                return Err(MetricsError::RaggedTask {
                    task: name.clone(),
                    expected: m,
                    got: col.len(),
                });
            }
            if col.iter().any(|x| !x.is_finite()) {
                return Err(MetricsError::NonFinite { task: name.clone() });
            }
        }
        Ok(Self { task_names, columns })
    }

    /// A single task holding `values` as its runs.
    pub fn single_task(name: &str, values: Vec<f64>) -> Result<Self, MetricsError> {
        Self::new(vec![name.to_string()], vec![values])
    }

    pub fn num_runs(&self) -> usize {
        self.columns[0].len()
    }

    pub fn num_tasks(&self) -> usize {
        self.columns.len()
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn column(&self, task: usize) -> &[f64] {
        &self.columns[task]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.columns.iter().flatten().copied()
    }

    /// The sub-matrix of one task.
    pub fn task(&self, task: usize) -> ScoreMatrix {
        ScoreMatrix {
            task_names: vec![self.task_names[task].clone()],
            columns: vec![self.columns[task].clone()],
        }
    }

    /// Per-task min-max normalization with `bounds[n] = (low, high)`.
    pub fn normalized(&self, bounds: &[(f64, f64)]) -> Result<ScoreMatrix, MetricsError> {
        if bounds.len() != self.num_tasks() {
            return Err(MetricsError::BoundsCount {
                expected: self.num_tasks(),
                got: bounds.len(),
            });
        }
        let columns = self
            .columns
            .iter()
            .zip(bounds)
            .map(|(col, &(lo, hi))| col.iter().map(|&x| normalize_hns(x, lo, hi)).collect())
            .collect::<Result<Vec<Vec<f64>>, _>>()?;
        ScoreMatrix::new(self.task_names.clone(), columns)
    }

    /// Resample each column with replacement, independently.
    fn resample(&self, rng: &mut SplitMix64) -> ScoreMatrix {
        let m = self.num_runs() as u64;
        let columns = self
            .columns
            .iter()
            .map(|col| (0..m).map(|_| col[rng.below(m) as usize]).collect())
            .collect();
        ScoreMatrix {
            task_names: self.task_names.clone(),
            columns,
        }
    }
}

/// `(agent - random) / (human - random)`.
pub fn normalize_hns(agent: f64, random: f64, human: f64) -> Result<f64, MetricsError> {
    if human == random {
        return Err(MetricsError::DegenerateNormalization { low: random, high: human });
    }
    Ok((agent - random) / (human - random))
}

pub fn mean(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn median(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let v = sorted(values);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Interquartile mean: a quarter of the mass is trimmed from each end of the
/// sorted values. When `n / 4` is fractional, the boundary items enter with
/// the fraction of their unit interval that lies inside `[n/4, 3n/4]`.
pub fn iqm(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let v = sorted(values);
    let n = v.len() as f64;
    let (lo, hi) = (0.25 * n, 0.75 * n);
    let mut acc = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
        if w > 0.0 {
            acc += w * x;
        }
    }
    Ok(acc / (hi - lo))
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Aggregate statistic of a score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Mean,
    Median,
    Iqm,
}

impl Aggregate {
    pub const ALL: [Aggregate; 3] = [Aggregate::Mean, Aggregate::Median, Aggregate::Iqm];

    pub fn compute(self, matrix: &ScoreMatrix) -> f64 {
        match self {
            Aggregate::Mean => {
                let task_means: Vec<f64> = matrix.columns.iter().map(|c| mean(c).expect("non-empty")).collect();
                mean(&task_means).expect("non-empty")
            }
            Aggregate::Median => {
                let task_means: Vec<f64> = matrix.columns.iter().map(|c| mean(c).expect("non-empty")).collect();
                median(&task_means).expect("non-empty")
            }
            Aggregate::Iqm => iqm(&matrix.values().collect::<Vec<_>>()).expect("non-empty"),
        }
    }
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Sample standard deviation.
pub fn standard_deviation(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// The statistic evaluated on `resamples` stratified resamples. Resample `r`
/// draws from its own stream seeded with `derive_seed(seed, r)`, so the
/// result does not depend on how the work is scheduled.
pub fn bootstrap_distribution<F>(matrix: &ScoreMatrix, statistic: F, resamples: usize, seed: u64) -> Vec<f64>
where
    F: Fn(&ScoreMatrix) -> f64 + Sync,
{
    (0..resamples as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = SplitMix64::new(derive_seed(seed, r));
            statistic(&matrix.resample(&mut rng))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    /// Standard deviation of the resample distribution.
    pub standard_error: f64,
}

/// Percentile bootstrap interval at level `1 - alpha`.
pub fn stratified_bootstrap_ci<F>(
    matrix: &ScoreMatrix,
    statistic: F,
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<Interval, MetricsError>
where
    F: Fn(&ScoreMatrix) -> f64 + Sync,
{
    check_bootstrap_args(resamples, alpha)?;
    let mut dist = bootstrap_distribution(matrix, statistic, resamples, seed);
    let standard_error = standard_deviation(&dist);
    dist.sort_by(f64::total_cmp);
    Ok(Interval {
        low: percentile(&dist, alpha / 2.0),
        high: percentile(&dist, 1.0 - alpha / 2.0),
        standard_error,
    })
}

fn check_bootstrap_args(resamples: usize, alpha: f64) -> Result<(), MetricsError> {
    if resamples < MIN_RESAMPLES {
        return Err(MetricsError::TooFewResamples(resamples));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricsError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Fraction of (run, task) scores strictly above each threshold, averaged
/// over runs within a task and then over tasks.
pub fn performance_profile(matrix: &ScoreMatrix, rho_grid: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if rho_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(MetricsError::UnsortedGrid);
    }
    Ok(profile_unchecked(matrix, rho_grid))
}

fn profile_unchecked(matrix: &ScoreMatrix, rho_grid: &[f64]) -> Vec<f64> {
    let n = matrix.num_tasks() as f64;
    let m = matrix.num_runs() as f64;
    let sorted_cols: Vec<Vec<f64>> = matrix.columns.iter().map(|c| sorted(c)).collect();
    rho_grid
        .iter()
        .map(|&rho| {
            sorted_cols
                .iter()
                .map(|col| (col.len() - col.partition_point(|&x| x <= rho)) as f64 / m)
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Profile with pointwise percentile-bootstrap bands.
pub fn performance_profile_with_ci(
    matrix: &ScoreMatrix,
    rho_grid: &[f64],
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ProfilePoint>, MetricsError> {
    check_bootstrap_args(resamples, alpha)?;
    let point = performance_profile(matrix, rho_grid)?;
    let curves: Vec<Vec<f64>> = (0..resamples as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = SplitMix64::new(derive_seed(seed, r));
            profile_unchecked(&matrix.resample(&mut rng), rho_grid)
        })
        .collect();
    Ok(rho_grid
        .iter()
        .enumerate()
        .map(|(j, &rho)| {
            let column: Vec<f64> = sorted(&curves.iter().map(|c| c[j]).collect::<Vec<_>>());
            ProfilePoint {
                rho,
                fraction: point[j],
                ci_low: percentile(&column, alpha / 2.0),
                ci_high: percentile(&column, 1.0 - alpha / 2.0),
            }
        })
        .collect())
}

/// Trapezoidal area under a profile sampled on `grid`.
pub fn auc_of_profile(grid: &[f64], fractions: &[f64]) -> f64 {
    grid.windows(2)
        .zip(fractions.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// `lo, lo + step, ...` up to and including `hi` (within rounding).
pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>, MetricsError> {
    if !(step > 0.0 && step.is_finite() && hi >= lo) {
        return Err(MetricsError::InvalidGrid(format!("lo {lo}, hi {hi}, step {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
    if *grid.last().expect("non-empty") < hi {
        grid.push(hi);
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean: Estimate,
    pub median: Estimate,
    pub iqm: Estimate,
}

impl AggregateReport {
    pub fn get(&self, aggregate: Aggregate) -> Estimate {
        match aggregate {
            Aggregate::Mean => self.mean,
            Aggregate::Median => self.median,
            Aggregate::Iqm => self.iqm,
        }
    }
}

/// Point estimates and bootstrap intervals of the three aggregates. Each
/// aggregate uses the same resampled matrices.
pub fn aggregate_report(
    matrix: &ScoreMatrix,
    resamples: usize,
    alpha: f64,
    seed: u64,
) -> Result<AggregateReport, MetricsError> {
    let estimate = |agg: Aggregate| -> Result<Estimate, MetricsError> {
        let ci = stratified_bootstrap_ci(matrix, |m| agg.compute(m), resamples, alpha, seed)?;
        Ok(Estimate {
            value: agg.compute(matrix),
            ci_low: ci.low,
            ci_high: ci.high,
            standard_error: ci.standard_error,
        })
    };
    Ok(AggregateReport {
        mean: estimate(Aggregate::Mean)?,
        median: estimate(Aggregate::Median)?,
        iqm: estimate(Aggregate::Iqm)?,
    })
}

#[cfg(test)]
mod tests;
