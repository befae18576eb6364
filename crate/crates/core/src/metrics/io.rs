use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{aggregate_report, performance_profile_with_ci, uniform_grid, AggregateReport, MetricsError, ScoreMatrix};

const HEADERS: [[&str; 3]; 2] = [["config", "seed", "score"], ["task", "run", "score"]];
const PROFILE_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub rho: f64,
    pub fraction: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub aggregates: AggregateReport,
}

/// Everything `vcd metrics` writes to its JSON report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_tasks: usize,
    pub num_runs: usize,
    pub resamples: usize,
    pub alpha: f64,
    pub seed: u64,
    pub overall: AggregateReport,
    pub per_task: Vec<TaskReport>,
    pub profile: Vec<ProfilePoint>,
}

impl MetricsReport {
    /// Aggregates over the whole matrix and per task, plus the profile on a
    /// grid of step 0.01 covering `[min(0, lowest), max(1, highest)]`.
    pub fn compute(matrix: &ScoreMatrix, resamples: usize, alpha: f64, seed: u64) -> Result<Self, MetricsError> {
        let overall = aggregate_report(matrix, resamples, alpha, seed)?;
        let per_task = (0..matrix.num_tasks())
            .map(|n| {
                Ok(TaskReport {
                    task: matrix.task_names()[n].clone(),
                    aggregates: aggregate_report(&matrix.task(n), resamples, alpha, seed)?,
                })
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;
        let lo = matrix.values().fold(0.0, f64::min);
        let hi = matrix.values().fold(1.0, f64::max);
        let grid = uniform_grid(lo, hi, PROFILE_STEP)?;
        let profile = performance_profile_with_ci(matrix, &grid, resamples, alpha, seed)?;
        Ok(Self {
            num_tasks: matrix.num_tasks(),
            num_runs: matrix.num_runs(),
            resamples,
            alpha,
            seed,
            overall,
            per_task,
            profile,
        })
    }
}

pub fn read_scores(path: &Path) -> Result<ScoreMatrix, MetricsError> {
    let file = File::open(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_scores_from(file, &path.display().to_string())
}

/// Parses `config,seed,score` or `task,run,score` rows. Tasks keep their order
/// of first appearance and runs their row order.
pub fn read_scores_from<R: Read>(reader: R, label: &str) -> Result<ScoreMatrix, MetricsError> {
    let csv_err = |line: u64, message: String| MetricsError::Csv {
        path: label.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if !HEADERS.iter().any(|h| header == h) {
        return Err(csv_err(
            1,
            format!("header {header:?} must be 'config,seed,score' or 'task,run,score'"),
        ));
    }
    let mut names: Vec<String> = Vec::new();
    let mut runs: Vec<Vec<String>> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let (task, run, raw) = (&record[0], &record[1], &record[2]);
        let score: f64 = raw
            .parse()
            .map_err(|_| csv_err(line, format!("column '{}': '{raw}' is not a number", header[2])))?;
        if !score.is_finite() {
            return Err(csv_err(line, format!("column '{}': '{raw}' is not finite", header[2])));
        }
        let idx = match names.iter().position(|n| n == task) {
            Some(i) => i,
            None => {
                names.push(task.to_string());
                runs.push(Vec::new());
                columns.push(Vec::new());
                names.len() - 1
            }
        };
        if runs[idx].iter().any(|r| r == run) {
            return Err(csv_err(
                line,
                format!("duplicate entry for {} '{task}', {} '{run}'", header[0], header[1]),
            ));
        }
        runs[idx].push(run.to_string());
        columns[idx].push(score);
    }
    ScoreMatrix::new(names, columns).map_err(|e| match e {
        MetricsError::Empty => csv_err(1, "no score rows".into()),
        other => other,
    })
}

/// Writes `config,seed,score` rows; `run_labels[m]` names run `m`.
pub fn write_scores_csv(path: &Path, matrix: &ScoreMatrix, run_labels: &[String]) -> Result<(), MetricsError> {
    let io_err = |source: std::io::Error| MetricsError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::from("config,seed,score\n");
    for (name, col) in matrix.task_names().iter().zip(matrix.columns()) {
        for (run, score) in run_labels.iter().zip(col) {
            out.push_str(&format!("{},{run},{score}\n", quote(name)));
        }
    }
    File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(io_err)
}

pub fn write_profile_csv(path: &Path, points: &[ProfilePoint]) -> Result<(), MetricsError> {
    let mut out = String::from("rho,fraction,ci_low,ci_high\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.rho, p.fraction, p.ci_low, p.ci_high));
    }
    File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}
