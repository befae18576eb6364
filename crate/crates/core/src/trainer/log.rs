use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::losses::{LossMode, LossReport};

/// One line of `run.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Environment steps taken so far.
    pub step: u64,
    pub seed: u64,
    #[serde(flatten)]
    pub event: LogEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Episode {
        episodic_return: f64,
        length: u32,
    },
    Update {
        update: u64,
        mode: LossMode,
        #[serde(flatten)]
        losses: LossReport,
    },
    Eval {
        eval_score: f64,
        episodes: u32,
    },
}

/// Collects records and mirrors them to a JSONL file when one is open.
#[derive(Debug, Default)]
pub struct RunLog {
    records: Vec<LogRecord>,
    sink: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            records: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, record: LogRecord) -> std::io::Result<()> {
        if let Some(sink) = &mut self.sink {
            serde_json::to_writer(&mut *sink, &record)?;
            sink.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        match &mut self.sink {
            Some(s) => s.flush(),
            None => Ok(()),
        }
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LogRecord> {
        self.records
    }
}

pub fn read_run_log(path: &Path) -> std::io::Result<Vec<LogRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// `(step, eval_score)` pairs in log order.
pub fn learning_curve(records: &[LogRecord]) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter_map(|r| match r.event {
            LogEvent::Eval { eval_score, .. } => Some((r.step, eval_score)),
            _ => None,
        })
        .collect()
}
