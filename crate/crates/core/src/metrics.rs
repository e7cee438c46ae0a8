//! Round reports, CSV output and checkpoints.
//!
//! Output layout of a run directory:
//!
//! ```text
//! rounds.csv                    round,client_id,split,loss,accuracy
//! external.csv                  round,loss,accuracy
//! confusion_r{R}_c{C}.csv       global model on client C's test split
//! confusion_r{R}_external.csv   global model on the external set
//! init.fedw                     round-0 global model
//! checkpoints/global_r{R}.fedw  global model after round R
//! summary.txt                   key = value
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::federation::{FederationMask, GlobalModel};
use crate::nn::{Metrics, NUM_CLASSES};
use crate::wire::{decode_params, encode_params, Dtype, WireError};

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const EXTERNAL_CSV: &str = "external.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const INIT_CHECKPOINT: &str = "init.fedw";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("not found: {0}")]
    NotFound(PathBuf),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> MetricsError + '_ {
    move |source| MetricsError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Global model evaluated on one client's data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientEval {
    pub client_id: u32,
    pub train: Metrics,
    pub test: Metrics,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: u32,
    /// Clients whose updates were aggregated, ascending.
    pub participants: Vec<u32>,
    /// Empty when per-round evaluation is off.
    pub clients: Vec<ClientEval>,
    pub external: Option<Metrics>,
    /// Not written to any output file.
    pub wall_clock_s: f64,
}

/// Equality ignores `wall_clock_s`.
impl PartialEq for RoundReport {
    fn eq(&self, other: &Self) -> bool {
        self.round == other.round
            && self.participants == other.participants
            && self.clients == other.clients
            && self.external == other.external
    }
}

impl RoundReport {
    /// Mean of the per-client test accuracies.
    pub fn mean_test_accuracy(&self) -> Option<f64> {
        if self.clients.is_empty() {
            return None;
        }
        Some(self.clients.iter().map(|c| c.test.accuracy).sum::<f64>() / self.clients.len() as f64)
    }
}

/// Earliest round with the highest mean test accuracy.
pub fn best_round(reports: &[RoundReport]) -> Option<(u32, f64)> {
    let mut best: Option<(u32, f64)> = None;
    for r in reports {
        if let Some(acc) = r.mean_test_accuracy() {
            if best.map_or(true, |(_, b)| acc > b) {
                best = Some((r.round, acc));
            }
        }
    }
    best
}

/// First round whose mean test accuracy reaches `threshold`.
pub fn rounds_to_reach(reports: &[RoundReport], threshold: f64) -> Option<u32> {
    reports
        .iter()
        .find(|r| r.mean_test_accuracy().is_some_and(|a| a >= threshold))
        .map(|r| r.round)
}

pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn confusion_file(round: u32, client_id: u32) -> String {
    format!("confusion_r{round}_c{client_id}.csv")
}

pub fn external_confusion_file(round: u32) -> String {
    format!("confusion_r{round}_external.csv")
}

fn write_confusion(path: &Path, confusion: &[[u64; NUM_CLASSES]; NUM_CLASSES]) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    for row in confusion {
        w.write_record(row.iter().map(u64::to_string)).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `rounds.csv`, `external.csv` and the confusion matrices.
pub fn emit_csv(reports: &[RoundReport], out_dir: &Path) -> Result<(), MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyInput("reports"));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let rounds_path = out_dir.join(ROUNDS_CSV);
    let mut rounds = csv::Writer::from_path(&rounds_path).map_err(csv_err(&rounds_path))?;
    rounds
        .write_record(["round", "client_id", "split", "loss", "accuracy"])
        .map_err(csv_err(&rounds_path))?;
    let external_path = out_dir.join(EXTERNAL_CSV);
    let mut external = csv::Writer::from_path(&external_path).map_err(csv_err(&external_path))?;
    external
        .write_record(["round", "loss", "accuracy"])
        .map_err(csv_err(&external_path))?;

    for report in reports {
        let round = report.round.to_string();
        for c in &report.clients {
            let id = c.client_id.to_string();
            for (split, m) in [("train", &c.train), ("test", &c.test)] {
                rounds
                    .write_record([round.as_str(), &id, split, &fmt6(m.mean_loss), &fmt6(m.accuracy)])
                    .map_err(csv_err(&rounds_path))?;
            }
            write_confusion(&out_dir.join(confusion_file(report.round, c.client_id)), &c.test.confusion)?;
        }
        if let Some(m) = &report.external {
            external
                .write_record([round.as_str(), &fmt6(m.mean_loss), &fmt6(m.accuracy)])
                .map_err(csv_err(&external_path))?;
            write_confusion(&out_dir.join(external_confusion_file(report.round)), &m.confusion)?;
        }
    }
    rounds.flush().map_err(io_err(&rounds_path))?;
    external.flush().map_err(io_err(&external_path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: u32,
    pub client_id: u32,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<CsvRow>, MetricsError> {
    if !path.exists() {
        return Err(MetricsError::NotFound(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = reader.headers().map_err(csv_err(path))?.clone();
    if header.iter().collect::<Vec<_>>() != ["round", "client_id", "split", "loss", "accuracy"] {
        return Err(MetricsError::Parse {
            path: path.to_path_buf(),
            message: format!("unexpected header {header:?}"),
        });
    }
    let parse_err = |message: String| MetricsError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let field = |i: usize| record.get(i).ok_or_else(|| parse_err(format!("missing column {i}")));
        rows.push(CsvRow {
            round: field(0)?.parse().map_err(|e| parse_err(format!("round: {e}")))?,
            client_id: field(1)?.parse().map_err(|e| parse_err(format!("client_id: {e}")))?,
            split: field(2)?.to_string(),
            loss: field(3)?.parse().map_err(|e| parse_err(format!("loss: {e}")))?,
            accuracy: field(4)?.parse().map_err(|e| parse_err(format!("accuracy: {e}")))?,
        });
    }
    Ok(rows)
}

/// Rows of `external.csv` as `(round, loss, accuracy)`.
pub fn read_external_csv(path: &Path) -> Result<Vec<(u32, f64, f64)>, MetricsError> {
    if !path.exists() {
        return Err(MetricsError::NotFound(path.to_path_buf()));
    }
    let parse_err = |message: String| MetricsError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 columns, got {}", record.len())));
        }
        rows.push((
            record[0].parse().map_err(|e| parse_err(format!("round: {e}")))?,
            record[1].parse().map_err(|e| parse_err(format!("loss: {e}")))?,
            record[2].parse().map_err(|e| parse_err(format!("accuracy: {e}")))?,
        ));
    }
    Ok(rows)
}

pub fn read_confusion(path: &Path) -> Result<[[u64; NUM_CLASSES]; NUM_CLASSES], MetricsError> {
    if !path.exists() {
        return Err(MetricsError::NotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    let mut out = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    let mut n = 0;
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        if n >= NUM_CLASSES || record.len() != NUM_CLASSES {
            return Err(MetricsError::Parse {
                path: path.to_path_buf(),
                message: "confusion matrix must be 4x4".into(),
            });
        }
        for (slot, field) in out[n].iter_mut().zip(record.iter()) {
            *slot = field.trim().parse().map_err(|e| MetricsError::Parse {
                path: path.to_path_buf(),
                message: format!("count {field:?}: {e}"),
            })?;
        }
        n += 1;
    }
    if n != NUM_CLASSES {
        return Err(MetricsError::Parse {
            path: path.to_path_buf(),
            message: format!("confusion matrix has {n} rows"),
        });
    }
    Ok(out)
}

pub fn checkpoint_path(dir: &Path, round: u32) -> PathBuf {
    dir.join(format!("global_r{round}.fedw"))
}

/// Writes `dir/global_r{round}.fedw` at full precision.
pub fn checkpoint(global: &GlobalModel, dir: &Path) -> Result<PathBuf, MetricsError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = checkpoint_path(dir, global.round);
    fs::write(&path, encode_params(&global.params, Dtype::F64)?).map_err(io_err(&path))?;
    Ok(path)
}

pub fn restore(dir: &Path, round: u32, mask: &FederationMask) -> Result<GlobalModel, MetricsError> {
    let path = checkpoint_path(dir, round);
    if !path.exists() {
        return Err(MetricsError::NotFound(path));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let params = decode_params(&bytes).map_err(|e| e.in_file(&path))?;
    let frozen = params
        .select(mask.frozen_names().iter().map(String::as_str))
        .map_err(|e| MetricsError::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
    Ok(GlobalModel { round, params, frozen })
}

/// Run summary, written as `key = value` lines in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Self { entries }
    }

    pub fn write(&self, dir: &Path) -> Result<(), MetricsError> {
        let path = dir.join(SUMMARY_FILE);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(self.to_text().as_bytes()).map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Self, MetricsError> {
        let path = dir.join(SUMMARY_FILE);
        if !path.exists() {
            return Err(MetricsError::NotFound(path));
        }
        Ok(Self::parse(&fs::read_to_string(&path).map_err(io_err(&path))?))
    }
}

impl Default for Summary {
    fn default() -> Self {
        Self::new()
    }
}
