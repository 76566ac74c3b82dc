//! Run records: one CSV row per logged event.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 13] = [
    "run_id",
    "algorithm",
    "seed",
    "round",
    "epoch",
    "iter",
    "split",
    "loss",
    "accuracy",
    "remaining_frac",
    "beta",
    "lambda",
    "s0",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub algorithm: String,
    pub seed: u64,
    pub round: usize,
    pub epoch: u64,
    pub iter: u64,
    /// `train`, `test`, `round`, `ticket` or `dense`.
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub remaining_frac: f64,
    pub beta: f64,
    pub lambda: f64,
    pub s0: f64,
}

/// Fields shared by every record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordMeta {
    pub run_id: String,
    pub algorithm: String,
    pub seed: u64,
    pub lambda: f64,
    pub s0: f64,
}

impl RecordMeta {
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &self,
        round: usize,
        epoch: u64,
        iter: u64,
        split: &str,
        loss: f64,
        accuracy: f64,
        remaining_frac: f64,
        beta: f64,
    ) -> RunRecord {
        RunRecord {
            run_id: self.run_id.clone(),
            algorithm: self.algorithm.clone(),
            seed: self.seed,
            round,
            epoch,
            iter,
            split: split.to_string(),
            loss,
            accuracy,
            remaining_frac,
            beta,
            lambda: self.lambda,
            s0: self.s0,
        }
    }
}

/// Nine significant digits, the precision records are written at.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

/// Rounds `x` to what survives a write/read cycle.
pub fn round9(x: f64) -> f64 {
    fmt_float(x).parse().unwrap_or(x)
}

pub fn write_records_to<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(HEADER)?;
    for r in records {
        w.write_record([
            r.run_id.clone(),
            r.algorithm.clone(),
            r.seed.to_string(),
            r.round.to_string(),
            r.epoch.to_string(),
            r.iter.to_string(),
            r.split.clone(),
            fmt_float(r.loss),
            fmt_float(r.accuracy),
            fmt_float(r.remaining_frac),
            fmt_float(r.beta),
            fmt_float(r.lambda),
            fmt_float(r.s0),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_records(records: &[RunRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records_to(records, file)
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unexpected header {header:?}"),
        });
    }
    rdr.deserialize().map(|r| r.map_err(Into::into)).collect()
}
