//! Run directory layout.
//!
//! ```text
//! <dir>/resolved.toml        every configuration key, defaults included
//! <dir>/records.csv          all records of all runs
//! <dir>/costs.json           search cost per run
//! <dir>/failures.json        runs that errored
//! <dir>/report.json          selections, costs, grid summary
//! <dir>/runs/<run_id>/       mask.bin, mask_summary.txt, rewind.bin, round masks
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::eval::CostRow;
use crate::harness::plan::ExperimentPlan;
use crate::harness::sweep::{build_report, Failure, PlanOutcome, Report};

use super::checkpoint::save_rewind;
use super::config::save_resolved;
use super::mask_io::{save_mask, save_mask_summary};
use super::records::{read_records, write_records};

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' })
        .collect()
}

pub fn run_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join("runs").join(sanitize(run_id))
}

/// Writes everything `report` needs to regenerate the report offline.
pub fn write_outputs(dir: &Path, plan: &ExperimentPlan, outcome: &PlanOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_resolved(plan, &dir.join("resolved.toml"))?;
    write_records(&outcome.records, &dir.join("records.csv"))?;
    write_json(&outcome.costs, &dir.join("costs.json"))?;
    write_json(&outcome.failures, &dir.join("failures.json"))?;
    write_json(&outcome.report, &dir.join("report.json"))?;
    for o in &outcome.outcomes {
        let Some(search) = &o.search else { continue };
        let run_dir = run_path(dir, &o.run.run_id);
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        for t in &search.tickets {
            save_mask(&t.mask, &run_dir.join(format!("mask_round{}.bin", t.round)))?;
        }
        if let Some(t) = search.final_ticket() {
            save_mask(&t.mask, &run_dir.join("mask.bin"))?;
            save_mask_summary(&t.mask, &run_dir.join("mask_summary.txt"))?;
        }
        save_rewind(&search.rewind, &run_dir.join("rewind.bin"))?;
    }
    Ok(())
}

/// Recomputes the report from stored files only.
pub fn report_from_dir(dir: &Path) -> Result<Report> {
    let records = read_records(&dir.join("records.csv"))?;
    let costs: Vec<CostRow> = read_json(&dir.join("costs.json"))?;
    let failures_path = dir.join("failures.json");
    let failures: Vec<Failure> = if failures_path.exists() {
        read_json(&failures_path)?
    } else {
        Vec::new()
    };
    build_report(&records, &costs, failures)
}

pub fn read_report(dir: &Path) -> Result<Report> {
    read_json(&dir.join("report.json"))
}
