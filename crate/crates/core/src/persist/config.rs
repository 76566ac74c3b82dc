//! TOML run configuration.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::plan::{ExperimentPlan, GridAxis};

pub fn parse_config(text: &str) -> Result<ExperimentPlan> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Every field, defaults included.
pub fn resolved_toml(plan: &ExperimentPlan) -> Result<String> {
    toml::to_string_pretty(plan).map_err(|e| Error::Config(e.to_string()))
}

pub fn save_resolved(plan: &ExperimentPlan, path: &Path) -> Result<()> {
    std::fs::write(path, resolved_toml(plan)?).map_err(|e| Error::io(path, e))
}

/// Parses `name=lo:hi:count` (inclusive, evenly spaced) or `name=v1,v2,...`.
pub fn parse_grid(spec: &str) -> Result<GridAxis> {
    let (name, rest) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid {spec:?} is not of the form name=values")))?;
    let bad = |what: &str| Error::Config(format!("grid {spec:?}: {what}"));
    let values = if rest.contains(':') {
        let parts: Vec<&str> = rest.split(':').collect();
        let [lo, hi, n] = parts[..] else {
            return Err(bad("range must be lo:hi:count"));
        };
        let lo: f64 = lo.trim().parse().map_err(|_| bad("bad lower bound"))?;
        let hi: f64 = hi.trim().parse().map_err(|_| bad("bad upper bound"))?;
        let n: usize = n.trim().parse().map_err(|_| bad("bad count"))?;
        match n {
            0 => return Err(bad("count must be positive")),
            1 => vec![lo],
            _ => (0..n)
                .map(|i| {
                    let v = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                    // trim representation noise such as 0.30000000000000004
                    (v * 1e12).round() / 1e12
                })
                .collect(),
        }
    } else {
        rest.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(GridAxis {
        param: name.trim().to_string(),
        values,
    })
}
