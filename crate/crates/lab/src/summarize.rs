//! Cross-run aggregation for `tpo-lab summarize`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::experiments::{load_manifest, ArmSpec, Summary};
use crate::metrics::{read_rows, summarize_rows, ArmSummary, MetricsRow};

/// Marker for a threshold that was never reached within the budget.
pub const NEVER: &str = "-";

/// Merges the metrics of several run directories of one experiment.
pub fn summarize_dirs(dirs: &[&Path]) -> Result<Summary> {
    if dirs.is_empty() {
        return Err(LabError::config("dirs", "no run directories given"));
    }
    let mut experiment = None;
    let mut threshold = None;
    let mut windows = BTreeMap::new();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut seen = BTreeSet::new();
    for dir in dirs {
        let m = load_manifest(dir)?;
        match experiment {
            None => experiment = Some(m.experiment),
            Some(e) if e != m.experiment => {
                return Err(LabError::config(
                    "dirs",
                    format!("mixed experiments: {} and {} ({})", e.name(), m.experiment.name(), dir.display()),
                ))
            }
            _ => {}
        }
        threshold.get_or_insert(m.plan.threshold);
        for arm in &m.plan.arms {
            let w = match &arm.spec {
                ArmSpec::Tabular { .. } => 1,
                ArmSpec::Mnist { config } => config.final_window,
                ArmSpec::Token { config } => config.final_window,
            };
            windows.insert(arm.label.clone(), w);
        }
        let file = fs::File::open(dir.join("metrics.csv"))?;
        let dir_rows = read_rows(file)?;
        let keys: BTreeSet<(String, u64)> = dir_rows.iter().map(|r| (r.method.clone(), r.seed)).collect();
        if let Some((m, s)) = keys.intersection(&seen).next() {
            return Err(LabError::InvalidInput(format!("{m} seed {s} appears in more than one run directory")));
        }
        seen.extend(keys);
        rows.extend(dir_rows);
    }
    let threshold = threshold.unwrap_or(crate::metrics::DEFAULT_THRESHOLD);
    Ok(Summary {
        experiment: experiment.expect("at least one directory"),
        threshold,
        arms: summarize_rows(&rows, &windows, threshold),
    })
}

fn steps_cell(a: &ArmSummary) -> String {
    a.mean_curve_steps_to_threshold.map_or_else(|| NEVER.to_string(), |s| s.to_string())
}

/// Plain-text table: final error as mean ± s.e. in percent and the
/// steps-to-threshold of the mean curve.
pub fn render_table(s: &Summary) -> String {
    let width = s.arms.iter().map(|a| a.label.len()).max().unwrap_or(3).max(3);
    let mut out = String::new();
    let t = format!("steps to {}%", s.threshold * 100.0);
    let _ = writeln!(out, "experiment: {}", s.experiment.name());
    let _ = writeln!(out, "{:<width$}  {:>5}  {:>18}  {:>14}  {:>8}", "arm", "seeds", "final error (%)", t, "reached");
    for a in &s.arms {
        let fe = format!("{:.2} ± {:.2}", a.final_error.mean * 100.0, a.final_error.se * 100.0);
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>18}  {:>14}  {:>8}",
            a.label,
            a.seeds.len(),
            fe,
            steps_cell(a),
            format!("{}/{}", a.seeds_reaching_threshold, a.seeds.len())
        );
    }
    out
}
