//! Metric rows for the tabular bandits.

use std::collections::BTreeMap;

use serde_json::Value;
use tpo_core::exec::Execution;
use tpo_core::tabular::{run_tabular_experiment, TabularConfig, TabularMethod};

use crate::error::Result;
use crate::metrics::MetricsRow;

pub fn train_tabular(
    cfg: &TabularConfig,
    method: TabularMethod,
    label: &str,
    seed: u64,
    exec: Execution,
    sink: &mut dyn FnMut(MetricsRow),
) -> Result<()> {
    for r in run_tabular_experiment(cfg, method, seed, exec)? {
        let mut extra: BTreeMap<String, Value> = BTreeMap::new();
        if let Some(m) = r.misalignment {
            extra.insert("misalignment".into(), m.into());
        }
        sink(MetricsRow {
            step: r.step as u64,
            episode: r.step as u64,
            seed,
            method: label.to_string(),
            error: r.error,
            grad_norm: (r.step > 0).then_some(r.grad_norm),
            all_fail_frac: None,
            extra,
        });
    }
    Ok(())
}
