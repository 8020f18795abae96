//! Metric rows, the `metrics.csv` schema and seed-level aggregation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};

pub const COLUMNS: [&str; 8] = ["step", "episode", "seed", "method", "error", "grad_norm", "all_fail_frac", "extra"];

/// One logged point of one run. `method` carries the arm label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub seed: u64,
    pub method: String,
    pub error: f64,
    pub grad_norm: Option<f64>,
    pub all_fail_frac: Option<f64>,
    pub extra: BTreeMap<String, Value>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

pub fn write_rows(out: impl Write, rows: &[MetricsRow], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    if header {
        w.write_record(COLUMNS)?;
    }
    for r in rows {
        let extra = serde_json::to_string(&r.extra)?;
        w.write_record([
            r.step.to_string(),
            r.episode.to_string(),
            r.seed.to_string(),
            r.method.clone(),
            fmt_f64(r.error),
            fmt_opt(r.grad_norm),
            fmt_opt(r.all_fail_frac),
            extra,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(input: impl Read) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(LabError::Format(format!("metrics header {header:?} does not match {COLUMNS:?}")));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| LabError::Format(format!("{s:?}: {e}")))
        }
    };
    let int = |s: &str| -> Result<u64> { s.parse().map_err(|e| LabError::Format(format!("{s:?}: {e}"))) };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        rows.push(MetricsRow {
            step: int(&rec[0])?,
            episode: int(&rec[1])?,
            seed: int(&rec[2])?,
            method: rec[3].to_string(),
            error: opt(&rec[4])?.unwrap_or(f64::NAN),
            grad_norm: opt(&rec[5])?,
            all_fail_frac: opt(&rec[6])?,
            extra: serde_json::from_str(&rec[7])?,
        });
    }
    Ok(rows)
}

/// Mean and standard error (sample std / √n) of a set of seed values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

pub fn mean_se(xs: &[f64]) -> MeanSe {
    let n = xs.len();
    if n == 0 {
        return MeanSe { mean: f64::NAN, se: f64::NAN, n };
    }
    if xs.iter().all(|x| *x == xs[0]) {
        return MeanSe { mean: xs[0], se: 0.0, n };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let se = if n < 2 {
        0.0
    } else {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    MeanSe { mean, se, n }
}

/// First episode at which `error <= threshold`, if any.
pub fn first_reaching(curve: &[(u64, f64)], threshold: f64) -> Option<u64> {
    curve.iter().find(|(_, e)| *e <= threshold).map(|(ep, _)| *ep)
}

/// Per-seed results for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_error: f64,
    pub steps_to_threshold: Option<u64>,
    pub episodes_run: u64,
    /// Per numeric extra key: mean over rows that carry it.
    pub extra_mean: BTreeMap<String, f64>,
    /// Per numeric extra key: last value logged.
    pub extra_last: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub seeds: Vec<SeedResult>,
    pub final_error: MeanSe,
    /// First episode at which the across-seed mean error reaches the
    /// threshold; stopped runs carry their last value forward.
    pub mean_curve_steps_to_threshold: Option<u64>,
    pub seeds_reaching_threshold: usize,
    pub extra_mean: BTreeMap<String, MeanSe>,
    pub extra_last: BTreeMap<String, MeanSe>,
}

pub const DEFAULT_THRESHOLD: f64 = 0.01;

fn seed_result(seed: u64, rows: &[&MetricsRow], final_window: usize, threshold: f64) -> SeedResult {
    let curve: Vec<(u64, f64)> = rows.iter().map(|r| (r.episode, r.error)).collect();
    let tail: Vec<f64> = curve.iter().rev().take(final_window.max(1)).map(|c| c.1).collect();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut last = BTreeMap::new();
    for r in rows {
        for (k, v) in &r.extra {
            if let Some(x) = v.as_f64().filter(|x| x.is_finite()) {
                let e = sums.entry(k.clone()).or_insert((0.0, 0));
                e.0 += x;
                e.1 += 1;
                last.insert(k.clone(), x);
            }
        }
    }
    SeedResult {
        seed,
        final_error: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        steps_to_threshold: first_reaching(&curve, threshold),
        episodes_run: curve.last().map_or(0, |c| c.0),
        extra_mean: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        extra_last: last,
    }
}

/// Aggregates rows into per-arm summaries, arms in first-seen order.
pub fn summarize_rows(rows: &[MetricsRow], final_window: &BTreeMap<String, usize>, threshold: f64) -> Vec<ArmSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut by_arm: BTreeMap<String, BTreeMap<u64, Vec<&MetricsRow>>> = BTreeMap::new();
    for r in rows {
        if !by_arm.contains_key(&r.method) {
            order.push(r.method.clone());
        }
        by_arm.entry(r.method.clone()).or_default().entry(r.seed).or_default().push(r);
    }
    order
        .into_iter()
        .map(|label| {
            let seeds = &by_arm[&label];
            let window = final_window.get(&label).copied().unwrap_or(1);
            let results: Vec<SeedResult> =
                seeds.iter().map(|(&s, rs)| seed_result(s, rs, window, threshold)).collect();
            let curves: Vec<Vec<(u64, f64)>> =
                seeds.values().map(|rs| rs.iter().map(|r| (r.episode, r.error)).collect()).collect();
            let keys: std::collections::BTreeSet<&String> =
                results.iter().flat_map(|r| r.extra_mean.keys()).collect();
            let agg = |pick: &dyn Fn(&SeedResult) -> Option<f64>| mean_se(&results.iter().filter_map(pick).collect::<Vec<_>>());
            ArmSummary {
                final_error: agg(&|r| Some(r.final_error)),
                mean_curve_steps_to_threshold: first_reaching(&mean_curve(&curves), threshold),
                seeds_reaching_threshold: results.iter().filter(|r| r.steps_to_threshold.is_some()).count(),
                extra_mean: keys.iter().map(|k| ((*k).clone(), agg(&|r| r.extra_mean.get(*k).copied()))).collect(),
                extra_last: keys.iter().map(|k| ((*k).clone(), agg(&|r| r.extra_last.get(*k).copied()))).collect(),
                label,
                seeds: results,
            }
        })
        .collect()
}

/// Mean error per episode across seeds, carrying each seed's last value
/// past its end.
pub fn mean_curve(curves: &[Vec<(u64, f64)>]) -> Vec<(u64, f64)> {
    let mut episodes: Vec<u64> = curves.iter().flatten().map(|c| c.0).collect();
    episodes.sort_unstable();
    episodes.dedup();
    let mut idx = vec![0usize; curves.len()];
    let mut out = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let mut sum = 0.0;
        let mut n = 0;
        for (c, i) in curves.iter().zip(idx.iter_mut()) {
            while *i + 1 < c.len() && c[*i + 1].0 <= ep {
                *i += 1;
            }
            if let Some(&(e, v)) = c.get(*i) {
                if e <= ep {
                    sum += v;
                    n += 1;
                }
            }
        }
        if n == curves.len() {
            out.push((ep, sum / n as f64));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, episode: u64, error: f64) -> MetricsRow {
        let mut extra = BTreeMap::new();
        extra.insert("loss".into(), Value::from(error * 2.0));
        MetricsRow {
            step: episode * 4,
            episode,
            seed,
            method: "TPO".into(),
            error,
            grad_norm: Some(0.5),
            all_fail_frac: None,
            extra,
        }
    }

    #[test]
    fn mean_and_se() {
        let m = mean_se(&[4.0, 6.0]);
        assert_eq!((m.mean, m.se), (5.0, 1.0));
        assert_eq!(mean_se(&[3.0; 20]).se, 0.0);
        assert_eq!(mean_se(&[7.0]).se, 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(0, 1, 0.5), row(0, 2, 0.25)];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows, true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,episode,seed,method,error,grad_norm,all_fail_frac,extra\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_rows(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn threshold_and_marker() {
        let mut rows: Vec<MetricsRow> = (1..=5).map(|e| row(0, e, 0.1 / e as f64)).collect();
        rows.extend((1..=5).map(|e| row(1, e, 0.5)));
        let s = &summarize_rows(&rows, &BTreeMap::new(), 0.025)[0];
        assert_eq!(s.seeds[0].steps_to_threshold, Some(4));
        assert_eq!(s.seeds[1].steps_to_threshold, None);
        assert_eq!(s.seeds_reaching_threshold, 1);
        assert_eq!(s.mean_curve_steps_to_threshold, None);
        assert!((s.extra_last["loss"].mean - (0.04 + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_have_zero_se() {
        let rows: Vec<MetricsRow> = (0..20).flat_map(|s| (1..=3).map(move |e| row(s, e, 0.3))).collect();
        let s = &summarize_rows(&rows, &BTreeMap::new(), 0.01)[0];
        assert_eq!(s.final_error.se, 0.0);
        assert_eq!(s.final_error.n, 20);
    }

    #[test]
    fn stopped_runs_carry_forward() {
        let a = vec![(1, 0.5), (2, 0.0)];
        let b = vec![(1, 0.5), (2, 0.1), (3, 0.01), (4, 0.0)];
        let m = mean_curve(&[a, b]);
        assert_eq!(m, vec![(1, 0.5), (2, 0.05), (3, 0.005), (4, 0.0)]);
    }
}
