//! Batch-level signal diagnostics and the MNIST concentration binning.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use crate::trainers::token::{group_signal_stats, GroupSignalStats};
pub use tpo_core::misalignment;

use crate::error::Result;

/// One misclassified example: how concentrated the wrong-class mass is and,
/// per method, the first-order gain in the correct-class probability beyond
/// the method's own one-vs-rest surrogate `β(p) · (e_y − π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationSample {
    /// `max_{j≠y} π_j / (1 − π_y)`.
    pub concentration: f64,
    pub p_correct: f64,
    pub delta_gain: BTreeMap<String, f64>,
    pub beta_tpo_sym: f64,
    pub beta_dg_sym: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationBin {
    pub bin: usize,
    pub count: usize,
    pub concentration_lo: f64,
    pub concentration_hi: f64,
    pub mean_concentration: f64,
    pub mean_p_correct: f64,
    pub mean_delta_gain: BTreeMap<String, f64>,
    pub mean_beta_tpo_sym: f64,
    pub mean_beta_dg_sym: f64,
}

/// Splits samples into `bins` equal-count groups by concentration (the
/// first `n mod bins` groups get one extra sample).
pub fn concentration_bins(samples: &[ConcentrationSample], bins: usize) -> Vec<ConcentrationBin> {
    let mut order: Vec<&ConcentrationSample> = samples.iter().collect();
    order.sort_by(|a, b| a.concentration.total_cmp(&b.concentration));
    let n = order.len();
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let len = n / bins + usize::from(b < n % bins);
        let chunk = &order[start..start + len];
        start += len;
        if chunk.is_empty() {
            continue;
        }
        let mean = |f: &dyn Fn(&ConcentrationSample) -> f64| chunk.iter().map(|s| f(s)).sum::<f64>() / len as f64;
        let mut mean_delta_gain = BTreeMap::new();
        for key in chunk[0].delta_gain.keys() {
            mean_delta_gain.insert(key.clone(), mean(&|s| s.delta_gain.get(key).copied().unwrap_or(f64::NAN)));
        }
        out.push(ConcentrationBin {
            bin: b,
            count: len,
            concentration_lo: chunk[0].concentration,
            concentration_hi: chunk[len - 1].concentration,
            mean_concentration: mean(&|s| s.concentration),
            mean_p_correct: mean(&|s| s.p_correct),
            mean_delta_gain,
            mean_beta_tpo_sym: mean(&|s| s.beta_tpo_sym),
            mean_beta_dg_sym: mean(&|s| s.beta_dg_sym),
        });
    }
    out
}

/// Long-format CSV: one line per (seed, bin, method).
pub fn write_concentration_csv(out: impl Write, rows: &[(u64, String, ConcentrationBin)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record([
        "seed",
        "arm",
        "bin",
        "count",
        "concentration_lo",
        "concentration_hi",
        "mean_concentration",
        "mean_p_correct",
        "method",
        "mean_delta_gain",
        "beta_tpo_sym",
        "beta_dg_sym",
    ])?;
    for (seed, arm, b) in rows {
        for (method, dp) in &b.mean_delta_gain {
            w.write_record([
                seed.to_string(),
                arm.clone(),
                b.bin.to_string(),
                b.count.to_string(),
                b.concentration_lo.to_string(),
                b.concentration_hi.to_string(),
                b.mean_concentration.to_string(),
                b.mean_p_correct.to_string(),
                method.clone(),
                dp.to_string(),
                b.mean_beta_tpo_sym.to_string(),
                b.mean_beta_dg_sym.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(c: f64) -> ConcentrationSample {
        let mut dp = BTreeMap::new();
        dp.insert("TPO".into(), 2.0 * c);
        ConcentrationSample { concentration: c, p_correct: 0.5, delta_gain: dp, beta_tpo_sym: 1.0, beta_dg_sym: 0.0 }
    }

    #[test]
    fn bins_are_sorted_and_balanced() {
        let s: Vec<_> = [0.9, 0.1, 0.5, 0.3, 0.7, 0.2, 0.4].iter().map(|&c| sample(c)).collect();
        let bins = concentration_bins(&s, 3);
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![3, 2, 2]);
        assert_eq!(bins[0].concentration_lo, 0.1);
        assert_eq!(bins[0].concentration_hi, 0.3);
        assert!((bins[0].mean_delta_gain["TPO"] - 0.4).abs() < 1e-12);
        assert_eq!(bins[2].concentration_hi, 0.9);
    }

    #[test]
    fn csv_has_one_line_per_method() {
        let bins = concentration_bins(&[sample(0.5)], 1);
        let mut buf = Vec::new();
        write_concentration_csv(&mut buf, &[(7, "TPO".into(), bins[0].clone())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("7,TPO,0,1,"));
    }
}
