use std::collections::BTreeMap;

use proptest::prelude::*;
use tpo_lab::diagnostics::{concentration_bins, ConcentrationSample};
use tpo_lab::metrics::{mean_se, read_rows, write_rows, MetricsRow};
use tpo_lab::trainers::token::z_scores;

fn row() -> impl Strategy<Value = MetricsRow> {
    (
        0u64..10_000,
        0u64..100,
        "[A-Za-z_=:,./@0-9]{1,20}",
        0.0..1.0f64,
        prop::option::of(0.0..100.0f64),
        prop::option::of(0.0..1.0f64),
        prop::collection::btree_map("[a-z_]{1,8}", -1e6..1e6f64, 0..4),
    )
        .prop_map(|(step, seed, method, error, grad_norm, all_fail_frac, extra)| MetricsRow {
            step,
            episode: step,
            seed,
            method,
            error,
            grad_norm,
            all_fail_frac,
            extra: extra.into_iter().map(|(k, v)| (k, v.into())).collect(),
        })
}

proptest! {
    #[test]
    fn metrics_rows_round_trip(rows in prop::collection::vec(row(), 0..20)) {
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows, true).unwrap();
        let back = read_rows(buf.as_slice()).unwrap();
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn bins_have_equal_counts_and_ordered_ranges(cs in prop::collection::vec(0.0..1.0f64, 1..200), bins in 1usize..8) {
        let samples: Vec<ConcentrationSample> = cs
            .iter()
            .map(|&c| ConcentrationSample {
                concentration: c,
                p_correct: 0.5,
                delta_gain: BTreeMap::new(),
                beta_tpo_sym: 0.0,
                beta_dg_sym: 0.0,
            })
            .collect();
        let out = concentration_bins(&samples, bins);
        prop_assert_eq!(out.iter().map(|b| b.count).sum::<usize>(), cs.len());
        let (lo, hi) = (out.iter().map(|b| b.count).min().unwrap(), out.iter().map(|b| b.count).max().unwrap());
        prop_assert!(hi - lo <= 1);
        for w in out.windows(2) {
            prop_assert!(w[0].concentration_hi <= w[1].concentration_lo);
        }
    }

    #[test]
    fn binary_z_scores_have_zero_mean_and_unit_variance(bits in prop::collection::vec(any::<bool>(), 2..64)) {
        let s: Vec<f64> = bits.iter().map(|&b| f64::from(u8::from(b))).collect();
        let u = z_scores(&s).unwrap();
        let n = u.len() as f64;
        if bits.iter().all(|&b| b == bits[0]) {
            prop_assert!(u.iter().all(|x| *x == 0.0));
        } else {
            prop_assert!((u.iter().sum::<f64>() / n).abs() < 1e-12);
            prop_assert!((u.iter().map(|x| x * x).sum::<f64>() / n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_seeds_have_exact_mean_and_zero_se(x in -1.0..1.0f64, n in 1usize..30) {
        let m = mean_se(&vec![x; n]);
        prop_assert_eq!(m.mean, x);
        prop_assert_eq!(m.se, 0.0);
    }
}
