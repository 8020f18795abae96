use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpo_core::coefficients::{beta_ce, beta_dg, beta_grpo, beta_pg, beta_tpo, one_hot_z_scores};
use tpo_core::mnist_updates::expected_mnist_updates;
use tpo_core::tabular::{exact_population_update, BanditSpec, LogitTable, TabularMethod};
use tpo_core::{
    kl_objective, standardize, tpo_loss_and_logit_grad, tpo_target, ScoredGroup, StandardizedScores,
};

/// Independent cross-entropy: `-Σ q_i (l_i - log Σ exp l)` with a plain sum.
fn ce_oracle(logits: &[f64], q: &[f64]) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    -q.iter().zip(logits).map(|(qi, l)| qi * (l - z.ln())).sum::<f64>()
}

fn random_group(rng: &mut ChaCha8Rng, k: usize) -> ScoredGroup {
    let logp_old: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..0.0)).collect();
    let logp_cur: Vec<f64> = logp_old.iter().map(|l| l + rng.random_range(-0.5..0.5)).collect();
    let mut scores: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    scores[0] += 1.0;
    let eta = rng.random_range(0.25..4.0);
    ScoredGroup::new(logp_old, logp_cur, scores, eta).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..100 {
        let k = [2, 4, 8][trial % 3];
        let group = random_group(&mut rng, k);
        let q = group.target().unwrap();
        let (loss, grad) = tpo_loss_and_logit_grad(&group, &q);
        assert!((loss - ce_oracle(&group.logp_cur, q.as_slice())).abs() < 1e-12);
        let h = 1e-5;
        for i in 0..k {
            let mut up = group.logp_cur.clone();
            let mut dn = group.logp_cur.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (ce_oracle(&up, q.as_slice()) - ce_oracle(&dn, q.as_slice())) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "K={k} i={i}: {fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn gradient_vanishes_when_policy_equals_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let k = [2, 4, 8][trial % 3];
        let g = random_group(&mut rng, k);
        let q = g.target().unwrap();
        let at_target: Vec<f64> = q.as_slice().iter().map(|x| x.ln() + 0.7).collect();
        let g2 = ScoredGroup::new(g.logp_old.clone(), at_target, g.scores.clone(), g.eta).unwrap();
        let (_, grad) = tpo_loss_and_logit_grad(&g2, &q);
        assert!(grad.iter().all(|x| x.abs() < 1e-9), "{grad:?}");
    }
}

#[test]
fn target_maximizes_kl_regularized_objective_on_simplex_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 500;
    for _ in 0..50 {
        let logp_old: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..0.0)).collect();
        let raw: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u = standardize(&raw).unwrap();
        let eta = rng.random_range(0.5..3.0);
        let q = tpo_target(&logp_old, &u, eta).unwrap();
        let mut best = (f64::NEG_INFINITY, [0.0; 3]);
        for i in 0..=n {
            for j in 0..=(n - i) {
                let r = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
                let v = kl_objective(&r, u.as_slice(), &logp_old, eta);
                if v > best.0 {
                    best = (v, r);
                }
            }
        }
        let linf = best.1.iter().zip(q.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(linf <= 0.004, "argmax {:?} vs q {:?}", best.1, q.as_slice());
    }
}

fn one_context(p: f64, actions: usize) -> (LogitTable, BanditSpec) {
    let wrong = (1.0 - p) / (actions - 1) as f64;
    let mut logits = vec![wrong.ln(); actions];
    logits[0] = p.ln();
    (LogitTable::from_vec(1, actions, logits).unwrap(), BanditSpec::new(1, actions, vec![0]).unwrap())
}

fn projected_beta(g: &[f64], pi: &[f64]) -> f64 {
    let v: Vec<f64> = pi.iter().enumerate().map(|(i, p)| if i == 0 { 1.0 - p } else { -p }).collect();
    let dot: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
    dot / v.iter().map(|x| x * x).sum::<f64>()
}

#[test]
fn exact_updates_project_onto_closed_form_coefficients() {
    for p in [0.01, 0.1, 0.5, 0.9] {
        let (table, spec) = one_context(p, 10);
        let pi = table.policy(0);
        let beta = |m| projected_beta(&exact_population_update(&table, &spec, m, 1.0).unwrap(), &pi);
        assert!((beta(TabularMethod::CeOracle) - beta_ce(p)).abs() < 1e-9);
        assert!((beta(TabularMethod::Pg) - beta_pg(p)).abs() < 1e-9);
        assert!((beta(TabularMethod::Dg) - beta_dg(p, 1.0)).abs() < 1e-9);
        assert!((beta(TabularMethod::Grpo) - beta_grpo(p)).abs() < 1e-9);
        assert!((beta(TabularMethod::Tpo) - beta_tpo(p, 10, 1.0)).abs() < 1e-9);
    }
}

#[test]
fn coefficients_at_one_tenth() {
    assert!((beta_tpo(0.1, 10, 1.0) - 0.73).abs() < 0.005);
    assert!((beta_dg(0.1, 1.0) - 0.0909).abs() < 1e-4);
    assert!((beta_grpo(0.1) - 0.3333).abs() < 1e-4);
}

#[test]
fn group_pg_is_six_pg_on_random_simplex_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let w: Vec<f64> = (0..10).map(|_| -rng.random::<f64>().ln()).collect();
        let s: f64 = w.iter().sum();
        let pi: Vec<f64> = w.iter().map(|x| x / s).collect();
        let y = rng.random_range(0..10);
        let g = expected_mnist_updates(&pi, y).unwrap();
        for (a, b) in g.group_pg.iter().zip(&g.pg) {
            assert!((a - 6.0 * b).abs() < 1e-12);
        }
    }
}

#[test]
fn one_hot_ten_z_scores_are_exact() {
    let mut r = vec![0.0; 10];
    r[6] = 1.0;
    let u = standardize(&r).unwrap();
    for (i, x) in u.as_slice().iter().enumerate() {
        assert_eq!(*x, if i == 6 { 3.0 } else { -1.0 / 3.0 });
    }
    assert_eq!(one_hot_z_scores(10), (3.0, -1.0 / 3.0));
}

#[test]
fn neutral_group_has_exactly_zero_gradient() {
    let logp = vec![-0.3, -2.1, -7.0, -1.25];
    let g = ScoredGroup::new(logp.clone(), logp, vec![0.0; 4], 1.0).unwrap();
    let (_, grad) = tpo_loss_and_logit_grad(&g, &g.target().unwrap());
    assert!(grad.iter().all(|x| *x == 0.0));
}

fn group_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (2usize..9).prop_flat_map(|k| {
        (prop::collection::vec(-6.0..0.0f64, k), prop::collection::vec(-3.0..3.0f64, k), 0.1..5.0f64)
    })
}

proptest! {
    #[test]
    fn target_is_a_distribution((logp, s, eta) in group_strategy()) {
        let u = standardize(&s).unwrap();
        let q = tpo_target(&logp, &u, eta).unwrap();
        prop_assert!((q.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.as_slice().iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn target_ignores_logp_shift((logp, s, eta) in group_strategy(), c in -5.0..5.0f64) {
        let u = standardize(&s).unwrap();
        let shifted: Vec<f64> = logp.iter().map(|l| l + c).collect();
        let a = tpo_target(&logp, &u, eta).unwrap();
        let b = tpo_target(&shifted, &u, eta).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn standardization_is_affine_invariant(s in prop::collection::vec(-3.0..3.0f64, 2..9), a in 0.1..10.0f64, b in -5.0..5.0f64) {
        let u = standardize(&s).unwrap();
        let t: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let v = standardize(&t).unwrap();
        let spread = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - s.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        for (x, y) in u.as_slice().iter().zip(v.as_slice()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn target_raises_above_average_candidates((logp, s, eta) in group_strategy()) {
        let u = standardize(&s).unwrap();
        let q = tpo_target(&logp, &u, eta).unwrap();
        let p = tpo_target(&logp, &StandardizedScores::zeros(logp.len()), eta).unwrap();
        // q/p is increasing in u, so the best candidate never loses mass
        let best = u.as_slice().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert!(q.as_slice()[best] >= p.as_slice()[best] - 1e-15);
    }

    #[test]
    fn gradient_sums_to_zero((logp, s, eta) in group_strategy(), drift in prop::collection::vec(-1.0..1.0f64, 8)) {
        let cur: Vec<f64> = logp.iter().zip(&drift).map(|(l, d)| l + d).collect();
        let g = ScoredGroup::new(logp, cur, s, eta).unwrap();
        let (_, grad) = tpo_loss_and_logit_grad(&g, &g.target().unwrap());
        prop_assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }
}
