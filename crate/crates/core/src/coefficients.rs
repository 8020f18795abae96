//! Closed-form per-context weights for one-hot rewards.
//!
//! With a single correct action `y` in a context whose policy is `π` and
//! `p = π(y)`, every exact update considered here is `β(p) · (e_y - π)`.
//! These functions return `β`. The PG and DG forms use baseline `b = 0`.

use crate::group::sigmoid;

/// Standardized scores of a one-hot reward over `actions` candidates:
/// `(u_correct, u_other)` = `(√(A-1), -1/√(A-1))`.
pub fn one_hot_z_scores(actions: usize) -> (f64, f64) {
    let r = ((actions - 1) as f64).sqrt();
    (r, -1.0 / r)
}

/// Odds multiplier `exp((u_correct - u_other) / eta)` applied by the tilted
/// target to the correct action. Equals `exp(10/3)` for ten actions at
/// `eta = 1`.
pub fn one_hot_lambda(actions: usize, eta: f64) -> f64 {
    let (hi, lo) = one_hot_z_scores(actions);
    ((hi - lo) / eta).exp()
}

pub fn beta_ce(_p: f64) -> f64 {
    1.0
}

pub fn beta_pg(p: f64) -> f64 {
    p
}

pub fn beta_dg(p: f64, eta: f64) -> f64 {
    p * sigmoid(-p.ln() / eta)
}

pub fn beta_grpo(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        (p / (1.0 - p)).sqrt()
    }
}

pub fn beta_tpo(p: f64, actions: usize, eta: f64) -> f64 {
    let lambda = one_hot_lambda(actions, eta);
    p * (lambda - 1.0) / (1.0 - p + lambda * p)
}
