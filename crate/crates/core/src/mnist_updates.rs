//! Expected logit-space updates for a one-step contextual bandit with a
//! single sampled action per context and reward `1{a = y}`.
//!
//! Each update is the expectation over `a ~ π` of the gradient-descent
//! direction in logit space, with baselines, standardized scores, gates and
//! targets treated as constants. All of them are computed by direct
//! enumeration of the sampled action; the closed forms live in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::group::{dg_gate_weight, standardize, tpo_target};

/// Expected updates for one labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistUpdates {
    /// REINFORCE with baseline `b = Σ π_i²`.
    pub pg: Vec<f64>,
    /// Single-sample GRPO conditioned on unit minibatch reward std; scale by
    /// `1 / σ_B` for other batch statistics (the minibatch mean drops out).
    pub grpo_unit_sigma: Vec<f64>,
    /// Sigmoid-gated PG with the same baseline.
    pub dg: Vec<f64>,
    /// Target matching with the sampled score vector `A(a) · e_a`.
    pub tpo: Vec<f64>,
    /// Scalar-weighted PG on the sampled standardized score.
    pub group_pg: Vec<f64>,
}

impl MnistUpdates {
    pub fn grpo(&self, sigma_b: f64) -> Vec<f64> {
        self.grpo_unit_sigma.iter().map(|g| g / sigma_b).collect()
    }
}

/// `Σ π_i²`, the expected reward of the policy against itself.
pub fn self_agreement_baseline(pi: &[f64]) -> f64 {
    pi.iter().map(|p| p * p).sum()
}

/// Expected updates at temperature 1.
pub fn expected_mnist_updates(pi: &[f64], y: usize) -> Result<MnistUpdates> {
    expected_mnist_updates_with_eta(pi, y, 1.0)
}

pub fn expected_mnist_updates_with_eta(pi: &[f64], y: usize, eta: f64) -> Result<MnistUpdates> {
    let k = pi.len();
    if k < 2 || y >= k {
        return Err(CoreError::InvalidInput(format!("label {y} out of range for {k} classes")));
    }
    if pi.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(CoreError::InvalidInput(
            "policy must be strictly positive on every class".into(),
        ));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidInput(format!("policy sums to {total}")));
    }

    let b = self_agreement_baseline(pi);
    let log_pi: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    let mut out = MnistUpdates {
        pg: vec![0.0; k],
        grpo_unit_sigma: vec![0.0; k],
        dg: vec![0.0; k],
        tpo: vec![0.0; k],
        group_pg: vec![0.0; k],
    };

    let mut scores = vec![0.0; k];
    for a in 0..k {
        let reward = if a == y { 1.0 } else { 0.0 };
        let adv = reward - b;
        let w = pi[a];

        // score-function direction e_a - π
        let dir = |i: usize| if i == a { 1.0 - pi[i] } else { -pi[i] };
        let gate = dg_gate_weight(adv, log_pi[a], eta);
        for i in 0..k {
            out.pg[i] += w * adv * dir(i);
            // conditional on (μ_B, σ_B = 1) the minibatch mean drops out
            out.grpo_unit_sigma[i] += w * reward * dir(i);
            out.dg[i] += w * gate * dir(i);
        }

        scores.iter_mut().for_each(|s| *s = 0.0);
        scores[a] = adv;
        let u = standardize(&scores)?;
        let ua = u.as_slice()[a];
        let q = tpo_target(&log_pi, &u, eta)?;
        for i in 0..k {
            out.group_pg[i] += w * ua * dir(i);
            out.tpo[i] += w * (q.as_slice()[i] - pi[i]);
        }
    }
    Ok(out)
}

/// Symmetric one-vs-rest coefficient for TPO: the update when every wrong
/// class holds `(1-p)/(K-1)` is `β · (e_y - π)`.
pub fn beta_tpo_sym(p: f64, classes: usize, eta: f64) -> f64 {
    let lambda = crate::coefficients::one_hot_lambda(classes, eta);
    let wrong = (1.0 - p) / (classes - 1) as f64;
    let beta_plus = p * (lambda - 1.0) / (1.0 - p + lambda * p);
    let gamma = wrong * (lambda - 1.0) / (lambda * (1.0 - wrong) + wrong);
    p * beta_plus + p * gamma
}

/// Symmetric one-vs-rest coefficient for DG with baseline
/// `b = p² + (K-1) q²`.
pub fn beta_dg_sym(p: f64, classes: usize, eta: f64) -> f64 {
    use crate::group::sigmoid;
    let wrong = (1.0 - p) / (classes - 1) as f64;
    let b = p * p + (classes - 1) as f64 * wrong * wrong;
    p * (1.0 - b) * sigmoid((1.0 - b) * (1.0 / p).ln() / eta)
        + p * b * sigmoid(-b * (1.0 / wrong).ln() / eta)
}

/// First-order change in `π_y` when the logits move by `g`.
pub fn delta_p_y(pi: &[f64], y: usize, g: &[f64]) -> f64 {
    let mean: f64 = pi.iter().zip(g).map(|(p, gi)| p * gi).sum();
    pi[y] * (g[y] - mean)
}
