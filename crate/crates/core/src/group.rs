//! Per-group kernels.
//!
//! Everything here works on plain slices of `f64` with one entry per
//! candidate. Log-probabilities are natural logs. All functions are pure.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Within-group z-scores with the population (divide-by-`K`) standard
/// deviation. A group whose entries are all identical maps to all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedScores(Vec<f64>);

impl StandardizedScores {
    /// Wraps already-standardized values. Use [`standardize`] to build them
    /// from raw scores.
    pub fn from_raw_unchecked(u: Vec<f64>) -> Self {
        Self(u)
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True for the zero-variance convention (every coordinate exactly zero).
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Renormalized policy over the candidates of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDistribution(Vec<f64>);

impl GroupDistribution {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Target distribution over a group. Always a constant with respect to the
/// parameters being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution(Vec<f64>);

impl TargetDistribution {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        let sum: f64 = q.iter().sum();
        if q.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidInput(format!(
                "target must lie on the simplex (sum = {sum})"
            )));
        }
        Ok(Self(q))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// `K` scored candidates for one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup {
    pub logp_old: Vec<f64>,
    pub logp_cur: Vec<f64>,
    pub scores: Vec<f64>,
    pub u: StandardizedScores,
    pub eta: f64,
}

impl ScoredGroup {
    pub fn new(logp_old: Vec<f64>, logp_cur: Vec<f64>, scores: Vec<f64>, eta: f64) -> Result<Self> {
        let k = scores.len();
        if logp_old.len() != k || logp_cur.len() != k {
            return Err(CoreError::InvalidInput(format!(
                "group arrays disagree in length ({}, {}, {k})",
                logp_old.len(),
                logp_cur.len()
            )));
        }
        check_finite("logp_old", &logp_old)?;
        check_finite("logp_cur", &logp_cur)?;
        check_eta(eta)?;
        let u = standardize(&scores)?;
        Ok(Self { logp_old, logp_cur, scores, u, eta })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn target(&self) -> Result<TargetDistribution> {
        tpo_target(&self.logp_old, &self.u, self.eta)
    }
}

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(CoreError::InvalidInput(format!("{what}[{i}] is not finite"))),
        None => Ok(()),
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(CoreError::InvalidParameter(format!("temperature must be positive, got {eta}")))
    }
}

/// Z-scores `s` within the group using the population standard deviation.
///
/// Groups whose entries are all identical return exact zeros; this is
/// checked on the inputs rather than on the computed variance so that
/// constant groups never pick up rounding noise.
pub fn standardize(s: &[f64]) -> Result<StandardizedScores> {
    if s.len() < 2 {
        return Err(CoreError::InvalidInput(format!(
            "a group needs at least two scores, got {}",
            s.len()
        )));
    }
    check_finite("scores", s)?;
    let first = s[0];
    if s.iter().all(|&x| x == first) {
        return Ok(StandardizedScores::zeros(s.len()));
    }
    let k = s.len() as f64;
    if let Some(u) = standardize_two_level(s) {
        return Ok(u);
    }
    let mean = s.iter().sum::<f64>() / k;
    let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k;
    let sd = var.sqrt();
    Ok(StandardizedScores(s.iter().map(|x| (x - mean) / sd).collect()))
}

/// Closed form for scores taking exactly two values: with `m` entries at the
/// higher value out of `k`, the z-scores are `√((k-m)/m)` and `-√(m/(k-m))`.
/// Binary rewards hit this path and get correctly rounded results.
fn standardize_two_level(s: &[f64]) -> Option<StandardizedScores> {
    let first = s[0];
    let other = *s.iter().find(|&&x| x != first)?;
    if s.iter().any(|&x| x != first && x != other) {
        return None;
    }
    let hi = first.max(other);
    let m = s.iter().filter(|&&x| x == hi).count() as f64;
    let rest = s.len() as f64 - m;
    let (up, down) = (rest.sqrt() / m.sqrt(), -(m.sqrt() / rest.sqrt()));
    Some(StandardizedScores(s.iter().map(|&x| if x == hi { up } else { down }).collect()))
}

/// Row log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

/// Policy renormalized over the sampled candidates; bitwise equal to the
/// neutral target of the same log-probabilities.
pub fn group_policy(logp: &[f64]) -> GroupDistribution {
    GroupDistribution(log_softmax(logp).iter().map(|l| l.exp()).collect())
}

/// Exponential tilt of the snapshot group policy by `u / eta`.
pub fn tpo_target(logp_old: &[f64], u: &StandardizedScores, eta: f64) -> Result<TargetDistribution> {
    check_eta(eta)?;
    if logp_old.len() != u.len() {
        return Err(CoreError::InvalidInput(format!(
            "logp_old has {} entries but u has {}",
            logp_old.len(),
            u.len()
        )));
    }
    if u.is_zero() {
        // computed exactly as the loss computes p, so a neutral group gives
        // a gradient of exactly zero on the snapshot
        return Ok(TargetDistribution(log_softmax(logp_old).iter().map(|l| l.exp()).collect()));
    }
    let tilted: Vec<f64> = log_softmax(logp_old)
        .iter()
        .zip(u.as_slice())
        .map(|(l, ui)| l + ui / eta)
        .collect();
    Ok(TargetDistribution(softmax(&tilted)))
}

/// Target with the snapshot anchor removed: `q ∝ exp(u / eta)`.
pub fn tpo_target_no_anchor(u: &StandardizedScores, eta: f64) -> Result<TargetDistribution> {
    check_eta(eta)?;
    let scaled: Vec<f64> = u.as_slice().iter().map(|x| x / eta).collect();
    Ok(TargetDistribution(softmax(&scaled)))
}

/// Cross-entropy `-Σ q_i log p_i` of the current group policy against a
/// fixed target, and its gradient `p - q` with respect to the candidate
/// log-probabilities.
pub fn tpo_loss_and_logit_grad(group: &ScoredGroup, q: &TargetDistribution) -> (f64, Vec<f64>) {
    cross_entropy_to_target(&group.logp_cur, q.as_slice())
}

pub(crate) fn cross_entropy_to_target(logp_cur: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let log_p = log_softmax(logp_cur);
    let loss = -q
        .iter()
        .zip(&log_p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, lp)| qi * lp)
        .sum::<f64>();
    let grad = log_p.iter().zip(q).map(|(lp, qi)| lp.exp() - qi).collect();
    (loss, grad)
}

/// `Σ r_i u_i - eta · KL(r ‖ p_old)` with `0 · log 0 = 0`.
///
/// `logp_old` may be unnormalized; it is renormalized over the group.
pub fn kl_objective(r: &[f64], u: &[f64], logp_old: &[f64], eta: f64) -> f64 {
    let log_p_old = log_softmax(logp_old);
    let gain: f64 = r.iter().zip(u).map(|(ri, ui)| ri * ui).sum();
    let kl: f64 = r
        .iter()
        .zip(&log_p_old)
        .filter(|(ri, _)| **ri > 0.0)
        .map(|(ri, lp)| ri * (ri.ln() - lp))
        .sum();
    gain - eta * kl
}

/// Group-relative advantages: the same z-score convention as
/// [`standardize`], zero variance included.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    standardize(rewards).map(StandardizedScores::into_vec)
}

/// Estimator for the reverse KL penalty towards the rollout snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlEstimator {
    /// Per-candidate `exp(Δ) - Δ - 1` with `Δ = logp_old - logp_cur`.
    #[default]
    K3,
    /// Exact `KL(p^θ ‖ p^old)` between the renormalized group policies.
    ExactGroup,
}

/// Value and gradient (w.r.t. `logp_cur`) of the clipped group surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Clipped surrogate averaged over the group plus `kl_beta` times a reverse
/// KL estimate to the snapshot.
pub fn grpo_loss(
    logp_cur: &[f64],
    logp_old: &[f64],
    advantages: &[f64],
    clip_eps: f64,
    kl_beta: f64,
    estimator: KlEstimator,
) -> GrpoLoss {
    let k = logp_cur.len();
    let inv_k = 1.0 / k as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; k];
    for i in 0..k {
        let ratio = (logp_cur[i] - logp_old[i]).exp();
        let a = advantages[i];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
        if unclipped <= clipped {
            value -= unclipped * inv_k;
            grad[i] -= unclipped * inv_k;
        } else {
            value -= clipped * inv_k;
        }
    }
    if kl_beta != 0.0 {
        match estimator {
            KlEstimator::K3 => {
                for i in 0..k {
                    let delta = logp_old[i] - logp_cur[i];
                    value += kl_beta * inv_k * (delta.exp() - delta - 1.0);
                    grad[i] += kl_beta * inv_k * (1.0 - delta.exp());
                }
            }
            KlEstimator::ExactGroup => {
                let lp = log_softmax(logp_cur);
                let lo = log_softmax(logp_old);
                let kl: f64 = lp.iter().zip(&lo).map(|(a, b)| a.exp() * (a - b)).sum();
                value += kl_beta * kl;
                for i in 0..k {
                    grad[i] += kl_beta * lp[i].exp() * (lp[i] - lo[i] - kl);
                }
            }
        }
    }
    GrpoLoss { value, grad }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid-gated score-function weight: `A · σ(A · (-log π) / eta)`.
pub fn dg_gate_weight(advantage: f64, logp: f64, eta: f64) -> f64 {
    advantage * sigmoid(advantage * (-logp) / eta)
}

/// `1 - cos(update, oracle)` over the flattened vectors, in `[0, 2]`.
/// `None` when either vector is zero.
pub fn misalignment(update: &[f64], oracle: &[f64]) -> Option<f64> {
    let dot: f64 = update.iter().zip(oracle).map(|(a, b)| a * b).sum();
    let nu = update.iter().map(|a| a * a).sum::<f64>().sqrt();
    let no = oracle.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || no == 0.0 {
        return None;
    }
    Some((1.0 - dot / (nu * no)).clamp(0.0, 2.0))
}
