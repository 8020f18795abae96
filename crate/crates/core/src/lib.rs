//! Numerical kernels for grouped policy optimization.
//!
//! The central object is a *group*: `K` scored candidates drawn for a single
//! context. [`group`] holds the math that turns a group into an update
//! (standardization, the exponentially tilted target, the cross-entropy
//! fit and the scalar-weighted baselines). [`coefficients`] and
//! [`mnist_updates`] hold the closed-form expected updates for one-hot
//! rewards, and [`tabular`] runs exact logit-table bandits on top of them.

pub mod coefficients;
pub mod error;
pub mod exec;
pub mod group;
pub mod mnist_updates;
pub mod tabular;

pub use error::{CoreError, Result};
pub use group::{
    dg_gate_weight, group_policy, grpo_advantages, grpo_loss, kl_objective, log_softmax,
    misalignment, sigmoid, standardize, tpo_loss_and_logit_grad, tpo_target,
    tpo_target_no_anchor, GroupDistribution, GrpoLoss, KlEstimator, ScoredGroup,
    StandardizedScores, TargetDistribution,
};
