//! Training configurations and their validation.

use serde::{Deserialize, Serialize};
use tpo_core::KlEstimator;

use crate::envs::{RewardKind, TokenTaskSpec};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TPO")]
    Tpo,
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "GRPO_noKL")]
    GrpoNoKl,
    #[serde(rename = "GRPO_zvMasked")]
    GrpoZvMasked,
    #[serde(rename = "PG")]
    Pg,
    #[serde(rename = "GroupPG")]
    GroupPg,
    #[serde(rename = "DG")]
    Dg,
    #[serde(rename = "PPO")]
    Ppo,
    #[serde(rename = "TPO_noAnchor")]
    TpoNoAnchor,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Tpo,
        Method::Grpo,
        Method::GrpoNoKl,
        Method::GrpoZvMasked,
        Method::Pg,
        Method::GroupPg,
        Method::Dg,
        Method::Ppo,
        Method::TpoNoAnchor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tpo => "TPO",
            Method::Grpo => "GRPO",
            Method::GrpoNoKl => "GRPO_noKL",
            Method::GrpoZvMasked => "GRPO_zvMasked",
            Method::Pg => "PG",
            Method::GroupPg => "GroupPG",
            Method::Dg => "DG",
            Method::Ppo => "PPO",
            Method::TpoNoAnchor => "TPO_noAnchor",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    /// Methods that score `K` candidates per context.
    pub fn is_grouped(self) -> bool {
        matches!(
            self,
            Method::Tpo | Method::TpoNoAnchor | Method::Grpo | Method::GrpoNoKl | Method::GrpoZvMasked | Method::GroupPg
        )
    }

    pub fn is_grpo(self) -> bool {
        matches!(self, Method::Grpo | Method::GrpoNoKl | Method::GrpoZvMasked)
    }

    pub fn is_tpo(self) -> bool {
        matches!(self, Method::Tpo | Method::TpoNoAnchor)
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Method::Dg | Method::Pg => 1,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// `K` candidates per prefix state along one behavior trajectory.
    Token,
    /// `K` complete rollouts per prompt.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Same prompts per step for every method.
    Prompt,
    /// Same rollouts per step: single-sample methods see `K·B` prompts at
    /// `√K` times the learning rate.
    Interaction,
}

/// What single-sample methods credit to a behavior token on per-token
/// reward tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCredit {
    /// The token's own score.
    Immediate,
    /// Sum of the scores from this position to the end of the trajectory.
    ReturnToGo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64, heads: 4, layers: 2, mlp_ratio: 4, init_std: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenTrainConfig {
    pub task: TokenTaskSpec,
    pub method: Method,
    pub grouping: Grouping,
    pub k: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub eta: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub kl_estimator: KlEstimator,
    pub value_coef: f64,
    /// Credit for single-sample methods under token grouping.
    pub ppo_credit: TokenCredit,
    pub pg_credit: TokenCredit,
    pub matching: Matching,
    pub episodes: usize,
    /// Ends the run after the first episode whose error is at or below this.
    pub stop_below: Option<f64>,
    pub final_window: usize,
    pub allow_dg_multiepoch: bool,
    pub model: ModelConfig,
}

impl TokenTrainConfig {
    pub fn new(task: TokenTaskSpec, method: Method, grouping: Grouping) -> Self {
        Self {
            task,
            method,
            grouping,
            k: 8,
            batch: 100,
            epochs: method.default_epochs(),
            lr: 1e-3,
            eta: 1.0,
            clip_eps: 0.2,
            kl_beta: 0.04,
            kl_estimator: KlEstimator::K3,
            value_coef: 0.5,
            ppo_credit: TokenCredit::ReturnToGo,
            pg_credit: TokenCredit::Immediate,
            matching: Matching::Prompt,
            episodes: 1000,
            stop_below: None,
            final_window: 20,
            allow_dg_multiepoch: false,
            model: ModelConfig::default(),
        }
    }

    /// The KL weight the method actually uses.
    pub fn effective_kl_beta(&self) -> f64 {
        if self.method == Method::GrpoNoKl {
            0.0
        } else {
            self.kl_beta
        }
    }

    /// Prompts per episode and learning-rate multiplier after matching.
    pub fn effective_batch_and_lr_scale(&self) -> (usize, f64) {
        match self.matching {
            Matching::Interaction if !self.method.is_grouped() => (self.batch * self.k, (self.k as f64).sqrt()),
            _ => (self.batch, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        validate_common(self.method, self.epochs, self.eta, self.lr, self.allow_dg_multiepoch)?;
        if self.method.is_grouped() && self.k < 2 {
            return Err(LabError::config("k", format!("{} needs at least 2 candidates", self.method.name())));
        }
        if self.k == 0 {
            return Err(LabError::config("k", "must be positive"));
        }
        if self.batch == 0 {
            return Err(LabError::config("batch", "must be positive"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(LabError::config("clip_eps", "must lie in (0, 1)"));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(LabError::config("kl_beta", "must be non-negative"));
        }
        if !(self.value_coef >= 0.0 && self.value_coef.is_finite()) {
            return Err(LabError::config("value_coef", "must be non-negative"));
        }
        if self.episodes == 0 {
            return Err(LabError::config("episodes", "must be positive"));
        }
        if self.final_window == 0 {
            return Err(LabError::config("final_window", "must be positive"));
        }
        if self.grouping == Grouping::Token && self.task.reward == RewardKind::Terminal {
            return Err(LabError::config(
                "grouping",
                "token-level grouping needs per-token scores; terminal reward requires sequence grouping",
            ));
        }
        let m = &self.model;
        if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 {
            return Err(LabError::config("model.heads", format!("{} heads do not divide d_model {}", m.heads, m.d_model)));
        }
        if m.layers == 0 || m.mlp_ratio == 0 || !(m.init_std > 0.0) {
            return Err(LabError::config("model", "layers, mlp_ratio and init_std must be positive"));
        }
        Ok(())
    }
}

fn validate_common(method: Method, epochs: usize, eta: f64, lr: f64, allow_dg_multiepoch: bool) -> Result<()> {
    if epochs == 0 {
        return Err(LabError::config("epochs", "must be at least 1"));
    }
    if method == Method::Dg && epochs > 1 && !allow_dg_multiepoch {
        return Err(LabError::config(
            "epochs",
            "DG with more than one epoch requires --allow-dg-multiepoch",
        ));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(LabError::config("eta", "must be positive"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(LabError::config("lr", "must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistTrainConfig {
    pub method: Method,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
    pub eta: f64,
    pub epochs: usize,
    pub allow_dg_multiepoch: bool,
    pub eval_every: usize,
    /// Step at which the concentration study runs, if any.
    pub concentration_step: Option<usize>,
    pub stop_below: Option<f64>,
    pub final_window: usize,
}

impl MnistTrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            batch: 100,
            steps: 10_000,
            lr: 1e-3,
            hidden: 128,
            eta: 1.0,
            epochs: 1,
            allow_dg_multiepoch: false,
            eval_every: 500,
            concentration_step: Some(2000),
            stop_below: None,
            final_window: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_common(self.method, self.epochs, self.eta, self.lr, self.allow_dg_multiepoch)?;
        if matches!(self.method, Method::Ppo) {
            return Err(LabError::config("method", "PPO is not defined for the MNIST bandit"));
        }
        if self.batch < 2 {
            return Err(LabError::config("batch", "must be at least 2"));
        }
        if self.steps == 0 || self.hidden == 0 || self.eval_every == 0 || self.final_window == 0 {
            return Err(LabError::config("steps", "steps, hidden, eval_every and final_window must be positive"));
        }
        Ok(())
    }
}
