//! Exact tabular bandits.
//!
//! The policy in context `n` is the softmax of row `n` of a [`LogitTable`].
//! Updates are logit-space ascent directions over the whole table; steps
//! are normalized by the global L2 norm of the direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::exec::{stream_seed, Execution};
use crate::group::{
    dg_gate_weight, group_policy, log_softmax, misalignment, standardize, tpo_target,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TabularMethod {
    #[serde(rename = "PG")]
    Pg,
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "DG")]
    Dg,
    #[serde(rename = "TPO")]
    Tpo,
    #[serde(rename = "CE")]
    CeOracle,
}

impl TabularMethod {
    pub const ALL: [TabularMethod; 5] = [
        TabularMethod::Pg,
        TabularMethod::Grpo,
        TabularMethod::Dg,
        TabularMethod::Tpo,
        TabularMethod::CeOracle,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TabularMethod::Pg => "PG",
            TabularMethod::Grpo => "GRPO",
            TabularMethod::Dg => "DG",
            TabularMethod::Tpo => "TPO",
            TabularMethod::CeOracle => "CE",
        }
    }

    fn is_grouped(self) -> bool {
        matches!(self, TabularMethod::Grpo | TabularMethod::Tpo)
    }
}

/// `contexts × actions` logits, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTable {
    contexts: usize,
    actions: usize,
    logits: Vec<f64>,
}

impl LogitTable {
    pub fn zeros(contexts: usize, actions: usize) -> Self {
        Self { contexts, actions, logits: vec![0.0; contexts * actions] }
    }

    pub fn from_vec(contexts: usize, actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != contexts * actions {
            return Err(CoreError::InvalidInput(format!(
                "expected {} logits, got {}",
                contexts * actions,
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::InvalidInput("logits must be finite".into()));
        }
        Ok(Self { contexts, actions, logits })
    }

    /// I.i.d. standard normal logits.
    pub fn standard_normal(contexts: usize, actions: usize, rng: &mut impl Rng) -> Self {
        let logits = (0..contexts * actions).map(|_| StandardNormal.sample(rng)).collect();
        Self { contexts, actions, logits }
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.logits[n * self.actions..(n + 1) * self.actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    pub fn policy(&self, n: usize) -> Vec<f64> {
        group_policy(self.row(n)).into_vec()
    }
}

/// One correct action per context, indicator reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditSpec {
    pub contexts: usize,
    pub actions: usize,
    pub correct: Vec<usize>,
}

impl BanditSpec {
    pub fn new(contexts: usize, actions: usize, correct: Vec<usize>) -> Result<Self> {
        if correct.len() != contexts {
            return Err(CoreError::InvalidConfig(format!(
                "{} correct actions for {contexts} contexts",
                correct.len()
            )));
        }
        if let Some(bad) = correct.iter().find(|&&y| y >= actions) {
            return Err(CoreError::InvalidConfig(format!(
                "correct action {bad} out of range for {actions} actions"
            )));
        }
        Ok(Self { contexts, actions, correct })
    }

    pub fn random(contexts: usize, actions: usize, rng: &mut impl Rng) -> Self {
        let correct = (0..contexts).map(|_| rng.random_range(0..actions)).collect();
        Self { contexts, actions, correct }
    }

    pub fn reward(&self, n: usize, a: usize) -> f64 {
        if self.correct[n] == a {
            1.0
        } else {
            0.0
        }
    }

    fn check(&self, table: &LogitTable) -> Result<()> {
        if table.contexts != self.contexts || table.actions != self.actions {
            return Err(CoreError::InvalidConfig(format!(
                "table is {}×{} but bandit is {}×{}",
                table.contexts, table.actions, self.contexts, self.actions
            )));
        }
        Ok(())
    }
}

/// `1 - mean_n π_n(y_n)`.
pub fn error(table: &LogitTable, spec: &BanditSpec) -> f64 {
    let mean_p = (0..spec.contexts)
        .map(|n| table.policy(n)[spec.correct[n]])
        .sum::<f64>()
        / spec.contexts as f64;
    1.0 - mean_p
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if x < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Monte-Carlo update direction from `batch` sampled actions per context.
///
/// Grouped methods treat the batch of one context as its group. PG and DG
/// use the batch-mean reward as baseline. Context `n` draws from the stream
/// `stream_seed(seed, n)`, so the result does not depend on `exec`.
pub fn sampled_gradient(
    table: &LogitTable,
    spec: &BanditSpec,
    method: TabularMethod,
    batch: usize,
    eta: f64,
    seed: u64,
    exec: Execution,
) -> Result<Vec<f64>> {
    spec.check(table)?;
    if method.is_grouped() && batch < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "{} needs a group of at least 2 samples, got {batch}",
            method.label()
        )));
    }
    if batch == 0 {
        return Err(CoreError::InvalidConfig("batch must be positive".into()));
    }
    let a_count = table.actions;
    let rows = exec.map(spec.contexts, |n| -> Result<Vec<f64>> {
        let pi = table.policy(n);
        let y = spec.correct[n];
        let mut g = vec![0.0; a_count];
        if method == TabularMethod::CeOracle {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = if i == y { 1.0 } else { 0.0 } - pi[i];
            }
            return Ok(g);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, n as u64));
        let actions: Vec<usize> = (0..batch).map(|_| sample_categorical(&pi, &mut rng)).collect();
        let rewards: Vec<f64> = actions.iter().map(|&a| spec.reward(n, a)).collect();
        let mean_r = rewards.iter().sum::<f64>() / batch as f64;
        let scale = 1.0 / batch as f64;
        // accumulates Σ w_i (e_{a_i} - π)
        let mut push = |a: usize, w: f64| {
            g[a] += w;
            for (gi, p) in g.iter_mut().zip(&pi) {
                *gi -= w * p;
            }
        };
        match method {
            TabularMethod::Pg => {
                for (&a, &r) in actions.iter().zip(&rewards) {
                    push(a, scale * (r - mean_r));
                }
            }
            TabularMethod::Grpo => {
                let adv = standardize(&rewards)?;
                for (&a, &u) in actions.iter().zip(adv.as_slice()) {
                    push(a, scale * u);
                }
            }
            TabularMethod::Dg => {
                for (&a, &r) in actions.iter().zip(&rewards) {
                    push(a, scale * dg_gate_weight(r - mean_r, pi[a].ln(), eta));
                }
            }
            TabularMethod::Tpo => {
                let logp: Vec<f64> = actions.iter().map(|&a| pi[a].ln()).collect();
                let u = standardize(&rewards)?;
                let q = tpo_target(&logp, &u, eta)?;
                let p = group_policy(&logp);
                // descent on -Σ q log p: Σ_i (q_i - p_i)(e_{a_i} - π)
                for ((&a, qi), pi_g) in actions.iter().zip(q.as_slice()).zip(p.as_slice()) {
                    push(a, qi - pi_g);
                }
            }
            TabularMethod::CeOracle => unreachable!(),
        }
        Ok(g)
    });
    let mut out = Vec::with_capacity(table.logits.len());
    for row in rows {
        out.extend(row?);
    }
    Ok(out)
}

/// Expected update per context under one-hot rewards, by enumeration over
/// actions. PG and DG use baseline `b = 0`; GRPO standardizes with the
/// Bernoulli mean and std of the reward; TPO tilts the full action
/// distribution by the standardized one-hot score vector.
pub fn exact_population_update(
    table: &LogitTable,
    spec: &BanditSpec,
    method: TabularMethod,
    eta: f64,
) -> Result<Vec<f64>> {
    spec.check(table)?;
    let a_count = table.actions;
    let mut out = vec![0.0; table.logits.len()];
    for n in 0..spec.contexts {
        let pi = table.policy(n);
        let y = spec.correct[n];
        let p = pi[y];
        let g = &mut out[n * a_count..(n + 1) * a_count];
        let mut push = |a: usize, w: f64| {
            g[a] += w;
            for (gi, pj) in g.iter_mut().zip(&pi) {
                *gi -= w * pj;
            }
        };
        match method {
            TabularMethod::CeOracle => push(y, 1.0),
            TabularMethod::Pg => {
                for a in 0..a_count {
                    push(a, pi[a] * spec.reward(n, a));
                }
            }
            TabularMethod::Dg => {
                for a in 0..a_count {
                    let r = spec.reward(n, a);
                    push(a, pi[a] * dg_gate_weight(r, pi[a].ln(), eta));
                }
            }
            TabularMethod::Grpo => {
                let sd = (p * (1.0 - p)).sqrt();
                if sd > 0.0 {
                    for a in 0..a_count {
                        push(a, pi[a] * (spec.reward(n, a) - p) / sd);
                    }
                }
            }
            TabularMethod::Tpo => {
                let rewards: Vec<f64> = (0..a_count).map(|a| spec.reward(n, a)).collect();
                let u = standardize(&rewards)?;
                let q = tpo_target(&log_softmax(table.row(n)), &u, eta)?;
                for (gi, (qi, pj)) in g.iter_mut().zip(q.as_slice().iter().zip(&pi)) {
                    *gi = qi - pj;
                }
            }
        }
    }
    Ok(out)
}

/// Step size for normalized logit steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedStep {
    pub alpha: f64,
}

impl Default for NormalizedStep {
    fn default() -> Self {
        Self { alpha: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub table: LogitTable,
    /// False when the direction was zero and the table was left unchanged.
    pub moved: bool,
}

/// `table + alpha · direction / ‖direction‖₂` with the norm taken over the
/// whole table.
pub fn normalized_step(table: &LogitTable, direction: &[f64], step: NormalizedStep) -> Result<StepOutcome> {
    if direction.len() != table.logits.len() {
        return Err(CoreError::InvalidInput("direction does not match the table".into()));
    }
    if !(step.alpha > 0.0) {
        return Err(CoreError::InvalidParameter(format!("alpha must be positive, got {}", step.alpha)));
    }
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Ok(StepOutcome { table: table.clone(), moved: false });
    }
    let mut next = table.clone();
    let s = step.alpha / norm;
    for (l, d) in next.logits.iter_mut().zip(direction) {
        *l += s * d;
    }
    Ok(StepOutcome { table: next, moved: true })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableInit {
    Zeros,
    StandardNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UpdateMode {
    Sampled { batch: usize },
    Exact,
}

/// Direction that misalignment is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    /// Exact policy gradient `p (e_y - π)`.
    PolicyGradient,
    /// Cross-entropy direction `e_y - π`.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    pub contexts: usize,
    pub actions: usize,
    pub init: TableInit,
    pub update: UpdateMode,
    pub oracle: Oracle,
    pub step: NormalizedStep,
    pub steps: usize,
    pub eta: f64,
}

impl TabularConfig {
    /// One context, 100 actions, 100 samples per step.
    pub fn single_context(steps: usize) -> Self {
        Self {
            contexts: 1,
            actions: 100,
            init: TableInit::Zeros,
            update: UpdateMode::Sampled { batch: 100 },
            oracle: Oracle::PolicyGradient,
            step: NormalizedStep::default(),
            steps,
            eta: 1.0,
        }
    }

    /// 100 contexts of 10 actions with exact updates and N(0,1) logits.
    pub fn multi_context(steps: usize) -> Self {
        Self {
            contexts: 100,
            actions: 10,
            init: TableInit::StandardNormal,
            update: UpdateMode::Exact,
            oracle: Oracle::CrossEntropy,
            step: NormalizedStep::default(),
            steps,
            eta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularRecord {
    pub step: usize,
    pub error: f64,
    /// Misalignment of the update taken at this step; `None` at step 0 and
    /// whenever the update was zero.
    pub misalignment: Option<f64>,
    pub grad_norm: f64,
}

/// Runs one seed. Record `t` holds the error after `t` steps.
pub fn run_tabular_experiment(
    config: &TabularConfig,
    method: TabularMethod,
    seed: u64,
    exec: Execution,
) -> Result<Vec<TabularRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0));
    let spec = BanditSpec::random(config.contexts, config.actions, &mut rng);
    let mut table = match config.init {
        TableInit::Zeros => LogitTable::zeros(config.contexts, config.actions),
        TableInit::StandardNormal => {
            LogitTable::standard_normal(config.contexts, config.actions, &mut rng)
        }
    };
    let mut records = Vec::with_capacity(config.steps + 1);
    records.push(TabularRecord {
        step: 0,
        error: error(&table, &spec),
        misalignment: None,
        grad_norm: 0.0,
    });
    for t in 1..=config.steps {
        let direction = match config.update {
            UpdateMode::Exact => exact_population_update(&table, &spec, method, config.eta)?,
            UpdateMode::Sampled { batch } => sampled_gradient(
                &table,
                &spec,
                method,
                batch,
                config.eta,
                stream_seed(seed, t as u64),
                exec,
            )?,
        };
        let oracle_method = match config.oracle {
            Oracle::PolicyGradient => TabularMethod::Pg,
            Oracle::CrossEntropy => TabularMethod::CeOracle,
        };
        let oracle = exact_population_update(&table, &spec, oracle_method, config.eta)?;
        let mis = misalignment(&direction, &oracle);
        let grad_norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        table = normalized_step(&table, &direction, config.step)?.table;
        records.push(TabularRecord { step: t, error: error(&table, &spec), misalignment: mis, grad_norm });
    }
    Ok(records)
}
