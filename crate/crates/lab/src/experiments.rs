//! Named experiment presets, config overrides, and run-directory outputs.
//!
//! A [`Plan`] is a list of labelled arms crossed with a list of seeds. Every
//! `(arm, seed)` pair is an independent run writing its own part file; parts
//! are merged into `metrics.csv` in arm-then-seed order once all runs end,
//! so the output does not depend on scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tpo_core::exec::Execution;
use tpo_core::tabular::{TabularConfig, TabularMethod};
use tpo_core::KlEstimator;

use crate::config::{Grouping, Matching, Method, MnistTrainConfig, TokenTrainConfig};
use crate::diagnostics::{write_concentration_csv, ConcentrationBin};
use crate::envs::{load_mnist, resolve_mnist_dir, MnistDataset, MnistSplit, RewardKind, TargetLogic, TokenTaskSpec};
use crate::error::{LabError, Result};
use crate::metrics::{read_rows, summarize_rows, write_rows, ArmSummary, MetricsRow, DEFAULT_THRESHOLD};
use crate::trainers::mnist::train_mnist;
use crate::trainers::tabular::train_tabular;
use crate::trainers::token::train_token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    TabularSingle,
    TabularMulti,
    Mnist,
    TokenReversal,
    Variations,
    Terminal,
    Ablations,
    KSweep,
    EpochSweep,
    EtaSweep,
    DgMultiepoch,
    Diagnostics,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 12] = [
        ExperimentId::TabularSingle,
        ExperimentId::TabularMulti,
        ExperimentId::Mnist,
        ExperimentId::TokenReversal,
        ExperimentId::Variations,
        ExperimentId::Terminal,
        ExperimentId::Ablations,
        ExperimentId::KSweep,
        ExperimentId::EpochSweep,
        ExperimentId::EtaSweep,
        ExperimentId::DgMultiepoch,
        ExperimentId::Diagnostics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::TabularSingle => "tabular_single",
            ExperimentId::TabularMulti => "tabular_multi",
            ExperimentId::Mnist => "mnist",
            ExperimentId::TokenReversal => "token_reversal",
            ExperimentId::Variations => "variations",
            ExperimentId::Terminal => "terminal",
            ExperimentId::Ablations => "ablations",
            ExperimentId::KSweep => "k_sweep",
            ExperimentId::EpochSweep => "epoch_sweep",
            ExperimentId::EtaSweep => "eta_sweep",
            ExperimentId::DgMultiepoch => "dg_multiepoch",
            ExperimentId::Diagnostics => "diagnostics",
        }
    }
}

impl FromStr for ExperimentId {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let known: Vec<&str> = ExperimentId::ALL.iter().map(|e| e.name()).collect();
            LabError::config("experiment", format!("unknown experiment {s:?}; expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    #[default]
    Ci,
}

impl FromStr for Scale {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "ci" => Ok(Scale::Ci),
            _ => Err(LabError::config("scale", format!("expected paper or ci, got {s:?}"))),
        }
    }
}

/// Optional settings layered over a preset. Fields that a preset sweeps
/// (vocab, horizon, k, epochs, eta) replace the sweep with a single value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub seed_count: Option<usize>,
    pub methods: Option<Vec<Method>>,
    pub logics: Option<Vec<TargetLogic>>,
    pub rewards: Option<Vec<RewardKind>>,
    #[serde(alias = "H")]
    pub horizon: Option<usize>,
    pub vocab: Option<usize>,
    pub k: Option<usize>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub eta: Option<f64>,
    pub clip_eps: Option<f64>,
    pub kl_beta: Option<f64>,
    pub kl_estimator: Option<KlEstimator>,
    pub value_coef: Option<f64>,
    pub matching: Option<Matching>,
    pub episodes: Option<usize>,
    pub steps: Option<usize>,
    pub d_model: Option<usize>,
    pub hidden: Option<usize>,
    pub eval_every: Option<usize>,
    pub stop_below: Option<f64>,
    pub final_window: Option<usize>,
    pub threshold: Option<f64>,
    pub allow_dg_multiepoch: Option<bool>,
    pub mnist_dir: Option<PathBuf>,
}

macro_rules! merge_fields {
    ($base:ident, $top:ident; $($f:ident),*) => {
        Overrides { $($f: $top.$f.or($base.$f)),* }
    };
}

impl Overrides {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::config("config", format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LabError::config("config", e.to_string()))
    }

    /// Field-wise merge; values set in `top` win.
    pub fn layered(self, top: Overrides) -> Overrides {
        let base = self;
        merge_fields!(base, top; seeds, seed_count, methods, logics, rewards, horizon, vocab, k, batch, epochs,
            lr, eta, clip_eps, kl_beta, kl_estimator, value_coef, matching, episodes, steps, d_model, hidden,
            eval_every, stop_below, final_window, threshold, allow_dg_multiepoch, mnist_dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArmSpec {
    Tabular { config: TabularConfig, method: TabularMethod },
    Mnist { config: MnistTrainConfig },
    Token { config: TokenTrainConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    #[serde(flatten)]
    pub spec: ArmSpec,
}

impl Arm {
    fn final_window(&self) -> usize {
        match &self.spec {
            ArmSpec::Tabular { .. } => 1,
            ArmSpec::Mnist { config } => config.final_window,
            ArmSpec::Token { config } => config.final_window,
        }
    }

    fn validate(&self) -> Result<()> {
        match &self.spec {
            ArmSpec::Tabular { config, .. } => {
                if config.steps == 0 || !(config.eta > 0.0) {
                    return Err(LabError::config("steps", format!("{}: steps and eta must be positive", self.label)));
                }
                if let tpo_core::tabular::UpdateMode::Sampled { batch: 0 } = config.update {
                    return Err(LabError::config("batch", format!("{}: batch must be positive", self.label)));
                }
                Ok(())
            }
            ArmSpec::Mnist { config } => config.validate(),
            ArmSpec::Token { config } => config.validate(),
        }
        .map_err(|e| match e {
            LabError::Config { field, message } => LabError::Config { field, message: format!("{}: {message}", self.label) },
            e => e,
        })
    }
}

/// Fully resolved experiment: what `run` executes and what the manifest
/// records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub experiment: ExperimentId,
    pub scale: Scale,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub arms: Vec<Arm>,
    pub mnist_dir: Option<PathBuf>,
    pub overrides: Overrides,
}

fn method_label(cfg: &TokenTrainConfig) -> String {
    let mut s = cfg.method.name().to_string();
    if cfg.method.is_grouped() && cfg.grouping == Grouping::Token {
        s.push_str("_token");
    }
    if cfg.matching == Matching::Interaction && !cfg.method.is_grouped() {
        s.push_str("@interaction");
    }
    s
}

fn label(parts: &[String], method: &str) -> String {
    if parts.is_empty() {
        method.to_string()
    } else {
        format!("{}:{method}", parts.join(","))
    }
}

fn token_arm(parts: &[String], cfg: TokenTrainConfig) -> Arm {
    Arm { label: label(parts, &method_label(&cfg)), spec: ArmSpec::Token { config: cfg } }
}

fn task(h: usize, v: usize, logic: TargetLogic, reward: RewardKind) -> Result<TokenTaskSpec> {
    TokenTaskSpec::new(h, v, logic, reward)
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

struct Ctx<'a> {
    scale: Scale,
    ov: &'a Overrides,
}

impl Ctx<'_> {
    fn paper(&self) -> bool {
        self.scale == Scale::Paper
    }

    fn list<T: Clone>(&self, over: Option<T>, default: Vec<T>) -> Vec<T> {
        over.map_or(default, |v| vec![v])
    }

    fn methods(&self, default: &[Method]) -> Vec<Method> {
        match &self.ov.methods {
            Some(m) => m.clone(),
            None => default.to_vec(),
        }
    }

    fn seeds(&self, paper: usize, ci: usize) -> Vec<u64> {
        if let Some(s) = &self.ov.seeds {
            return s.clone();
        }
        let n = self.ov.seed_count.unwrap_or(if self.paper() { paper } else { ci });
        (0..n as u64).collect()
    }

    /// The terminal/diagnostics regime with episode budget and batch.
    fn sequence_cfg(&self, t: TokenTaskSpec, method: Method, episodes: usize) -> TokenTrainConfig {
        let mut c = TokenTrainConfig::new(t, method, Grouping::Sequence);
        c.episodes = episodes;
        c
    }
}

fn tabular_arms(ctx: &Ctx, multi: bool) -> Vec<Arm> {
    let steps = if multi { 1500 } else { 1000 };
    let methods: Vec<TabularMethod> = if multi {
        vec![TabularMethod::CeOracle, TabularMethod::Pg, TabularMethod::Grpo, TabularMethod::Dg, TabularMethod::Tpo]
    } else {
        vec![TabularMethod::Pg, TabularMethod::Grpo, TabularMethod::Dg, TabularMethod::Tpo]
    };
    let methods: Vec<TabularMethod> = match &ctx.ov.methods {
        Some(ms) => methods.into_iter().filter(|m| ms.iter().any(|x| x.name() == m.label())).collect(),
        None => methods,
    };
    methods
        .into_iter()
        .map(|m| {
            let mut config =
                if multi { TabularConfig::multi_context(steps) } else { TabularConfig::single_context(steps) };
            if let Some(s) = ctx.ov.steps {
                config.steps = s;
            }
            if let Some(e) = ctx.ov.eta {
                config.eta = e;
            }
            if let (Some(b), tpo_core::tabular::UpdateMode::Sampled { .. }) = (ctx.ov.batch, config.update) {
                config.update = tpo_core::tabular::UpdateMode::Sampled { batch: b };
            }
            Arm { label: m.label().to_string(), spec: ArmSpec::Tabular { config, method: m } }
        })
        .collect()
}

/// Resolves a preset at a scale with overrides applied and validated.
pub fn resolve(experiment: ExperimentId, scale: Scale, ov: Overrides) -> Result<Plan> {
    use Method::*;
    let ctx = Ctx { scale, ov: &ov };
    let paper = ctx.paper();
    let logics = ov.logics.clone().unwrap_or_else(|| TargetLogic::ALL.to_vec());
    let rewards = ov.rewards.clone().unwrap_or_else(|| vec![RewardKind::BagOfTokens, RewardKind::Sequential]);
    let mut arms = Vec::new();
    let seeds;
    match experiment {
        ExperimentId::TabularSingle => {
            seeds = ctx.seeds(100, 20);
            arms = tabular_arms(&ctx, false);
        }
        ExperimentId::TabularMulti => {
            seeds = ctx.seeds(20, 20);
            arms = tabular_arms(&ctx, true);
        }
        ExperimentId::Mnist => {
            seeds = ctx.seeds(20, 5);
            for m in ctx.methods(&[Pg, Grpo, Dg, Tpo, GroupPg]) {
                let mut config = MnistTrainConfig::new(m);
                if let Some(v) = ov.steps {
                    config.steps = v;
                }
                if let Some(v) = ov.batch {
                    config.batch = v;
                }
                if let Some(v) = ov.lr {
                    config.lr = v;
                }
                if let Some(v) = ov.eta {
                    config.eta = v;
                }
                if let Some(v) = ov.epochs {
                    config.epochs = v;
                }
                if let Some(v) = ov.hidden {
                    config.hidden = v;
                }
                if let Some(v) = ov.eval_every {
                    config.eval_every = v;
                }
                if let Some(v) = ov.final_window {
                    config.final_window = v;
                }
                if let Some(v) = ov.allow_dg_multiepoch {
                    config.allow_dg_multiepoch = v;
                }
                config.stop_below = ov.stop_below;
                arms.push(Arm { label: m.name().to_string(), spec: ArmSpec::Mnist { config } });
            }
        }
        ExperimentId::TokenReversal => {
            seeds = ctx.seeds(20, 5);
            let vocabs = ctx.list(ov.vocab, if paper { vec![2, 4, 8, 16] } else { vec![2] });
            for v in vocabs {
                let t = task(ov.horizon.unwrap_or(10), v, TargetLogic::ReverseCopy, RewardKind::BagOfTokens)?;
                for m in ctx.methods(&[Tpo, Grpo, Dg, Ppo]) {
                    let mut c = TokenTrainConfig::new(t, m, Grouping::Token);
                    c.episodes = if paper { 1000 } else { 400 };
                    token_arm(&[format!("V={v}")], c).push_to(&mut arms);
                }
            }
        }
        ExperimentId::Variations => {
            seeds = ctx.seeds(10, 3);
            for &r in &rewards {
                for &l in &logics {
                    let t = task(ov.horizon.unwrap_or(10), ov.vocab.unwrap_or(2), l, r)?;
                    for m in ctx.methods(&[Tpo, Grpo, Dg, Ppo]) {
                        let mut c = TokenTrainConfig::new(t, m, Grouping::Token);
                        c.episodes = 1000;
                        if !paper {
                            c.stop_below = Some(DEFAULT_THRESHOLD);
                        }
                        token_arm(&[format!("{}/{}", l.name(), r.name())], c).push_to(&mut arms);
                    }
                }
            }
        }
        ExperimentId::Terminal => {
            seeds = ctx.seeds(20, 5);
            let hs = ctx.list(ov.horizon, if paper { vec![7, 8, 9, 10] } else { vec![7] });
            let matchings = match ov.matching {
                Some(m) => vec![m],
                None if paper => vec![Matching::Prompt, Matching::Interaction],
                None => vec![Matching::Prompt],
            };
            for h in hs {
                let t = task(h, ov.vocab.unwrap_or(2), TargetLogic::ReverseCopy, RewardKind::Terminal)?;
                for &matching in &matchings {
                    for m in ctx.methods(&[Tpo, Grpo, GrpoNoKl, Dg, Pg, Ppo]) {
                        if matching == Matching::Interaction && m.is_grouped() && ov.matching.is_none() {
                            continue;
                        }
                        let mut c = ctx.sequence_cfg(t, m, if paper { 2000 } else { 600 });
                        c.matching = matching;
                        token_arm(&[format!("H={h}")], c).push_to(&mut arms);
                    }
                }
            }
        }
        ExperimentId::Ablations => {
            seeds = ctx.seeds(20, 3);
            let hs = ctx.list(ov.horizon, if paper { vec![7, 8, 10] } else { vec![7] });
            for h in hs {
                let t = task(h, ov.vocab.unwrap_or(2), TargetLogic::ReverseCopy, RewardKind::Terminal)?;
                for m in ctx.methods(&[Tpo, TpoNoAnchor, GroupPg, Grpo, GrpoNoKl]) {
                    let c = ctx.sequence_cfg(t, m, if paper { 2000 } else { 600 });
                    token_arm(&[format!("H={h}")], c).push_to(&mut arms);
                }
            }
        }
        ExperimentId::Diagnostics | ExperimentId::KSweep | ExperimentId::EpochSweep => {
            seeds = match experiment {
                ExperimentId::Diagnostics => ctx.seeds(10, 5),
                _ => ctx.seeds(30, 5),
            };
            let t = task(ov.horizon.unwrap_or(8), ov.vocab.unwrap_or(2), TargetLogic::ReverseCopy, RewardKind::Terminal)?;
            let (ks, epochs, methods) = match experiment {
                ExperimentId::Diagnostics => (vec![32], vec![4], vec![Tpo, Grpo, GrpoZvMasked]),
                ExperimentId::KSweep => (
                    if paper { vec![4, 8, 16, 32, 64] } else { vec![4, 8, 16, 32] },
                    vec![4],
                    vec![Tpo, Grpo],
                ),
                _ => (vec![32], if paper { vec![1, 2, 4, 8, 16] } else { vec![1, 2, 4, 16] }, vec![Tpo, Grpo]),
            };
            let ks = ctx.list(ov.k, ks);
            let epochs = ctx.list(ov.epochs, epochs);
            for &k in &ks {
                for &e in &epochs {
                    for m in ctx.methods(&methods) {
                        let mut c = ctx.sequence_cfg(t, m, if paper { 2000 } else { 400 });
                        c.k = k;
                        c.epochs = e;
                        c.batch = 256;
                        let mut parts = Vec::new();
                        if ks.len() > 1 || experiment == ExperimentId::KSweep {
                            parts.push(format!("K={k}"));
                        }
                        if epochs.len() > 1 || experiment == ExperimentId::EpochSweep {
                            parts.push(format!("epochs={e}"));
                        }
                        token_arm(&parts, c).push_to(&mut arms);
                    }
                }
            }
        }
        ExperimentId::EtaSweep => {
            seeds = ctx.seeds(10, 5);
            let etas = ctx.list(ov.eta, vec![0.25, 0.5, 1.0, 2.0, 4.0]);
            let t = task(ov.horizon.unwrap_or(10), ov.vocab.unwrap_or(2), TargetLogic::ReverseCopy, RewardKind::BagOfTokens)?;
            for eta in etas {
                let mut c = TokenTrainConfig::new(t, Tpo, Grouping::Token);
                c.eta = eta;
                c.episodes = if paper { 1000 } else { 600 };
                if !paper {
                    c.stop_below = Some(DEFAULT_THRESHOLD);
                }
                token_arm(&[format!("eta={}", fmt_f(eta))], c).push_to(&mut arms);
            }
        }
        ExperimentId::DgMultiepoch => {
            seeds = ctx.seeds(20, 5);
            let epochs = ctx.list(ov.epochs, vec![1, 4]);
            let h = ov.horizon.unwrap_or(6);
            let mut tasks = vec![("terminal".to_string(), task(h, ov.vocab.unwrap_or(2), TargetLogic::ReverseCopy, RewardKind::Terminal)?)];
            if paper || ov.logics.is_some() || ov.rewards.is_some() {
                for &r in &rewards {
                    for &l in &logics {
                        tasks.push((format!("{}/{}", l.name(), r.name()), task(10, ov.vocab.unwrap_or(2), l, r)?));
                    }
                }
            }
            for (name, t) in tasks {
                for &e in &epochs {
                    let grouping = if t.reward == RewardKind::Terminal { Grouping::Sequence } else { Grouping::Token };
                    let mut c = TokenTrainConfig::new(t, Dg, grouping);
                    c.epochs = e;
                    c.allow_dg_multiepoch = true;
                    c.episodes = if t.reward == RewardKind::Terminal { 2000 } else { 1000 };
                    token_arm(&[name.clone(), format!("epochs={e}")], c).push_to(&mut arms);
                }
            }
        }
    }
    for arm in &mut arms {
        if let ArmSpec::Token { config } = &mut arm.spec {
            apply_token_overrides(config, &ov);
        }
    }
    if arms.is_empty() {
        return Err(LabError::config("methods", "no arms left after applying overrides"));
    }
    if seeds.is_empty() {
        return Err(LabError::config("seed_count", "must be at least 1"));
    }
    let mut labels: Vec<&str> = arms.iter().map(|a| a.label.as_str()).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(LabError::config("methods", "duplicate arm labels"));
    }
    for arm in &arms {
        arm.validate()?;
    }
    let threshold = ov.threshold.unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(LabError::config("threshold", "must be within [0, 1]"));
    }
    Ok(Plan { experiment, scale, seeds, threshold, arms, mnist_dir: ov.mnist_dir.clone(), overrides: ov })
}

impl Arm {
    fn push_to(self, arms: &mut Vec<Arm>) {
        arms.push(self);
    }
}

fn apply_token_overrides(c: &mut TokenTrainConfig, ov: &Overrides) {
    if let Some(v) = ov.horizon {
        c.task.horizon = v;
    }
    if let Some(v) = ov.vocab {
        c.task.vocab = v;
    }
    if let Some(v) = ov.k {
        c.k = v;
    }
    if let Some(v) = ov.batch {
        c.batch = v;
    }
    if let Some(v) = ov.epochs {
        c.epochs = v;
    }
    if let Some(v) = ov.lr {
        c.lr = v;
    }
    if let Some(v) = ov.eta {
        c.eta = v;
    }
    if let Some(v) = ov.clip_eps {
        c.clip_eps = v;
    }
    if let Some(v) = ov.kl_beta {
        c.kl_beta = v;
    }
    if let Some(v) = ov.kl_estimator {
        c.kl_estimator = v;
    }
    if let Some(v) = ov.value_coef {
        c.value_coef = v;
    }
    if let Some(v) = ov.episodes {
        c.episodes = v;
    }
    if let Some(v) = ov.d_model {
        c.model.d_model = v;
    }
    if let Some(v) = ov.stop_below {
        c.stop_below = Some(v);
    }
    if let Some(v) = ov.final_window {
        c.final_window = v;
    }
    if let Some(v) = ov.allow_dg_multiepoch {
        c.allow_dg_multiepoch = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: String,
    pub seed: u64,
    pub status: Status,
    pub error: Option<String>,
    pub episodes: Option<u64>,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: ExperimentId,
    pub scale: Scale,
    pub version: String,
    pub platform: String,
    pub parallel_feature: bool,
    pub jobs: usize,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub wall_clock_seconds: Option<f64>,
    pub status: Status,
    /// Interpretation choices that the outputs depend on.
    pub conventions: BTreeMap<String, String>,
    pub plan: Plan,
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: ExperimentId,
    pub threshold: f64,
    pub arms: Vec<ArmSummary>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub jobs: usize,
    pub checkpoints: bool,
}

/// What a finished `run` hands back besides the files it wrote.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub summary: Summary,
    pub rows: Vec<MetricsRow>,
    pub manifest: Manifest,
}

impl RunReport {
    pub fn arm(&self, label: &str) -> Option<&ArmSummary> {
        self.summary.arms.iter().find(|a| a.label == label)
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn conventions() -> BTreeMap<String, String> {
    [
        ("token_candidates", "K i.i.d. draws with replacement from the snapshot policy at each behavior prefix"),
        ("grpo_token_kl", "reverse-KL penalty applied per prefix group"),
        ("grpo_kl_reference", "rollout snapshot of the current batch"),
        ("misalignment", "1 - cosine similarity to the oracle update (interpretation)"),
        ("final_error", "mean error over the last final_window logged episodes"),
        ("steps_to_threshold", "first episode whose error is at or below the threshold"),
        ("single_sample_credit", "per-token score (PG, DG) or return-to-go (PPO) on per-token reward tasks"),
        ("mnist_error", "argmax error on the test split"),
        ("checkpoint_format", "flat little-endian f64 per tensor plus a JSON manifest"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n")?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct TaskOutput {
    rows: Vec<MetricsRow>,
    concentration: Option<Vec<ConcentrationBin>>,
    record: RunRecord,
}

struct Datasets {
    train: MnistDataset,
    test: MnistDataset,
}

fn run_task(arm: &Arm, seed: u64, data: Option<&Datasets>, ckpt_dir: Option<&Path>) -> TaskOutput {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut concentration = None;
    let mut sink = |r: MetricsRow| rows.push(r);
    let res: Result<Option<tpo_nn::ParamStore>> = match &arm.spec {
        ArmSpec::Tabular { config, method } => {
            train_tabular(config, *method, &arm.label, seed, Execution::Sequential, &mut sink).map(|_| None)
        }
        ArmSpec::Mnist { config } => match data {
            Some(d) => train_mnist(config, &d.train, &d.test, &arm.label, seed, &mut sink).map(|o| {
                concentration = o.concentration;
                Some(o.store)
            }),
            None => Err(LabError::config("mnist_dir", "MNIST data not loaded")),
        },
        ArmSpec::Token { config } => train_token(config, &arm.label, seed, &mut sink).map(|o| Some(o.store)),
    };
    let res = res.and_then(|store| {
        if let (Some(dir), Some(store)) = (ckpt_dir, store) {
            store.save(&dir.join(format!("{}_seed{seed}", sanitize(&arm.label))))?;
        }
        Ok(())
    });
    let (status, error) = match res {
        Ok(()) => (Status::Completed, None),
        Err(e) => {
            log::error!("{} seed {seed} failed: {e}", arm.label);
            (Status::Failed, Some(e.to_string()))
        }
    };
    let record = RunRecord {
        arm: arm.label.clone(),
        seed,
        status,
        error,
        episodes: rows.last().map(|r| r.episode),
        seconds: Some(start.elapsed().as_secs_f64()),
    };
    log::info!("{} seed {seed}: {:?} in {:.1}s", arm.label, record.status, record.seconds.unwrap_or(0.0));
    TaskOutput { rows, concentration, record }
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn map_tasks<F>(n: usize, jobs: usize, f: F) -> Vec<TaskOutput>
where
    F: Fn(usize) -> TaskOutput + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    let _ = jobs;
    (0..n).map(f).collect()
}

/// Executes a plan into `out`, writing manifest.json (before and after),
/// one part file per run, the merged metrics.csv and summary.json, and
/// concentration.csv for MNIST runs that reached the study step.
pub fn run_plan(plan: &Plan, out: &Path, opts: &RunOptions) -> Result<RunReport> {
    let start = Instant::now();
    fs::create_dir_all(out)?;
    let parts_dir = out.join("parts");
    fs::create_dir_all(&parts_dir)?;
    let ckpt_dir = opts.checkpoints.then(|| out.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        fs::create_dir_all(d)?;
    }
    let tasks: Vec<(usize, u64)> =
        (0..plan.arms.len()).flat_map(|a| plan.seeds.iter().map(move |&s| (a, s))).collect();
    let mut manifest = Manifest {
        experiment: plan.experiment,
        scale: plan.scale,
        version: env!("CARGO_PKG_VERSION").to_string(),
        platform: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
        parallel_feature: cfg!(feature = "parallel"),
        jobs: opts.jobs.max(1),
        started_unix: unix_now(),
        finished_unix: None,
        wall_clock_seconds: None,
        status: Status::Running,
        conventions: conventions(),
        plan: plan.clone(),
        runs: tasks
            .iter()
            .map(|&(a, s)| RunRecord {
                arm: plan.arms[a].label.clone(),
                seed: s,
                status: Status::Pending,
                error: None,
                episodes: None,
                seconds: None,
            })
            .collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    let data = if plan.arms.iter().any(|a| matches!(a.spec, ArmSpec::Mnist { .. })) {
        let dir = resolve_mnist_dir(plan.mnist_dir.as_deref()).ok_or_else(|| {
            LabError::config("mnist_dir", "MNIST data not found; pass --mnist-dir or set TPO_MNIST_DIR")
        })?;
        Some(Arc::new(Datasets { train: load_mnist(&dir, MnistSplit::Train)?, test: load_mnist(&dir, MnistSplit::Test)? }))
    } else {
        None
    };

    let outputs = map_tasks(tasks.len(), opts.jobs, |i| {
        let (a, seed) = tasks[i];
        let o = run_task(&plan.arms[a], seed, data.as_deref(), ckpt_dir.as_deref());
        let part = parts_dir.join(format!("{a:04}_{seed}.csv"));
        if let Err(e) = fs::File::create(&part).map_err(LabError::from).and_then(|f| write_rows(f, &o.rows, true)) {
            log::error!("writing {}: {e}", part.display());
        }
        o
    });

    let mut rows = Vec::new();
    let mut conc = Vec::new();
    for (i, o) in outputs.into_iter().enumerate() {
        let (a, seed) = tasks[i];
        let part = parts_dir.join(format!("{a:04}_{seed}.csv"));
        rows.extend(read_rows(fs::File::open(&part)?)?);
        if let Some(bins) = o.concentration {
            conc.extend(bins.into_iter().map(|b| (seed, plan.arms[a].label.clone(), b)));
        }
        manifest.runs[i] = o.record;
    }
    write_rows(fs::File::create(out.join("metrics.csv"))?, &rows, true)?;
    fs::remove_dir_all(&parts_dir)?;
    if !conc.is_empty() {
        write_concentration_csv(fs::File::create(out.join("concentration.csv"))?, &conc)?;
    }

    let windows: BTreeMap<String, usize> = plan.arms.iter().map(|a| (a.label.clone(), a.final_window())).collect();
    let summary = Summary { experiment: plan.experiment, threshold: plan.threshold, arms: summarize_rows(&rows, &windows, plan.threshold) };
    write_json(&out.join("summary.json"), &summary)?;

    let failed: Vec<String> = manifest
        .runs
        .iter()
        .filter(|r| r.status == Status::Failed)
        .map(|r| format!("{} seed {}: {}", r.arm, r.seed, r.error.clone().unwrap_or_default()))
        .collect();
    manifest.status = if failed.is_empty() { Status::Completed } else { Status::Failed };
    manifest.finished_unix = Some(unix_now());
    manifest.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
    write_json(&out.join("manifest.json"), &manifest)?;
    if !failed.is_empty() {
        return Err(LabError::InvalidInput(format!("{} run(s) failed: {}", failed.len(), failed.join("; "))));
    }
    Ok(RunReport { dir: out.to_path_buf(), summary, rows, manifest })
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves_at_both_scales() {
        for e in ExperimentId::ALL {
            for s in [Scale::Paper, Scale::Ci] {
                let p = resolve(e, s, Overrides::default()).unwrap_or_else(|err| panic!("{e:?} {s:?}: {err}"));
                assert!(!p.arms.is_empty() && !p.seeds.is_empty());
            }
        }
    }

    #[test]
    fn ids_round_trip() {
        for e in ExperimentId::ALL {
            assert_eq!(e.name().parse::<ExperimentId>().unwrap(), e);
        }
        assert!(matches!("nope".parse::<ExperimentId>(), Err(LabError::Config { .. })));
    }

    #[test]
    fn sweep_override_collapses_to_one_value() {
        let ov = Overrides { horizon: Some(8), ..Overrides::default() };
        let p = resolve(ExperimentId::Terminal, Scale::Paper, ov).unwrap();
        assert!(p.arms.iter().all(|a| a.label.starts_with("H=8:")));
    }

    #[test]
    fn dg_epochs_override_needs_the_flag() {
        let ov = Overrides { epochs: Some(4), ..Overrides::default() };
        assert!(matches!(resolve(ExperimentId::TokenReversal, Scale::Ci, ov.clone()), Err(LabError::Config { .. })));
        let ov = Overrides { allow_dg_multiepoch: Some(true), ..ov };
        resolve(ExperimentId::TokenReversal, Scale::Ci, ov).unwrap();
    }

    #[test]
    fn unknown_override_fields_are_rejected() {
        let r: std::result::Result<Overrides, _> = serde_json::from_str(r#"{"epochz": 3}"#);
        assert!(r.is_err());
        let o: Overrides = serde_json::from_str(r#"{"H": 9, "methods": ["TPO", "GRPO_noKL"]}"#).unwrap();
        assert_eq!(o.horizon, Some(9));
    }

    #[test]
    fn flags_win_over_file() {
        let file = Overrides { k: Some(4), lr: Some(0.1), ..Overrides::default() };
        let flags = Overrides { k: Some(16), ..Overrides::default() };
        let m = file.layered(flags);
        assert_eq!((m.k, m.lr), (Some(16), Some(0.1)));
    }

    #[test]
    fn tiny_run_writes_outputs_and_is_deterministic() {
        let ov = Overrides { steps: Some(5), seed_count: Some(2), ..Overrides::default() };
        let plan = resolve(ExperimentId::TabularSingle, Scale::Ci, ov).unwrap();
        let d = tempfile::tempdir().unwrap();
        let r1 = run_plan(&plan, &d.path().join("a"), &RunOptions { jobs: 2, checkpoints: false }).unwrap();
        let r2 = run_plan(&plan, &d.path().join("b"), &RunOptions { jobs: 1, checkpoints: false }).unwrap();
        let m1 = fs::read(r1.dir.join("metrics.csv")).unwrap();
        assert_eq!(m1, fs::read(r2.dir.join("metrics.csv")).unwrap());
        assert_eq!(r1.rows.len(), 4 * 2 * 6);
        let man = load_manifest(&r1.dir).unwrap();
        assert_eq!(man.status, Status::Completed);
        assert!(man.runs.iter().all(|r| r.status == Status::Completed));
        assert!(!r1.dir.join("parts").exists());
        assert_eq!(r1.summary.arms.len(), 4);
    }
}
