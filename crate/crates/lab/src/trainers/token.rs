//! Transformer policies on the token tasks.
//!
//! Every method is expressed as a loss whose gradient with respect to the
//! picked token log-probabilities is computed on the host from the core
//! kernels; the graph then only has to carry `Σ coef · log π(token | state)`
//! (plus a value term for PPO) back to the parameters.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tpo_core::exec::stream_seed;
use tpo_core::{
    dg_gate_weight, grpo_advantages, grpo_loss, standardize, tpo_loss_and_logit_grad, tpo_target_no_anchor,
    ScoredGroup, TargetDistribution,
};
use tpo_nn::optim::{AdamConfig, MuonConfig, Optimizer, OptimizerKind};
use tpo_nn::transformer::{Decoder, Transformer, TransformerConfig};
use tpo_nn::{Graph, ParamGrads, ParamStore, Tensor, TokenForest};

use crate::config::{Grouping, Method, TokenCredit, TokenTrainConfig};
use crate::envs::{score_rollout, score_token_candidate, token_target, RewardKind};
use crate::error::Result;
use crate::metrics::MetricsRow;

/// Scored units of one episode over a shared prefix forest.
///
/// A unit is a candidate (grouped methods) or a behavior token/rollout
/// (single-sample methods); its log-probability is the sum of its picks.
/// Grouped units come in consecutive blocks of `group_size`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub forest: TokenForest,
    pub picks: Vec<(usize, usize)>,
    pub unit_picks: Vec<Range<usize>>,
    pub scores: Vec<f64>,
    /// Baseline slot for single-sample methods (position for token tasks).
    pub slots: Vec<usize>,
    /// Node whose value estimate serves as the unit's baseline under PPO.
    pub value_nodes: Vec<usize>,
    pub group_size: usize,
    pub error: f64,
    pub mean_reward: f64,
    pub rollouts: usize,
    pub prompts: usize,
}

impl Batch {
    pub fn units(&self) -> usize {
        self.scores.len()
    }

    pub fn groups(&self) -> usize {
        self.units() / self.group_size
    }

    fn group(&self, g: usize) -> Range<usize> {
        g * self.group_size..(g + 1) * self.group_size
    }
}

/// Quantities fixed from the rollout snapshot for all epochs of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub pick_logp_old: Vec<f64>,
    pub unit_logp_old: Vec<f64>,
    /// Per-unit signal: standardized score, advantage, or score − baseline.
    pub weights: Vec<f64>,
    /// Flattened per-unit TPO targets.
    pub targets: Vec<f64>,
    pub zero_variance: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct EpochResult {
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Grouped-signal diagnostics of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupSignalStats {
    pub all_fail_fraction: f64,
    pub any_success_fraction: f64,
    pub mean_q_success: Option<f64>,
    pub mean_q_fail: Option<f64>,
    pub mean_abs_a_success: Option<f64>,
    pub mean_abs_a_fail: Option<f64>,
}

pub struct TokenTrainer {
    pub cfg: TokenTrainConfig,
    pub model: Transformer,
    pub store: ParamStore,
    opt: Optimizer,
}

fn sample_index(logits: &[f64], rng: &mut impl Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let mut r = rng.random::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in w.iter().enumerate() {
        r -= wi;
        if r < 0.0 {
            return i;
        }
    }
    w.len() - 1
}

/// Incremental decoder that reuses nodes for repeated `(parent, token)`.
struct SharedDecoder<'a> {
    dec: Decoder<'a>,
    nodes: HashMap<(Option<usize>, usize), usize>,
}

impl<'a> SharedDecoder<'a> {
    fn new(dec: Decoder<'a>) -> Self {
        Self { dec, nodes: HashMap::new() }
    }

    fn extend(&mut self, items: &[(Option<usize>, usize)]) -> Result<Vec<usize>> {
        let mut fresh: Vec<(Option<usize>, usize)> = Vec::new();
        for it in items {
            if !self.nodes.contains_key(it) && !fresh.contains(it) {
                fresh.push(*it);
            }
        }
        let ids = self.dec.extend(&fresh)?;
        for (it, id) in fresh.into_iter().zip(ids) {
            self.nodes.insert(it, id);
        }
        Ok(items.iter().map(|it| self.nodes[it]).collect())
    }

    fn logits(&self, node: usize) -> &[f64] {
        self.dec.logits(node)
    }

    /// Feeds prompts plus separator; returns the separator nodes.
    fn prompts(&mut self, prompts: &[Vec<usize>], sep: usize) -> Result<Vec<usize>> {
        let mut cur: Vec<Option<usize>> = vec![None; prompts.len()];
        let h = prompts.first().map_or(0, Vec::len);
        for d in 0..=h {
            let items: Vec<_> =
                prompts.iter().zip(&cur).map(|(p, &c)| (c, if d < h { p[d] } else { sep })).collect();
            cur = self.extend(&items)?.into_iter().map(Some).collect();
        }
        Ok(cur.into_iter().map(Option::unwrap).collect())
    }
}

impl TokenTrainer {
    pub fn new(cfg: TokenTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0));
        let mut store = ParamStore::new();
        let m = &cfg.model;
        let tcfg = TransformerConfig {
            d_model: m.d_model,
            heads: m.heads,
            layers: m.layers,
            mlp_ratio: m.mlp_ratio,
            init_std: m.init_std,
            value_head: cfg.method == Method::Ppo,
            ..TransformerConfig::new(cfg.task.vocab, 2 * cfg.task.horizon)
        };
        let model = Transformer::new(tcfg, &mut store, &mut rng)?;
        let (_, lr_scale) = cfg.effective_batch_and_lr_scale();
        let muon = MuonConfig { lr: cfg.lr * lr_scale, ..MuonConfig::default() };
        let adam = AdamConfig { lr: cfg.lr * lr_scale, ..AdamConfig::default() };
        let opt = Optimizer::new(OptimizerKind::MuonAdamw, &store, muon, adam)?;
        Ok(Self { cfg, model, store, opt })
    }

    fn single_credit(&self) -> TokenCredit {
        match self.cfg.method {
            Method::Ppo => self.cfg.ppo_credit,
            _ => self.cfg.pg_credit,
        }
    }

    pub fn collect(&self, rng: &mut impl Rng) -> Result<Batch> {
        match self.cfg.grouping {
            Grouping::Token => self.collect_token(rng),
            Grouping::Sequence => self.collect_sequence(rng),
        }
    }

    fn prompts(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let (n, _) = self.cfg.effective_batch_and_lr_scale();
        (0..n).map(|_| self.cfg.task.sample_prompt(rng)).collect()
    }

    /// One behavior trajectory per prompt; grouped methods also draw `K`
    /// i.i.d. candidates at each of its prefix states.
    fn collect_token(&self, rng: &mut impl Rng) -> Result<Batch> {
        let task = self.cfg.task;
        let h = task.horizon;
        let grouped = self.cfg.method.is_grouped();
        let k = if grouped { self.cfg.k } else { 1 };
        let prompts = self.prompts(rng);
        let n = prompts.len();
        let mut dec = SharedDecoder::new(self.model.decoder(&self.store));
        let mut cur = dec.prompts(&prompts, task.vocab)?;
        let mut behavior = vec![Vec::with_capacity(h); n];
        let mut cands = vec![Vec::with_capacity(h); n];
        for t in 0..h {
            for b in 0..n {
                let logits = dec.logits(cur[b]);
                behavior[b].push(sample_index(logits, rng));
                if grouped {
                    cands[b].push((0..k).map(|_| sample_index(logits, rng)).collect::<Vec<_>>());
                }
            }
            if t + 1 < h {
                let items: Vec<_> = (0..n).map(|b| (Some(cur[b]), behavior[b][t])).collect();
                cur = dec.extend(&items)?;
            }
        }

        let mut forest = TokenForest::new();
        let mut batch = empty_batch(if grouped { k } else { 1 }, n);
        let mut err = 0.0;
        let mut reward = 0.0;
        for b in 0..n {
            let target = token_target(&task, &prompts[b]);
            let rollout = score_rollout(&task, &prompts[b], &behavior[b]);
            err += rollout.token_error();
            reward += rollout.reward;
            let p = forest.extend(None, &prompts[b]);
            let sep = forest.child(p.last().copied(), task.vocab);
            let mut states = vec![sep];
            states.extend(forest.extend(Some(sep), &behavior[b][..h - 1]));
            if grouped {
                for t in 0..h {
                    for &tok in &cands[b][t] {
                        let s = score_token_candidate(&task, &rollout.per_position_correct, t, tok, &target)?;
                        batch.push_unit(&[(states[t], tok)], s, t, states[t]);
                    }
                }
                continue;
            }
            let mut scores = (0..h)
                .map(|t| score_token_candidate(&task, &rollout.per_position_correct, t, behavior[b][t], &target))
                .collect::<Result<Vec<f64>>>()?;
            if self.single_credit() == TokenCredit::ReturnToGo {
                for t in (0..h - 1).rev() {
                    scores[t] += scores[t + 1];
                }
            }
            for t in 0..h {
                batch.push_unit(&[(states[t], behavior[b][t])], scores[t], t, states[t]);
            }
        }
        batch.forest = forest;
        batch.error = err / n as f64;
        batch.mean_reward = reward / n as f64;
        batch.rollouts = n;
        Ok(batch)
    }

    /// `K` complete rollouts per prompt (one for single-sample methods).
    fn collect_sequence(&self, rng: &mut impl Rng) -> Result<Batch> {
        let task = self.cfg.task;
        let h = task.horizon;
        let k = if self.cfg.method.is_grouped() { self.cfg.k } else { 1 };
        let prompts = self.prompts(rng);
        let n = prompts.len();
        let mut dec = SharedDecoder::new(self.model.decoder(&self.store));
        let seps = dec.prompts(&prompts, task.vocab)?;
        let mut cur: Vec<usize> = seps.iter().flat_map(|&s| std::iter::repeat_n(s, k)).collect();
        let mut comps = vec![Vec::with_capacity(h); n * k];
        for t in 0..h {
            for (c, &node) in comps.iter_mut().zip(&cur) {
                c.push(sample_index(dec.logits(node), rng));
            }
            if t + 1 < h {
                let items: Vec<_> = cur.iter().zip(&comps).map(|(&node, c)| (Some(node), c[t])).collect();
                cur = dec.extend(&items)?;
            }
        }

        let mut forest = TokenForest::new();
        let mut batch = empty_batch(k, n);
        let mut err = 0.0;
        let mut reward = 0.0;
        for b in 0..n {
            let p = forest.extend(None, &prompts[b]);
            let sep = forest.child(p.last().copied(), task.vocab);
            for c in &comps[b * k..(b + 1) * k] {
                let rollout = score_rollout(&task, &prompts[b], c);
                err += match task.reward {
                    RewardKind::Terminal => (!rollout.exact()) as u8 as f64,
                    _ => rollout.token_error(),
                };
                reward += rollout.reward;
                let mut states = vec![sep];
                states.extend(forest.extend(Some(sep), &c[..h - 1]));
                let picks: Vec<(usize, usize)> = states.iter().copied().zip(c.iter().copied()).collect();
                batch.push_unit(&picks, rollout.reward, 0, sep);
            }
        }
        batch.forest = forest;
        batch.error = err / (n * k) as f64;
        batch.mean_reward = reward / (n * k) as f64;
        batch.rollouts = n * k;
        Ok(batch)
    }

    /// Snapshot quantities from the epoch-1 log-probabilities (and value
    /// estimates for PPO).
    pub fn freeze(&self, batch: &Batch, pick_logp: &[f64], values: Option<&[f64]>) -> Result<Frozen> {
        let cfg = &self.cfg;
        let unit_logp = unit_sums(batch, pick_logp);
        let u_n = batch.units();
        let mut weights = vec![0.0; u_n];
        let mut targets = vec![0.0; u_n];
        let mut zero_variance = vec![false; batch.groups()];
        if cfg.method.is_grouped() {
            for g in 0..batch.groups() {
                let r = batch.group(g);
                let scores = &batch.scores[r.clone()];
                zero_variance[g] = scores.iter().all(|s| *s == scores[0]);
                if cfg.method.is_grpo() {
                    weights[r].copy_from_slice(&grpo_advantages(scores)?);
                    continue;
                }
                let lp = unit_logp[r.clone()].to_vec();
                let group = ScoredGroup::new(lp.clone(), lp, scores.to_vec(), cfg.eta)?;
                weights[r.clone()].copy_from_slice(group.u.as_slice());
                if cfg.method.is_tpo() {
                    let q = match cfg.method {
                        Method::TpoNoAnchor => tpo_target_no_anchor(&group.u, cfg.eta)?,
                        _ => group.target()?,
                    };
                    targets[r].copy_from_slice(q.as_slice());
                }
            }
        } else {
            match (cfg.method, values) {
                (Method::Ppo, Some(v)) => {
                    for i in 0..u_n {
                        weights[i] = batch.scores[i] - v[i];
                    }
                }
                _ => {
                    let slots = batch.slots.iter().max().map_or(0, |m| m + 1);
                    let mut sum = vec![0.0; slots];
                    let mut cnt = vec![0usize; slots];
                    for (s, &slot) in batch.scores.iter().zip(&batch.slots) {
                        sum[slot] += s;
                        cnt[slot] += 1;
                    }
                    for i in 0..u_n {
                        let slot = batch.slots[i];
                        weights[i] = batch.scores[i] - sum[slot] / cnt[slot] as f64;
                    }
                }
            }
        }
        Ok(Frozen { pick_logp_old: pick_logp.to_vec(), unit_logp_old: unit_logp, weights, targets, zero_variance })
    }

    /// Loss value and gradients with respect to the picked log-probabilities
    /// and (PPO) the unit value estimates.
    pub fn coefficients(
        &self,
        batch: &Batch,
        frozen: &Frozen,
        pick_logp: &[f64],
        values: Option<&[f64]>,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let cfg = &self.cfg;
        let unit_logp = unit_sums(batch, pick_logp);
        let u_n = batch.units();
        let mut loss = 0.0;
        let mut unit_coef = vec![0.0; u_n];
        let mut pick_coef = vec![0.0; pick_logp.len()];
        let mut value_coef = vec![0.0; u_n];
        let groups = batch.groups() as f64;
        match cfg.method {
            Method::Tpo | Method::TpoNoAnchor => {
                for g in 0..batch.groups() {
                    let r = batch.group(g);
                    let group = ScoredGroup::new(
                        frozen.unit_logp_old[r.clone()].to_vec(),
                        unit_logp[r.clone()].to_vec(),
                        batch.scores[r.clone()].to_vec(),
                        cfg.eta,
                    )?;
                    let q = TargetDistribution::new(frozen.targets[r.clone()].to_vec())?;
                    let (l, grad) = tpo_loss_and_logit_grad(&group, &q);
                    loss += l / groups;
                    for (c, gi) in unit_coef[r].iter_mut().zip(grad) {
                        *c = gi / groups;
                    }
                }
            }
            Method::Grpo | Method::GrpoNoKl | Method::GrpoZvMasked => {
                for g in 0..batch.groups() {
                    if cfg.method == Method::GrpoZvMasked && frozen.zero_variance[g] {
                        continue;
                    }
                    let r = batch.group(g);
                    let out = grpo_loss(
                        &unit_logp[r.clone()],
                        &frozen.unit_logp_old[r.clone()],
                        &frozen.weights[r.clone()],
                        cfg.clip_eps,
                        cfg.effective_kl_beta(),
                        cfg.kl_estimator,
                    );
                    loss += out.value / groups;
                    for (c, gi) in unit_coef[r].iter_mut().zip(out.grad) {
                        *c = gi / groups;
                    }
                }
            }
            Method::GroupPg => {
                for i in 0..u_n {
                    unit_coef[i] = -frozen.weights[i] / groups;
                    loss -= frozen.weights[i] * unit_logp[i] / groups;
                }
            }
            Method::Pg | Method::Dg => {
                let scale = 1.0 / u_n as f64;
                for i in 0..u_n {
                    let w = match cfg.method {
                        Method::Dg => dg_gate_weight(frozen.weights[i], unit_logp[i], cfg.eta),
                        _ => frozen.weights[i],
                    };
                    unit_coef[i] = -w * scale;
                    loss -= w * unit_logp[i] * scale;
                }
            }
            Method::Ppo => {
                let picks = pick_logp.len() as f64;
                for (u, r) in batch.unit_picks.iter().enumerate() {
                    let a = frozen.weights[u];
                    for p in r.clone() {
                        let ratio = (pick_logp[p] - frozen.pick_logp_old[p]).exp();
                        let unclipped = ratio * a;
                        let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a;
                        if unclipped <= clipped {
                            pick_coef[p] = -unclipped / picks;
                            loss -= unclipped / picks;
                        } else {
                            loss -= clipped / picks;
                        }
                    }
                }
                if let Some(v) = values {
                    for u in 0..u_n {
                        let d = v[u] - batch.scores[u];
                        loss += cfg.value_coef * d * d / u_n as f64;
                        value_coef[u] = cfg.value_coef * 2.0 * d / u_n as f64;
                    }
                }
            }
        }
        for (u, r) in batch.unit_picks.iter().enumerate() {
            for p in r.clone() {
                pick_coef[p] += unit_coef[u];
            }
        }
        Ok((loss, pick_coef, value_coef))
    }

    /// One forward/backward pass; freezes the snapshot on the first call.
    pub fn epoch(&self, batch: &Batch, frozen: &mut Option<Frozen>) -> Result<EpochResult> {
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &self.store, &batch.forest)?;
        let lp = g.log_softmax(out.logits);
        let picked = g.pick(lp, batch.picks.clone());
        let pick_logp = g.value(picked).data().to_vec();
        let value_var = match out.values {
            Some(v) if self.cfg.method == Method::Ppo => {
                let n = g.shape(v)[0];
                let col = g.reshape(v, &[n, 1]);
                Some(g.pick(col, batch.value_nodes.iter().map(|&i| (i, 0)).collect()))
            }
            _ => None,
        };
        let values: Option<Vec<f64>> = value_var.map(|v| g.value(v).data().to_vec());
        if frozen.is_none() {
            *frozen = Some(self.freeze(batch, &pick_logp, values.as_deref())?);
        }
        let (loss, pick_coef, value_coef) =
            self.coefficients(batch, frozen.as_ref().unwrap(), &pick_logp, values.as_deref())?;
        let c = g.input(Tensor::vector(pick_coef));
        let prod = g.mul(picked, c);
        let mut total = g.sum(prod);
        if let Some(vv) = value_var {
            let c = g.input(Tensor::vector(value_coef));
            let prod = g.mul(vv, c);
            let s = g.sum(prod);
            total = g.add(total, s);
        }
        let grads = g.backward(total).params(&g, &self.store);
        Ok(EpochResult { loss, grads })
    }

    pub fn signal_stats(&self, batch: &Batch, frozen: &Frozen) -> Option<GroupSignalStats> {
        if !self.cfg.method.is_grouped() {
            return None;
        }
        Some(group_signal_stats(batch, frozen, self.cfg.method))
    }

    /// Collects one batch and trains on it for the configured epochs.
    pub fn episode(&mut self, episode: u64, seed: u64, label: &str) -> Result<MetricsRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, episode));
        let batch = self.collect(&mut rng)?;
        let mut frozen = None;
        let mut first = None;
        for e in 0..self.cfg.epochs {
            let res = self.epoch(&batch, &mut frozen)?;
            if e == 0 {
                first = Some((res.loss, res.grads.global_norm()));
            }
            self.opt.step(&mut self.store, &res.grads);
        }
        let (loss, grad_norm) = first.unwrap();
        let frozen = frozen.unwrap();
        let mut extra: BTreeMap<String, Value> = BTreeMap::new();
        extra.insert("loss".into(), loss.into());
        extra.insert("mean_reward".into(), batch.mean_reward.into());
        extra.insert("rollouts".into(), (batch.rollouts as u64).into());
        let stats = self.signal_stats(&batch, &frozen);
        if let Some(s) = stats {
            extra.insert("any_success_frac".into(), s.any_success_fraction.into());
            for (k, v) in [
                ("mean_q_success", s.mean_q_success),
                ("mean_q_fail", s.mean_q_fail),
                ("mean_absA_success", s.mean_abs_a_success),
                ("mean_absA_fail", s.mean_abs_a_fail),
            ] {
                if let Some(v) = v {
                    extra.insert(k.into(), v.into());
                }
            }
        }
        Ok(MetricsRow {
            step: episode * self.cfg.epochs as u64,
            episode,
            seed,
            method: label.to_string(),
            error: batch.error,
            grad_norm: Some(grad_norm),
            all_fail_frac: stats.map(|s| s.all_fail_fraction),
            extra,
        })
    }
}

fn empty_batch(group_size: usize, prompts: usize) -> Batch {
    Batch {
        forest: TokenForest::new(),
        picks: Vec::new(),
        unit_picks: Vec::new(),
        scores: Vec::new(),
        slots: Vec::new(),
        value_nodes: Vec::new(),
        group_size,
        error: 0.0,
        mean_reward: 0.0,
        rollouts: 0,
        prompts,
    }
}

impl Batch {
    fn push_unit(&mut self, picks: &[(usize, usize)], score: f64, slot: usize, value_node: usize) {
        let start = self.picks.len();
        self.picks.extend_from_slice(picks);
        self.unit_picks.push(start..self.picks.len());
        self.scores.push(score);
        self.slots.push(slot);
        self.value_nodes.push(value_node);
    }
}

fn unit_sums(batch: &Batch, pick_logp: &[f64]) -> Vec<f64> {
    batch.unit_picks.iter().map(|r| pick_logp[r.clone()].iter().sum()).collect()
}

/// All-fail and any-success fractions over groups, and the per-candidate
/// weight proxy split by outcome: target mass for TPO, `|A|` otherwise.
pub fn group_signal_stats(batch: &Batch, frozen: &Frozen, method: Method) -> GroupSignalStats {
    let max = batch.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(1.0);
    let min = 0.0;
    let mut all_fail = 0usize;
    let mut any_success = 0usize;
    let (mut qs, mut qf, mut as_, mut af) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for g in 0..batch.groups() {
        let r = batch.group(g);
        let scores = &batch.scores[r.clone()];
        if scores.iter().all(|s| *s <= min) {
            all_fail += 1;
        }
        if scores.iter().any(|s| *s >= max) {
            any_success += 1;
        }
        for i in r {
            let success = batch.scores[i] >= max;
            let fail = batch.scores[i] <= min;
            if method.is_tpo() {
                if success {
                    qs.push(frozen.targets[i]);
                } else if fail {
                    qf.push(frozen.targets[i]);
                }
            } else if success {
                as_.push(frozen.weights[i].abs());
            } else if fail {
                af.push(frozen.weights[i].abs());
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let groups = batch.groups().max(1) as f64;
    GroupSignalStats {
        all_fail_fraction: all_fail as f64 / groups,
        any_success_fraction: any_success as f64 / groups,
        mean_q_success: mean(&qs),
        mean_q_fail: mean(&qf),
        mean_abs_a_success: mean(&as_),
        mean_abs_a_fail: mean(&af),
    }
}

/// Per-run result besides the metric rows.
pub struct TokenRunOutcome {
    pub store: ParamStore,
    pub episodes: u64,
    pub stopped_early: bool,
}

pub fn train_token(
    cfg: &TokenTrainConfig,
    label: &str,
    seed: u64,
    sink: &mut dyn FnMut(MetricsRow),
) -> Result<TokenRunOutcome> {
    let mut trainer = TokenTrainer::new(cfg.clone(), seed)?;
    let mut stopped_early = false;
    let mut episodes = 0;
    for ep in 1..=cfg.episodes as u64 {
        let row = trainer.episode(ep, seed, label)?;
        episodes = ep;
        let done = cfg.stop_below.is_some_and(|t| row.error <= t);
        sink(row);
        if done {
            stopped_early = ep < cfg.episodes as u64;
            break;
        }
    }
    Ok(TokenRunOutcome { store: trainer.store, episodes, stopped_early })
}

/// Standardized scores for a binary group, exposed for diagnostics tests.
pub fn z_scores(scores: &[f64]) -> Result<Vec<f64>> {
    Ok(standardize(scores)?.into_vec())
}
