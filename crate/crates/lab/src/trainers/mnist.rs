//! One-step contextual bandit on MNIST with a two-layer MLP.
//!
//! Each training example is a context; the policy samples a single class
//! and is rewarded 1 when it matches the label. Methods differ only in the
//! per-example gradient they place on the logits.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tpo_core::exec::stream_seed;
use tpo_core::mnist_updates::{beta_dg_sym, beta_tpo_sym, delta_p_y, expected_mnist_updates_with_eta, self_agreement_baseline};
use tpo_core::{dg_gate_weight, grpo_loss, standardize, tpo_target, tpo_target_no_anchor, KlEstimator};
use tpo_nn::mlp::Mlp;
use tpo_nn::optim::{AdamConfig, MuonConfig, Optimizer, OptimizerKind};
use tpo_nn::{Graph, ParamStore, Tensor};

use crate::config::{Method, MnistTrainConfig};
use crate::diagnostics::{concentration_bins, ConcentrationBin, ConcentrationSample};
use crate::envs::{mnist_bandit_reward, MnistDataset, CLASSES, PIXELS};
use crate::error::{LabError, Result};
use crate::metrics::MetricsRow;

pub struct MnistTrainer {
    pub cfg: MnistTrainConfig,
    pub model: Mlp,
    pub store: ParamStore,
    opt: Optimizer,
}

/// Sampled minibatch with the snapshot policy.
#[derive(Debug, Clone)]
pub struct MnistBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub logp_old: Vec<Vec<f64>>,
}

fn sample(probs: impl Iterator<Item = f64>, rng: &mut impl Rng) -> usize {
    let mut r = rng.random::<f64>();
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        r -= p;
        last = i;
        if r < 0.0 {
            return i;
        }
    }
    last
}

fn dir(pi: &[f64], a: usize) -> impl Iterator<Item = f64> + '_ {
    pi.iter().enumerate().map(move |(i, p)| if i == a { 1.0 - p } else { -p })
}

impl MnistTrainer {
    pub fn new(cfg: MnistTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0));
        let mut store = ParamStore::new();
        let model = Mlp::new(&mut store, PIXELS, cfg.hidden, CLASSES, &mut rng);
        let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
        let opt = Optimizer::new(OptimizerKind::Adam, &store, MuonConfig::default(), adam)?;
        Ok(Self { cfg, model, store, opt })
    }

    fn inputs(data: &MnistDataset, idx: &[usize]) -> Tensor {
        let mut x = Vec::with_capacity(idx.len() * PIXELS);
        for &i in idx {
            x.extend_from_slice(data.image(i));
        }
        Tensor::matrix(idx.len(), PIXELS, x)
    }

    fn log_probs(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let p = self.model.predict(&self.store, x);
        p.data().chunks(CLASSES).map(|r| r.iter().map(|v| v.ln()).collect()).collect()
    }

    pub fn collect(&self, data: &MnistDataset, rng: &mut impl Rng) -> MnistBatch {
        let idx: Vec<usize> = (0..self.cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
        let x = Self::inputs(data, &idx);
        let logp_old = self.log_probs(&x);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i] as usize).collect();
        let actions: Vec<usize> = logp_old.iter().map(|lp| sample(lp.iter().map(|l| l.exp()), rng)).collect();
        let rewards = actions.iter().zip(&labels).map(|(&a, &y)| mnist_bandit_reward(a, y)).collect();
        MnistBatch { x, labels, actions, rewards, logp_old }
    }

    /// Gradient of the method's loss with respect to the `B × classes`
    /// logits at the current policy.
    pub fn logit_coefficients(&self, batch: &MnistBatch, logp_cur: &[Vec<f64>]) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        let n = batch.actions.len();
        let inv = 1.0 / n as f64;
        let mut c = vec![0.0; n * CLASSES];
        if cfg.method.is_grpo() {
            let rewards = &batch.rewards;
            let zero_var = rewards.iter().all(|r| *r == rewards[0]);
            if cfg.method == Method::GrpoZvMasked && zero_var {
                return Ok(c);
            }
            let adv = standardize(rewards)?.into_vec();
            let cur: Vec<f64> = (0..n).map(|i| logp_cur[i][batch.actions[i]]).collect();
            let old: Vec<f64> = (0..n).map(|i| batch.logp_old[i][batch.actions[i]]).collect();
            let beta = if cfg.method == Method::GrpoNoKl { 0.0 } else { 0.04 };
            let out = grpo_loss(&cur, &old, &adv, 0.2, beta, KlEstimator::K3);
            for i in 0..n {
                let pi: Vec<f64> = logp_cur[i].iter().map(|l| l.exp()).collect();
                for (j, d) in dir(&pi, batch.actions[i]).enumerate() {
                    c[i * CLASSES + j] = out.grad[i] * d;
                }
            }
            return Ok(c);
        }
        for i in 0..n {
            let a = batch.actions[i];
            let pi_old: Vec<f64> = batch.logp_old[i].iter().map(|l| l.exp()).collect();
            let pi: Vec<f64> = logp_cur[i].iter().map(|l| l.exp()).collect();
            let adv = batch.rewards[i] - self_agreement_baseline(&pi_old);
            let row = &mut c[i * CLASSES..(i + 1) * CLASSES];
            match cfg.method {
                Method::Pg => row.iter_mut().zip(dir(&pi, a)).for_each(|(r, d)| *r = -adv * d * inv),
                Method::Dg => {
                    let w = dg_gate_weight(adv, logp_cur[i][a], cfg.eta);
                    row.iter_mut().zip(dir(&pi, a)).for_each(|(r, d)| *r = -w * d * inv);
                }
                Method::Tpo | Method::TpoNoAnchor | Method::GroupPg => {
                    let mut s = [0.0; CLASSES];
                    s[a] = adv;
                    let u = standardize(&s)?;
                    if cfg.method == Method::GroupPg {
                        let ua = u.as_slice()[a];
                        row.iter_mut().zip(dir(&pi, a)).for_each(|(r, d)| *r = -ua * d * inv);
                    } else {
                        let q = match cfg.method {
                            Method::Tpo => tpo_target(&batch.logp_old[i], &u, cfg.eta)?,
                            _ => tpo_target_no_anchor(&u, cfg.eta)?,
                        };
                        for j in 0..CLASSES {
                            row[j] = (pi[j] - q.as_slice()[j]) * inv;
                        }
                    }
                }
                m => return Err(LabError::config("method", format!("{} is not defined for MNIST", m.name()))),
            }
        }
        Ok(c)
    }

    /// Runs the configured epochs on one batch; returns the first-epoch
    /// gradient norm.
    pub fn train_batch(&mut self, batch: &MnistBatch) -> Result<f64> {
        let mut first = 0.0;
        for e in 0..self.cfg.epochs {
            let mut g = Graph::new();
            let x = g.input(batch.x.clone());
            let logits = self.model.forward(&mut g, &self.store, x);
            let lp = g.log_softmax(logits);
            let logp: Vec<Vec<f64>> = g.value(lp).data().chunks(CLASSES).map(<[f64]>::to_vec).collect();
            let coef = self.logit_coefficients(batch, &logp)?;
            let c = g.input(Tensor::matrix(batch.actions.len(), CLASSES, coef));
            let prod = g.mul(logits, c);
            let total = g.sum(prod);
            let grads = g.backward(total).params(&g, &self.store);
            if e == 0 {
                first = grads.global_norm();
            }
            self.opt.step(&mut self.store, &grads);
        }
        Ok(first)
    }

    /// Argmax error on `data`, evaluated in chunks.
    pub fn test_error(&self, data: &MnistDataset) -> f64 {
        let mut wrong = 0usize;
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(1000) {
            let p = self.model.predict(&self.store, &Self::inputs(data, chunk));
            for (row, &i) in p.data().chunks(CLASSES).zip(chunk) {
                let pred = row.iter().enumerate().fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
                wrong += (pred != data.labels[i] as usize) as usize;
            }
        }
        wrong as f64 / data.len().max(1) as f64
    }

    /// Expected first-order `Δπ_y` surplus per method over the misclassified
    /// examples of `data`, binned by how concentrated the wrong-class mass is.
    pub fn concentration_study(&self, data: &MnistDataset, bins: usize) -> Result<Vec<ConcentrationBin>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut samples = Vec::with_capacity(data.len());
        let mut raw = Vec::with_capacity(data.len());
        for chunk in idx.chunks(1000) {
            let p = self.model.predict(&self.store, &Self::inputs(data, chunk));
            for (row, &i) in p.data().chunks(CLASSES).zip(chunk) {
                // floor keeps the expected updates finite for saturated rows
                let mut pi: Vec<f64> = row.iter().map(|v| v.max(1e-12)).collect();
                let z: f64 = pi.iter().sum();
                pi.iter_mut().for_each(|v| *v /= z);
                raw.push((pi, data.labels[i] as usize));
            }
        }
        let mean_py = raw.iter().map(|(pi, y)| pi[*y]).sum::<f64>() / raw.len().max(1) as f64;
        let sigma_b = (mean_py * (1.0 - mean_py)).sqrt().max(1e-12);
        for (pi, y) in raw {
            let pred = pi.iter().enumerate().fold(0, |b, (j, v)| if *v > pi[b] { j } else { b });
            if pred == y {
                continue;
            }
            let u = expected_mnist_updates_with_eta(&pi, y, self.cfg.eta)?;
            let py = pi[y];
            let v: Vec<f64> = dir(&pi, y).collect();
            let one_vs_rest = delta_p_y(&pi, y, &v);
            let wrong_max = pi.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| *v).fold(0.0, f64::max);
            let (b_tpo, b_dg) = (beta_tpo_sym(py, CLASSES, self.cfg.eta), beta_dg_sym(py, CLASSES, self.cfg.eta));
            let mut gain = BTreeMap::new();
            gain.insert("PG".to_string(), delta_p_y(&pi, y, &u.pg) - py * one_vs_rest);
            gain.insert("GRPO".to_string(), delta_p_y(&pi, y, &u.grpo(sigma_b)) - py / sigma_b * one_vs_rest);
            gain.insert("DG".to_string(), delta_p_y(&pi, y, &u.dg) - b_dg * one_vs_rest);
            gain.insert("TPO".to_string(), delta_p_y(&pi, y, &u.tpo) - b_tpo * one_vs_rest);
            samples.push(ConcentrationSample {
                concentration: wrong_max / (1.0 - py),
                p_correct: py,
                delta_gain: gain,
                beta_tpo_sym: b_tpo,
                beta_dg_sym: b_dg,
            });
        }
        Ok(concentration_bins(&samples, bins))
    }
}

pub struct MnistRunOutcome {
    pub store: ParamStore,
    pub final_test_error: f64,
    pub concentration: Option<Vec<ConcentrationBin>>,
}

/// Emits one row per evaluation: `error` is the argmax test error; the
/// sampled training error since the previous evaluation goes in `extra`.
pub fn train_mnist(
    cfg: &MnistTrainConfig,
    train: &MnistDataset,
    test: &MnistDataset,
    label: &str,
    seed: u64,
    sink: &mut dyn FnMut(MetricsRow),
) -> Result<MnistRunOutcome> {
    let mut t = MnistTrainer::new(cfg.clone(), seed)?;
    let mut concentration = None;
    let (mut reward_sum, mut norm_sum, mut count) = (0.0, 0.0, 0usize);
    let mut last = t.test_error(test);
    for step in 1..=cfg.steps as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, step));
        let batch = t.collect(train, &mut rng);
        reward_sum += batch.rewards.iter().sum::<f64>() / batch.rewards.len() as f64;
        norm_sum += t.train_batch(&batch)?;
        count += 1;
        if cfg.concentration_step == Some(step as usize) {
            concentration = Some(t.concentration_study(test, 5)?);
        }
        if step % cfg.eval_every as u64 == 0 || step == cfg.steps as u64 {
            last = t.test_error(test);
            let mut extra: BTreeMap<String, Value> = BTreeMap::new();
            extra.insert("train_error".into(), (1.0 - reward_sum / count as f64).into());
            extra.insert("test_error".into(), last.into());
            sink(MetricsRow {
                step: step * cfg.epochs as u64,
                episode: step,
                seed,
                method: label.to_string(),
                error: last,
                grad_norm: Some(norm_sum / count as f64),
                all_fail_frac: None,
                extra,
            });
            (reward_sum, norm_sum, count) = (0.0, 0.0, 0);
            if cfg.stop_below.is_some_and(|s| last <= s) {
                break;
            }
        }
    }
    Ok(MnistRunOutcome { store: t.store, final_test_error: last, concentration })
}
