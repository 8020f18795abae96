//! Muon for matrices, AdamW for everything else.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor, Trans};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: Real,
    pub b1: Real,
    pub b2: Real,
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, b1: 0.9, b2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MuonConfig {
    pub lr: Real,
    pub beta: Real,
    pub nesterov: bool,
    pub ns_steps: usize,
    pub ns_coeffs: (Real, Real, Real),
    pub eps: Real,
    pub weight_decay: Real,
}

impl Default for MuonConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta: 0.95,
            nesterov: true,
            ns_steps: 5,
            ns_coeffs: (3.4445, -4.7750, 2.0315),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay Adam over a subset of parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self { cfg, ids, v: m.clone(), m, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.b1.powi(self.t as i32);
        let bc2 = 1.0 - c.b2.powi(self.t as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id).data();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, gi), mi), vi) in store.get_mut(id).data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = c.b1 * *mi + (1.0 - c.b1) * gi;
                *vi = c.b2 * *vi + (1.0 - c.b2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *p -= c.lr * (update + c.weight_decay * *p);
            }
        }
    }
}

/// Momentum followed by Newton–Schulz orthogonalization, for rank-2
/// parameters only.
#[derive(Debug, Clone)]
pub struct Muon {
    pub cfg: MuonConfig,
    ids: Vec<ParamId>,
    mu: Vec<Tensor>,
}

impl Muon {
    pub fn new(cfg: MuonConfig, store: &ParamStore, ids: Vec<ParamId>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| store.get(id).rank() != 2) {
            return Err(NnError::InvalidConfig(format!(
                "Muon needs a matrix but {} has shape {:?}",
                store.name(bad),
                store.get(bad).shape()
            )));
        }
        let mu = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Ok(Self { cfg, ids, mu })
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        let c = &self.cfg;
        for (k, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id);
            let mu = self.mu[k].data_mut();
            for (m, gi) in mu.iter_mut().zip(g.data()) {
                *m = c.beta * *m + (1.0 - c.beta) * gi;
            }
            let dir = if c.nesterov {
                let d: Vec<Real> =
                    mu.iter().zip(g.data()).map(|(m, gi)| c.beta * m + (1.0 - c.beta) * gi).collect();
                Tensor::new(g.shape().to_vec(), d)
            } else {
                self.mu[k].clone()
            };
            let (rows, cols) = dir.dims2();
            let o = newton_schulz(&dir, c.ns_steps, c.ns_coeffs, c.eps);
            let scale = (rows as Real / cols as Real).max(1.0).sqrt();
            for (p, u) in store.get_mut(id).data_mut().iter_mut().zip(o.data()) {
                *p -= c.lr * (scale * u + c.weight_decay * *p);
            }
        }
    }
}

/// Quintic Newton–Schulz iteration toward the nearest semi-orthogonal
/// matrix. The input is scaled to unit Frobenius norm first, and wide
/// orientation is used internally.
pub fn newton_schulz(x: &Tensor, steps: usize, (a, b, c): (Real, Real, Real), eps: Real) -> Tensor {
    let (rows, cols) = x.dims2();
    let transposed = rows > cols;
    let (m, n) = if transposed { (cols, rows) } else { (rows, cols) };
    let norm = x.norm_sq().sqrt() + eps;
    let mut cur: Vec<Real> = if transposed {
        let mut t = vec![0.0; m * n];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x.data()[i * cols + j] / norm;
            }
        }
        t
    } else {
        x.data().iter().map(|v| v / norm).collect()
    };
    let mut gram = vec![0.0; m * m];
    let mut poly = vec![0.0; m * m];
    let mut next = vec![0.0; m * n];
    for _ in 0..steps {
        gemm(m, n, m, &cur, Trans::No, &cur, Trans::Yes, 0.0, &mut gram);
        // poly = b·A + c·A²
        gemm(m, m, m, &gram, Trans::No, &gram, Trans::No, 0.0, &mut poly);
        for (p, g) in poly.iter_mut().zip(&gram) {
            *p = c * *p + b * g;
        }
        next.copy_from_slice(&cur);
        gemm(m, m, n, &poly, Trans::No, &cur, Trans::No, a, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    if transposed {
        let mut t = vec![0.0; rows * cols];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = cur[i * n + j];
            }
        }
        Tensor::matrix(rows, cols, t)
    } else {
        Tensor::matrix(rows, cols, cur)
    }
}

/// How parameters are routed to optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Muon on rank-2 tensors, AdamW on the rest.
    MuonAdamw,
    /// AdamW on everything.
    Adam,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    muon: Option<Muon>,
    adam: AdamW,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore, muon: MuonConfig, adam: AdamConfig) -> Result<Self> {
        match kind {
            OptimizerKind::Adam => Ok(Self { muon: None, adam: AdamW::new(adam, store, store.ids().collect()) }),
            OptimizerKind::MuonAdamw => {
                let (mats, rest): (Vec<ParamId>, Vec<ParamId>) =
                    store.ids().partition(|&id| store.get(id).rank() == 2);
                Ok(Self { muon: Some(Muon::new(muon, store, mats)?), adam: AdamW::new(adam, store, rest) })
            }
        }
    }

    /// Multiplies both learning rates by `factor`.
    pub fn scale_lr(&mut self, factor: Real) {
        if let Some(m) = &mut self.muon {
            m.cfg.lr *= factor;
        }
        self.adam.cfg.lr *= factor;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        if let Some(m) = &mut self.muon {
            m.step(store, grads);
        }
        self.adam.step(store, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.5, -0.5, 2.0]));
        let mut opt = AdamW::new(AdamConfig::default(), &store, vec![id]);
        let grads = ParamGrads(vec![Tensor::vector(vec![3.0, -0.01, 1e-3])]);
        opt.step(&mut store, &grads);
        let want = [0.5 - 1e-3, -0.5 + 1e-3, 2.0 - 1e-3];
        for (p, w) in store.get(id).data().iter().zip(want) {
            assert!((p - w).abs() < 1e-8, "{p} vs {w}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let m = store.add("m", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = store.add("b", Tensor::vector(vec![1.0, -1.0]));
        let before = store.clone();
        let mut opt =
            Optimizer::new(OptimizerKind::MuonAdamw, &store, MuonConfig::default(), AdamConfig::default()).unwrap();
        let zeros = store.zeros_like();
        opt.step(&mut store, &zeros);
        assert_eq!(store.get(m), before.get(m));
        assert_eq!(store.get(b), before.get(b));
    }

    #[test]
    fn weight_decay_shrinks_by_factor() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -3.0]));
        let cfg = AdamConfig { weight_decay: 0.1, ..AdamConfig::default() };
        let mut opt = AdamW::new(cfg, &store, vec![id]);
        let zeros = store.zeros_like();
        opt.step(&mut store, &zeros);
        let f = 1.0 - 1e-3 * 0.1;
        assert_eq!(store.get(id).data(), &[f, -3.0 * f]);
    }

    #[test]
    fn muon_rejects_vectors() {
        let mut store = ParamStore::new();
        let id = store.add("b", Tensor::vector(vec![0.0; 4]));
        assert!(matches!(
            Muon::new(MuonConfig::default(), &store, vec![id]),
            Err(NnError::InvalidConfig(_))
        ));
    }

    #[test]
    fn orthogonal_input_is_nearly_fixed() {
        let (c, s) = (0.6, 0.8);
        let q = Tensor::matrix(2, 2, vec![c, -s, s, c]);
        // unit Frobenius scaling maps singular values to 1/sqrt(2)
        let o = newton_schulz(&q, 5, MuonConfig::default().ns_coeffs, 1e-8);
        let dot: Real = o.data().iter().zip(q.data()).map(|(a, b)| a * b).sum();
        let cos = dot / (o.norm_sq().sqrt() * q.norm_sq().sqrt());
        assert!(cos > 1.0 - 1e-9);
    }
}
