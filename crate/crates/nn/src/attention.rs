//! Multi-head attention over explicit per-query key lists.
//!
//! Query row `i` attends to the key/value rows listed in
//! `indices[offsets[i]..offsets[i + 1]]`. A causal mask over a batch of
//! sequences, or over a prefix tree of shared sequences, is just a choice of
//! lists: each node lists its ancestors and itself.

use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttendList {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl AttendList {
    pub fn queries(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn keys_of(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Storage needed for the attention probabilities of every head.
    pub fn prob_len(&self, heads: usize) -> usize {
        self.indices.len() * heads
    }
}

/// Fills `out` (`queries × d`) and `probs`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[Real],
    k: &[Real],
    v: &[Real],
    d: usize,
    heads: usize,
    list: &AttendList,
    out: &mut [Real],
    probs: &mut [Real],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as Real).sqrt();
    out.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..list.queries() {
        let keys = list.keys_of(i);
        let n = keys.len();
        let base = list.offsets[i] * heads;
        for h in 0..heads {
            let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
            let p = &mut probs[base + h * n..base + (h + 1) * n];
            let mut max = Real::NEG_INFINITY;
            for (pj, &j) in p.iter_mut().zip(keys) {
                let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                *pj = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<Real>();
                max = max.max(*pj);
            }
            let mut z = 0.0;
            for pj in p.iter_mut() {
                *pj = (*pj - max).exp();
                z += *pj;
            }
            let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for (pj, &j) in p.iter_mut().zip(keys) {
                *pj /= z;
                let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, x) in oi.iter_mut().zip(vj) {
                    *o += *pj * x;
                }
            }
        }
    }
}

/// Accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[Real],
    k: &[Real],
    v: &[Real],
    d: usize,
    heads: usize,
    list: &AttendList,
    probs: &[Real],
    dout: &[Real],
    dq: &mut [Real],
    dk: &mut [Real],
    dv: &mut [Real],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as Real).sqrt();
    let mut ds = Vec::new();
    for i in 0..list.queries() {
        let keys = list.keys_of(i);
        let n = keys.len();
        let base = list.offsets[i] * heads;
        for h in 0..heads {
            let lo = h * dh;
            let p = &probs[base + h * n..base + (h + 1) * n];
            let go = &dout[i * d + lo..i * d + lo + dh];
            ds.clear();
            let mut dot = 0.0;
            for (&pj, &j) in p.iter().zip(keys) {
                let vj = &v[j * d + lo..j * d + lo + dh];
                let dp: Real = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                ds.push(dp);
                dot += pj * dp;
                for (g, x) in dv[j * d + lo..j * d + lo + dh].iter_mut().zip(go) {
                    *g += pj * x;
                }
            }
            for ((s, &pj), &j) in ds.iter_mut().zip(p).zip(keys) {
                *s = pj * (*s - dot) * scale;
                for t in 0..dh {
                    dq[i * d + lo + t] += *s * k[j * d + lo + t];
                    dk[j * d + lo + t] += *s * q[i * d + lo + t];
                }
            }
        }
    }
}
