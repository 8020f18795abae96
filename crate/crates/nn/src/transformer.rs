//! Pre-norm causal transformer over a [`TokenForest`].
//!
//! Token ids `0..vocab` are the shared prompt/completion alphabet and id
//! `vocab` is the separator. Positions are learned and indexed by tree
//! depth. The output head is zero-initialized, so a fresh model is uniform
//! over the vocabulary at every position.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttendList};
use crate::error::{NnError, Result};
use crate::forest::TokenForest;
use crate::graph::{Graph, Var};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor, Trans};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub value_head: bool,
    pub init_std: Real,
    pub ln_eps: Real,
}

impl TransformerConfig {
    pub fn new(vocab: usize, max_len: usize) -> Self {
        Self {
            vocab,
            d_model: 64,
            heads: 4,
            layers: 2,
            mlp_ratio: 4,
            max_len,
            value_head: false,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(NnError::InvalidConfig(format!("vocab must be at least 2, got {}", self.vocab)));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(NnError::InvalidConfig(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 || self.max_len == 0 {
            return Err(NnError::InvalidConfig("layers, mlp_ratio and max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn separator(&self) -> usize {
        self.vocab
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    cfg: TransformerConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    value: Option<(ParamId, ParamId)>,
}

pub struct TransformerOutput {
    /// `nodes × vocab` next-token logits.
    pub logits: Var,
    /// Per-node scalar value estimates when the value head is enabled.
    pub values: Option<Var>,
}

impl Transformer {
    pub fn new(cfg: TransformerConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let std = cfg.init_std;
        let mut normal = |store: &mut ParamStore, name: String, shape: &[usize]| {
            store.add(name, truncated_normal(shape, std, rng))
        };
        let tok_emb = normal(store, "tok_emb".into(), &[cfg.vocab + 1, d]);
        let pos_emb = normal(store, "pos_emb".into(), &[cfg.max_len, d]);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let ln1_g = store.add(format!("block{l}.ln1.g"), Tensor::vector(vec![1.0; d]));
            let ln1_b = store.add(format!("block{l}.ln1.b"), Tensor::zeros(&[d]));
            let wq = normal(store, format!("block{l}.attn.wq"), &[d, d]);
            let wk = normal(store, format!("block{l}.attn.wk"), &[d, d]);
            let wv = normal(store, format!("block{l}.attn.wv"), &[d, d]);
            let wo = normal(store, format!("block{l}.attn.wo"), &[d, d]);
            let ln2_g = store.add(format!("block{l}.ln2.g"), Tensor::vector(vec![1.0; d]));
            let ln2_b = store.add(format!("block{l}.ln2.b"), Tensor::zeros(&[d]));
            let w1 = normal(store, format!("block{l}.mlp.w1"), &[d, hidden]);
            let b1 = store.add(format!("block{l}.mlp.b1"), Tensor::zeros(&[hidden]));
            let w2 = normal(store, format!("block{l}.mlp.w2"), &[hidden, d]);
            let b2 = store.add(format!("block{l}.mlp.b2"), Tensor::zeros(&[d]));
            blocks.push(Block { ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2 });
        }
        let lnf_g = store.add("lnf.g", Tensor::vector(vec![1.0; d]));
        let lnf_b = store.add("lnf.b", Tensor::zeros(&[d]));
        let head_w = store.add("head.w", Tensor::zeros(&[d, cfg.vocab]));
        let head_b = store.add("head.b", Tensor::zeros(&[cfg.vocab]));
        let value = cfg.value_head.then(|| {
            (store.add("value.w", Tensor::zeros(&[d, 1])), store.add("value.b", Tensor::zeros(&[1])))
        });
        Ok(Self { cfg, tok_emb, pos_emb, blocks, lnf_g, lnf_b, head_w, head_b, value })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    fn check_forest(&self, forest: &TokenForest) -> Result<()> {
        if let Some(&t) = forest.tokens().iter().find(|&&t| t > self.cfg.vocab) {
            return Err(NnError::InvalidInput(format!("token {t} outside vocab {}", self.cfg.vocab)));
        }
        if let Some(&d) = forest.depths().iter().find(|&&d| d >= self.cfg.max_len) {
            return Err(NnError::InvalidInput(format!("depth {d} exceeds max_len {}", self.cfg.max_len)));
        }
        Ok(())
    }

    /// Differentiable forward pass over every node of `forest`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, forest: &TokenForest) -> Result<TransformerOutput> {
        self.check_forest(forest)?;
        let n = forest.len();
        let list = Arc::new(forest.attend_list());
        let eps = self.cfg.ln_eps;
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let te = g.gather(tok, forest.tokens().to_vec());
        let pe = g.gather(pos, forest.depths().to_vec());
        let mut x = g.add(te, pe);
        for b in &self.blocks {
            let p = |g: &mut Graph, id| g.param(store, id);
            let (lg, lb) = (p(g, b.ln1_g), p(g, b.ln1_b));
            let h = g.layer_norm(x, lg, lb, eps);
            let (wq, wk, wv, wo) = (p(g, b.wq), p(g, b.wk), p(g, b.wv), p(g, b.wo));
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let a = g.attention(q, k, v, self.cfg.heads, list.clone());
            let o = g.matmul(a, wo);
            x = g.add(x, o);
            let (lg, lb) = (p(g, b.ln2_g), p(g, b.ln2_b));
            let h = g.layer_norm(x, lg, lb, eps);
            let (w1, b1, w2, b2) = (p(g, b.w1), p(g, b.b1), p(g, b.w2), p(g, b.b2));
            let u = g.matmul(h, w1);
            let u = g.add_row(u, b1);
            let u = g.relu(u);
            let u = g.matmul(u, w2);
            let u = g.add_row(u, b2);
            x = g.add(x, u);
        }
        let (fg, fb) = (g.param(store, self.lnf_g), g.param(store, self.lnf_b));
        let h = g.layer_norm(x, fg, fb, eps);
        let (hw, hb) = (g.param(store, self.head_w), g.param(store, self.head_b));
        let logits = g.matmul(h, hw);
        let logits = g.add_row(logits, hb);
        let values = self.value.map(|(vw, vb)| {
            let (vw, vb) = (g.param(store, vw), g.param(store, vb));
            let v = g.matmul(h, vw);
            let v = g.add_row(v, vb);
            g.reshape(v, &[n])
        });
        Ok(TransformerOutput { logits, values })
    }

    /// Log-probability of `completion` after `prompt` and the separator.
    pub fn sequence_logprob(
        &self,
        store: &ParamStore,
        prompt: &[usize],
        completion: &[usize],
    ) -> Result<(Real, Vec<Real>)> {
        let v = self.cfg.vocab;
        if let Some(&t) = prompt.iter().chain(completion).find(|&&t| t >= v) {
            return Err(NnError::InvalidInput(format!("token {t} outside vocab {v}")));
        }
        if completion.is_empty() {
            return Ok((0.0, Vec::new()));
        }
        let mut forest = TokenForest::new();
        let mut seq = prompt.to_vec();
        seq.push(self.cfg.separator());
        seq.extend_from_slice(&completion[..completion.len() - 1]);
        let nodes = forest.extend(None, &seq);
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &forest)?;
        let logp = g.log_softmax(out.logits);
        let lp = g.value(logp);
        let per_token: Vec<Real> = completion
            .iter()
            .enumerate()
            .map(|(t, &tok)| lp.row(nodes[prompt.len() + t])[tok])
            .collect();
        Ok((per_token.iter().sum(), per_token))
    }

    /// Inference-only view with a per-node key/value cache.
    pub fn decoder<'a>(&'a self, store: &'a ParamStore) -> Decoder<'a> {
        Decoder {
            model: self,
            store,
            keys: vec![Vec::new(); self.cfg.layers],
            vals: vec![Vec::new(); self.cfg.layers],
            parents: Vec::new(),
            depths: Vec::new(),
            logits: Vec::new(),
        }
    }
}

/// Incremental decoding over a growing prefix tree. Each call to
/// [`Decoder::extend`] adds nodes whose parents are already cached and
/// returns their next-token logits.
pub struct Decoder<'a> {
    model: &'a Transformer,
    store: &'a ParamStore,
    keys: Vec<Vec<Real>>,
    vals: Vec<Vec<Real>>,
    parents: Vec<Option<usize>>,
    depths: Vec<usize>,
    logits: Vec<Real>,
}

impl Decoder<'_> {
    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn logits(&self, node: usize) -> &[Real] {
        let v = self.model.cfg.vocab;
        &self.logits[node * v..(node + 1) * v]
    }

    /// Adds one node per `(parent, token)`; returns their cache indices.
    pub fn extend(&mut self, items: &[(Option<usize>, usize)]) -> Result<Vec<usize>> {
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        let n = items.len();
        let start = self.len();
        for &(p, t) in items {
            if t > cfg.vocab {
                return Err(NnError::InvalidInput(format!("token {t} outside vocab {}", cfg.vocab)));
            }
            let depth = match p {
                None => 0,
                Some(p) if p < start => self.depths[p] + 1,
                Some(p) => return Err(NnError::InvalidInput(format!("parent {p} is not cached"))),
            };
            if depth >= cfg.max_len {
                return Err(NnError::InvalidInput(format!("depth {depth} exceeds max_len {}", cfg.max_len)));
            }
            self.parents.push(p);
            self.depths.push(depth);
        }
        let mut list = AttendList { offsets: vec![0], indices: Vec::new() };
        let mut chain = Vec::new();
        for i in start..start + n {
            chain.clear();
            let mut cur = Some(i);
            while let Some(c) = cur {
                chain.push(c);
                cur = self.parents[c];
            }
            list.indices.extend(chain.iter().rev());
            list.offsets.push(list.indices.len());
        }

        let w = |id: ParamId| self.store.get(id).data();
        let mut x = vec![0.0; n * d];
        for (r, &(_, t)) in items.iter().enumerate() {
            let depth = self.depths[start + r];
            let te = &w(self.model.tok_emb)[t * d..(t + 1) * d];
            let pe = &w(self.model.pos_emb)[depth * d..(depth + 1) * d];
            for j in 0..d {
                x[r * d + j] = te[j] + pe[j];
            }
        }
        let hidden = d * cfg.mlp_ratio;
        let mut h = vec![0.0; n * d];
        let mut q = vec![0.0; n * d];
        let mut kv = vec![0.0; n * d];
        let mut a = vec![0.0; n * d];
        let mut u = vec![0.0; n * hidden];
        let mut probs = vec![0.0; list.prob_len(cfg.heads)];
        for (l, b) in self.model.blocks.iter().enumerate() {
            layer_norm_rows(&x, w(b.ln1_g), w(b.ln1_b), cfg.ln_eps, &mut h);
            gemm(n, d, d, &h, Trans::No, w(b.wq), Trans::No, 0.0, &mut q);
            gemm(n, d, d, &h, Trans::No, w(b.wk), Trans::No, 0.0, &mut kv);
            self.keys[l].extend_from_slice(&kv);
            gemm(n, d, d, &h, Trans::No, w(b.wv), Trans::No, 0.0, &mut kv);
            self.vals[l].extend_from_slice(&kv);
            attention_forward(&q, &self.keys[l], &self.vals[l], d, cfg.heads, &list, &mut a, &mut probs);
            gemm(n, d, d, &a, Trans::No, w(b.wo), Trans::No, 1.0, &mut x);
            layer_norm_rows(&x, w(b.ln2_g), w(b.ln2_b), cfg.ln_eps, &mut h);
            gemm(n, d, hidden, &h, Trans::No, w(b.w1), Trans::No, 0.0, &mut u);
            for row in u.chunks_mut(hidden) {
                for (v, bias) in row.iter_mut().zip(w(b.b1)) {
                    *v = (*v + bias).max(0.0);
                }
            }
            gemm(n, hidden, d, &u, Trans::No, w(b.w2), Trans::No, 1.0, &mut x);
            for row in x.chunks_mut(d) {
                for (v, bias) in row.iter_mut().zip(w(b.b2)) {
                    *v += bias;
                }
            }
        }
        layer_norm_rows(&x, w(self.model.lnf_g), w(self.model.lnf_b), cfg.ln_eps, &mut h);
        let v = cfg.vocab;
        let mut logits = vec![0.0; n * v];
        gemm(n, d, v, &h, Trans::No, w(self.model.head_w), Trans::No, 0.0, &mut logits);
        for row in logits.chunks_mut(v) {
            for (o, bias) in row.iter_mut().zip(w(self.model.head_b)) {
                *o += bias;
            }
        }
        self.logits.extend_from_slice(&logits);
        Ok((start..start + n).collect())
    }
}

fn layer_norm_rows(x: &[Real], gamma: &[Real], beta: &[Real], eps: Real, out: &mut [Real]) {
    let n = gamma.len();
    for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = row.iter().sum::<Real>() / n as Real;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
        let s = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            o[j] = (row[j] - mean) * s * gamma[j] + beta[j];
        }
    }
}
