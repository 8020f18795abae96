//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly as it is built; values are
//! available immediately through [`Graph::value`]. [`Graph::backward`] walks
//! the tape in reverse from a scalar and returns gradients for every node
//! that depends on a parameter. Inputs and [`Graph::detach`]ed values are
//! constants: no gradient reaches anything upstream of them.

use std::collections::HashMap;
use std::sync::Arc;

use crate::attention::{attention_backward, attention_forward, AttendList};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, Real, Tensor, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<Real>, inv_std: Vec<Real> },
    Gather { table: Var, ids: Vec<usize> },
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<(usize, usize)> },
    Reshape(Var),
    Sum(Var),
    SegmentSum { x: Var, segment: Vec<usize> },
    Minimum(Var, Var),
    Clamp { x: Var, lo: Real, hi: Real },
    Attention { q: Var, k: Var, v: Var, heads: usize, list: Arc<AttendList>, probs: Vec<Real> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// The parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, &[]);
        self.params.insert(id, v);
        v
    }

    /// A constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul {m}×{k} by {k2}×{n}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Trans::No, self.value(b).data(), Trans::No, 0.0, &mut out);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(Real, Real) -> Real, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shapes differ");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        self.push(t, op, &[a, b])
    }

    fn map(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Real::min, Op::Minimum(a, b))
    }

    /// Adds the vector `b` to every row of the matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(self.shape(b), [n], "bias shape");
        let bias = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(bias) {
                *x += y;
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Real::exp, Op::Exp(a))
    }

    pub fn clamp(&mut self, x: Var, lo: Real, hi: Real) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Normalizes each row of `x` and applies the elementwise affine
    /// `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.shape(gamma), [n]);
        assert_eq!(self.shape(beta), [n]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for (i, row) in self.value(x).data().chunks(n).enumerate() {
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::matrix(m, n, out),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        )
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let (rows, n) = self.value(table).dims2();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in &ids {
            assert!(i < rows, "gather index {i} out of range for {rows} rows");
            out.extend_from_slice(self.value(table).row(i));
        }
        let t = Tensor::matrix(ids.len(), n, out);
        self.push(t, Op::Gather { table, ids }, &[table])
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Tensor::matrix(m, n, out), Op::LogSoftmax(x), &[x])
    }

    /// Vector of the entries `x[r, c]` for each `(r, c)` in `idx`.
    pub fn pick(&mut self, x: Var, idx: Vec<(usize, usize)>) -> Var {
        let (m, n) = self.value(x).dims2();
        let data = idx
            .iter()
            .map(|&(r, c)| {
                assert!(r < m && c < n, "pick ({r}, {c}) out of range for {m}×{n}");
                self.value(x).data()[r * n + c]
            })
            .collect();
        self.push(Tensor::vector(data), Op::Pick { x, idx }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape.to_vec());
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as Real)
    }

    /// Sums a vector into `segments` bins; entry `i` goes to bin `segment[i]`.
    pub fn segment_sum(&mut self, x: Var, segment: Vec<usize>, segments: usize) -> Var {
        assert_eq!(self.value(x).rank(), 1, "segment_sum takes a vector");
        assert_eq!(self.value(x).len(), segment.len());
        let mut out = vec![0.0; segments];
        for (&s, v) in segment.iter().zip(self.value(x).data()) {
            out[s] += v;
        }
        self.push(Tensor::vector(out), Op::SegmentSum { x, segment }, &[x])
    }

    /// Multi-head attention of query rows over their key lists; `q`, `k`,
    /// `v` are `rows × d` with `d` divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, list: Arc<AttendList>) -> Var {
        let (m, d) = self.value(q).dims2();
        assert_eq!(self.value(k).dims2().1, d);
        assert_eq!(self.value(v).dims2(), self.value(k).dims2());
        assert_eq!(d % heads, 0, "{heads} heads do not divide width {d}");
        assert_eq!(list.queries(), m, "attention list covers {} queries, not {m}", list.queries());
        let mut out = vec![0.0; m * d];
        let mut probs = vec![0.0; list.prob_len(heads)];
        attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            heads,
            &list,
            &mut out,
            &mut probs,
        );
        self.push(Tensor::matrix(m, d, out), Op::Attention { q, k, v, heads, list, probs }, &[q, k, v])
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, node: &Node, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, Trans::No, val(*b), Trans::Yes, 1.0, ga);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a), Trans::Yes, g, Trans::No, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, needs(*a), g, |x| x);
                accumulate(grads, *b, needs(*b), g, |x| x);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, needs(*a), g, |x| x);
                accumulate(grads, *b, needs(*b), g, |x| -x);
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, needs(*a), g, |x| x);
                if needs(*b) {
                    let n = self.value(*b).len();
                    let gb = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b).to_vec();
                    let ga = slot(grads, *a, g.len());
                    for ((s, x), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *s += x * y;
                    }
                }
                if needs(*b) {
                    let av = val(*a).to_vec();
                    let gb = slot(grads, *b, g.len());
                    for ((s, x), y) in gb.iter_mut().zip(g).zip(&av) {
                        *s += x * y;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let pick_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x <= y).collect();
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((s, x), &p) in ga.iter_mut().zip(g).zip(&pick_a) {
                        if p {
                            *s += x;
                        }
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    for ((s, x), &p) in gb.iter_mut().zip(g).zip(&pick_a) {
                        if !p {
                            *s += x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, true, g, |x| c * x),
            Op::AddScalar(a) => accumulate(grads, *a, true, g, |x| x),
            Op::Relu(a) => {
                let av = val(*a);
                let ga = slot(grads, *a, g.len());
                for ((s, x), y) in ga.iter_mut().zip(g).zip(av) {
                    if *y > 0.0 {
                        *s += x;
                    }
                }
            }
            Op::Exp(a) => {
                let out = node.value.data();
                let ga = slot(grads, *a, g.len());
                for ((s, x), y) in ga.iter_mut().zip(g).zip(out) {
                    *s += x * y;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                let gx = slot(grads, *x, g.len());
                for ((s, d), v) in gx.iter_mut().zip(g).zip(xv) {
                    if *v >= *lo && *v <= *hi {
                        *s += d;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = self.value(*gamma).len();
                if needs(*gamma) {
                    let gg = slot(grads, *gamma, n);
                    for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot(grads, *beta, n);
                    for row_g in g.chunks(n) {
                        for (s, d) in gb.iter_mut().zip(row_g) {
                            *s += d;
                        }
                    }
                }
                if needs(*x) {
                    let gamma_v = val(*gamma).to_vec();
                    let gx = slot(grads, *x, g.len());
                    let mut dh = vec![0.0; n];
                    for (i, (row_g, row_h)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            dh[j] = row_g[j] * gamma_v[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * row_h[j];
                        }
                        mean_dh /= n as Real;
                        mean_dh_h /= n as Real;
                        let s = inv_std[i];
                        for j in 0..n {
                            gx[i * n + j] += s * (dh[j] - mean_dh - row_h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (rows, n) = self.value(*table).dims2();
                let gt = slot(grads, *table, rows * n);
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..n {
                        gt[i * n + j] += g[k * n + j];
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = self.value(*x).dims2().1;
                let out = node.value.data();
                let gx = slot(grads, *x, g.len());
                for ((sg, row_g), row_o) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let total: Real = row_g.iter().sum();
                    for j in 0..n {
                        sg[j] += row_g[j] - row_o[j].exp() * total;
                    }
                }
            }
            Op::Pick { x, idx } => {
                let (m, n) = self.value(*x).dims2();
                let gx = slot(grads, *x, m * n);
                for (&(r, c), d) in idx.iter().zip(g) {
                    gx[r * n + c] += d;
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, true, g, |v| v),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::SegmentSum { x, segment } => {
                let gx = slot(grads, *x, segment.len());
                for (s, &b) in gx.iter_mut().zip(segment) {
                    *s += g[b];
                }
            }
            Op::Attention { q, k, v, heads, list, probs } => {
                let (m, d) = self.value(*q).dims2();
                let rows = self.value(*k).dims2().0;
                let mut dq = vec![0.0; m * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    d,
                    *heads,
                    list,
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                accumulate(grads, *q, needs(*q), &dq, |x| x);
                accumulate(grads, *k, needs(*k), &dk, |x| x);
                accumulate(grads, *v, needs(*v), &dv, |x| x);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<Real>>], v: Var, len: usize) -> &mut [Real] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<Real>>], v: Var, needed: bool, g: &[Real], f: impl Fn(Real) -> Real) {
    if !needed {
        return;
    }
    let s = slot(grads, v, g.len());
    for (a, &b) in s.iter_mut().zip(g) {
        *a += f(b);
    }
}

/// Gradients of one backward pass, by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss or does not depend on a
    /// parameter.
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for every parameter in `store`; parameters the graph never
    /// touched get zeros.
    pub fn params(&self, graph: &Graph, store: &ParamStore) -> ParamGrads {
        let mut out = store.zeros_like();
        for (&id, &v) in &graph.params {
            if let Some(g) = self.get(v) {
                out.0[id.0].data_mut().copy_from_slice(g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![3.0]));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let sq = g.mul(xv, xv);
        let loss = g.sum(sq);
        let grads = g.backward(loss);
        assert_eq!(grads.params(&g, &store).get(x).data(), &[6.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![2.0, -1.0]));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let e = g.exp(xv);
        let c = g.detach(e);
        let prod = g.mul(xv, c);
        let loss = g.sum(prod);
        let grads = g.backward(loss).params(&g, &store);
        let want: Vec<Real> = [2.0f64, -1.0].iter().map(|v| v.exp()).collect();
        assert_eq!(grads.get(x).data(), want.as_slice());
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0]));
        let b = store.add("b", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let loss = g.sum(av);
        let grads = g.backward(loss).params(&g, &store);
        assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
    }
}
