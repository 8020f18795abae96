//! Two-layer ReLU classifier.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    /// Weights are truncated normal with variance `1 / fan_in`; biases are
    /// zero.
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let w1 = store.add("mlp.w1", truncated_normal(&[input, hidden], 1.0 / (input as Real).sqrt(), rng));
        let b1 = store.add("mlp.b1", Tensor::zeros(&[hidden]));
        let w2 = store.add("mlp.w2", truncated_normal(&[hidden, output], 1.0 / (hidden as Real).sqrt(), rng));
        let b2 = store.add("mlp.b2", Tensor::zeros(&[output]));
        Self { input, hidden, output, w1, b1, w2, b2 }
    }

    /// Logits for a `batch × input` matrix.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }

    /// Class probabilities without building a graph.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let logits = self.forward(&mut g, store, xv);
        let lp = g.log_softmax(logits);
        let t = g.value(lp);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.exp()).collect())
    }
}
