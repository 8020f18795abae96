//! Small dense networks with reverse-mode differentiation.
//!
//! [`graph::Graph`] is an eager tape over coarse tensor operations. On top of
//! it sit a two-layer [`mlp::Mlp`] and a pre-norm causal
//! [`transformer::Transformer`] that runs over prefix trees of token
//! sequences ([`forest::TokenForest`]), so candidates that share a prefix
//! share its computation. [`optim`] has Muon and AdamW.

pub mod attention;
pub mod error;
pub mod forest;
pub mod graph;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use error::{NnError, Result};
pub use forest::TokenForest;
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
