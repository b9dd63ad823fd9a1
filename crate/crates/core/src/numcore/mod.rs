//! Dense math, small networks, and a differentiable graph that can unroll
//! gradient steps.

pub mod adapt;
pub mod graph;
pub mod loss;
pub mod mlp;
pub mod params;
pub mod tensor;

pub use adapt::{loss_gradient, meta_gradient, unrolled_adapt, Batch};
pub use graph::{sigmoid, Graph, Op, Var};
pub use loss::{bce_mean, cross_entropy, EPS};
pub use mlp::{forward_mlp, Activation, LayerSpec, MlpSpec, Mode};
pub use params::{ParamSet, ParamShape, ParamVars};
pub use tensor::Tensor;
