//! Tensor arithmetic, reverse-mode differentiation, sampling, and Adam.

mod adam;
mod graph;
mod sampling;
mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use graph::{logsumexp, sigmoid, Gradients, Graph, Var};
pub use sampling::{gaussian_sample, init_weight, standard_normal};
pub use tensor::{gemm, Tensor};
