//! Variational training of the renderer, inference network and LGSSM prior.

mod config;
mod elbo;
mod model;
pub(crate) mod sampler;
mod train;

pub use config::{anneal, TrainConfig};
pub use elbo::{bind_model, elbo, elbo_graph, images_tensor, ElboNodes, ElboValue, ModelVars, Noise};
pub use model::{initialize, initial_lgssm, Model, ModelCheckpoint, ModelDims};
pub use train::{train, LossRecord, TrainEvent};
