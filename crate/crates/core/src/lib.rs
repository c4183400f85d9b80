//! Unsupervised learning of multi-object dynamics from binary image sequences.

pub mod baseline_edlstm;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod lgssm;
pub mod numerics;
pub mod inference_net;
pub mod renderer;
pub mod trainer;

pub use error::{Error, Result};
