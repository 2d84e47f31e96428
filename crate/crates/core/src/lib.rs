//! Structured attention composition for two-modality temporal action
//! localization: attention heads, action-aware pooling, an entropic
//! optimal-transport justifier with a learnable structure matrix, a toy
//! localizer, synthetic data, and the evaluation protocol.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod localizer;
pub mod metrics;
pub mod ot;
pub mod params;
pub mod rng;
pub mod sac;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
