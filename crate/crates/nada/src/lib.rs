//! Text-guided domain adaptation for style-based image generators.
//!
//! The crate trains a copy of a pretrained generator so that its output
//! distribution moves toward a target domain named by a text prompt (or a
//! handful of reference images), while a frozen copy of the same generator
//! anchors the source domain. Everything runs on CPU in f64 and is
//! deterministic for a fixed seed.

pub mod analysis;
pub mod cli;
pub mod container;
pub mod embedding;
pub mod error;
pub mod fewshot;
pub mod generator;
pub mod graph;
pub mod layer_selection;
pub mod losses;
pub mod mapper;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
