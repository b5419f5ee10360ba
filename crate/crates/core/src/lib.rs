//! Two-stream scene understanding on a self-contained numeric core.
//!
//! The library turns semantic label maps into scene graphs, embeds them
//! with graph layers (GCN / GraphSAGE / GAT), encodes paired images with a
//! small patch transformer, fuses the two streams, and trains scene
//! classifiers end to end. Every differentiable operation runs on the
//! crate's own reverse-mode tape and is validated against finite
//! differences.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod params;
pub mod raster;
pub mod scenegraph;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor2D};
