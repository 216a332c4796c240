//! Pyramid-neck building blocks for multi-scale detectors, on top of a small
//! reverse-mode autodiff engine, with a synthetic-data training and
//! evaluation harness.

pub mod blocks;
pub mod boxes;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod necks;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use tensor::{Element, Tensor};
