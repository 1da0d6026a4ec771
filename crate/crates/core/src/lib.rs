//! Multi-slide whole-slide-image classification over precomputed patch
//! embeddings: two-stage patch selection, KNN-graph and text-prompt hybrid
//! fusion, focal-loss training and evaluation.

pub mod data;
pub mod error;
pub mod fusion;
pub mod numeric;
pub mod select;
pub mod train;

pub use error::{Error, Result};
