//! Dense matrices, reverse-mode differentiation, Adam and gradient checking.

mod adam;
mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use adam::{adam_update, Adam, AdamConfig};
pub use gradcheck::{gradcheck, GradReport, ParamError};
pub use matrix::Matrix;
pub use param::{Param, ParamId, ParamSet};
pub use tape::{sigmoid, standardize_rows, OpKind, Tape, Var};

pub use matrix::dot;

/// Layer-norm epsilon used throughout the model.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Glorot-uniform initialization for a `rows x cols` weight.
pub fn glorot_uniform<R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}
