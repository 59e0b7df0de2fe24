//! Dense `f64` tensors and a reverse-mode differentiation tape.
//!
//! Everything the model, the probing operators and the losses compute is
//! built from the primitives on [`Tape`]. Values-only helpers at the bottom of
//! this module run a throwaway tape for callers that do not need gradients.

mod adam;
mod tape;
mod tensor;

pub mod gradcheck;

use thiserror::Error;

pub use adam::Adam;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("{op} undefined at {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("{0}")]
    Usage(String),
}

/// Row-wise softmax of a tensor at the given temperature.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.softmax_rows(v, temperature)?;
    Ok(tape.value(out).clone())
}

/// `x / (‖x‖₁ + eps)`.
pub fn l1_normalize(x: &[f64], eps: f64) -> Result<Vec<f64>, NumericsError> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(x.to_vec()));
    let out = tape.l1_normalize(v, eps)?;
    Ok(tape.value(out).data().to_vec())
}
