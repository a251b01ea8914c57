//! Dense tensors, a reverse-mode tape and a finite-difference gradient checker.
//!
//! Everything is row-major and single-threaded. Reductions run in a fixed loop
//! order so two runs with the same inputs produce bit-identical results.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradReport};
pub use graph::{Gradients, Graph, MaskedMean, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type. `f32` is the training default, `f64` is used
/// for gradient checks and the information-theoretic oracle.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Tolerance for row normalization checks at this precision.
    const NORM_TOL: f64;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to every Scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NORM_TOL: f64 = 1e-6;
}

impl Scalar for f64 {
    const NORM_TOL: f64 = 1e-12;
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax<F: Scalar>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    let v = last_dim(logits, "log_softmax")?;
    let mut out = vec![F::zero(); logits.values().len()];
    kernels::log_softmax_rows(logits.values(), v, &mut out)?;
    Tensor::from_vec(logits.shape().to_vec(), out)
}

/// Row-wise entropy in nats, `-sum p ln p`, computed from logits.
pub fn entropy_from_logits<F: Scalar>(logits: &Tensor<F>) -> Result<Tensor<F>> {
    let v = last_dim(logits, "entropy_from_logits")?;
    let rows = logits.values().len() / v;
    let mut out = vec![F::zero(); rows];
    kernels::entropy_rows(logits.values(), v, &mut out)?;
    let shape = &logits.shape()[..logits.shape().len() - 1];
    let shape = if shape.is_empty() { vec![1] } else { shape.to_vec() };
    Tensor::from_vec(shape, out)
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(NumericsError::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    kernels::matmul_nn(a.values(), b.values(), &mut out, m, k, n);
    Tensor::from_vec(vec![m, n], out)
}

fn last_dim<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<usize> {
    match t.shape().last() {
        Some(&v) if v >= 1 => Ok(v),
        _ => Err(NumericsError::Invalid(format!("{op}: last dimension must be >= 1"))),
    }
}
