//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operation set is closed: convolution, the five-point stencil, the
//! activations, pooling, the dense layer, softmax cross-entropy, and
//! elementwise arithmetic with reductions. That is everything the model and
//! its losses need, and each op's gradient is checked against central
//! differences in the tests below.

mod conv;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{Bound, GradMap, Param, ParameterSet};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Runs the reverse sweep from `loss` and collects one gradient per trainable parameter.
pub fn backward(tape: &Tape, loss: Var, params: &ParameterSet, bound: &Bound) -> Result<GradMap> {
    let grads = tape.backward(loss)?;
    params.gradients(bound, &grads)
}

#[cfg(test)]
mod tests;
