//! Dense tensors, a reverse-mode tape, and the optimizer/initialization pieces
//! the model is trained with.

mod adam;
mod grad_check;
mod graph;
mod init;
mod params;
mod tensor;

pub use adam::{adam_step, clip_grad_norm, global_norm, AdamConfig, OptimizerState};
pub use grad_check::{grad_check, numeric_gradient};
pub use graph::{
    masked_softmax_rows, sigmoid, softplus, softplus_inverse, Graph, Var, BCE_EPS, LAYER_NORM_EPS,
};
pub use init::{xavier_bound, xavier_init};
pub use params::{NamedTensorRecord, Param, ParamId, ParamStore};
pub use tensor::{Tensor, TensorRecord};

use rand::Rng;

use crate::error::{AktError, Result};
use crate::scalar::Scalar;

/// Inverted dropout. In eval mode, or at rate 0, the input node is returned as is.
pub fn dropout<S: Scalar, R: Rng + ?Sized>(
    graph: &mut Graph<S>,
    x: Var,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = S::from_f64_lossy(1.0 / (1.0 - rate));
    let n = graph.value(x).len();
    let factors = (0..n)
        .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep })
        .collect();
    graph.mul_const(x, factors)
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(AktError::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Summed masked binary cross-entropy on plain values.
pub fn binary_cross_entropy<S: Scalar>(pred: &[S], labels: &[S], mask: &[bool]) -> Result<S> {
    if pred.len() != labels.len() || pred.len() != mask.len() {
        return Err(AktError::shape("binary_cross_entropy", "length mismatch"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(AktError::Numerical("binary cross-entropy over an empty mask".into()));
    }
    Ok(graph::bce_sum(pred, labels, mask))
}
