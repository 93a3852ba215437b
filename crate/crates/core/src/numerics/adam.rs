use serde::{Deserialize, Serialize};

use crate::error::{AktError, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `None` means no clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, max_grad_norm: None }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub config: AdamConfig,
    first_moment: Vec<Tensor<S>>,
    second_moment: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        OptimizerState { config, first_moment: zeros.clone(), second_moment: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub fn global_norm<S: Scalar>(grads: &[Option<Tensor<S>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v.to_f64_lossless().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale all gradients together so their global norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Option<Tensor<S>>], max_norm: Option<f64>) -> f64 {
    let norm = global_norm(grads);
    if let Some(limit) = max_norm {
        if limit.is_finite() && norm > limit {
            let factor = S::from_f64_lossy(limit / norm);
            for g in grads.iter_mut().flatten() {
                g.scale_inplace(factor);
            }
        }
    }
    norm
}

/// One bias-corrected Adam update. `grads` is indexed like `params`; `None`
/// entries are treated as zero gradient (moments still decay).
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &mut [Option<Tensor<S>>],
    state: &mut OptimizerState<S>,
) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(AktError::shape("adam_step", "gradient list does not match parameter list"));
    }
    for (id, g) in params.ids().zip(grads.iter()) {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(AktError::shape("adam_step", format!("gradient for {} has shape {:?}", params.name(id), g.shape())));
            }
            if !g.all_finite() {
                return Err(AktError::Numerical(format!("non-finite gradient for parameter {}", params.name(id))));
            }
        }
    }
    clip_grad_norm(grads, state.config.max_grad_norm);

    state.step += 1;
    let cfg = &state.config;
    let t = state.step as i32;
    let (b1, b2): (S, S) = (S::from_f64_lossy(cfg.beta1), S::from_f64_lossy(cfg.beta2));
    let bc1 = S::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let bc2 = S::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = S::from_f64_lossy(cfg.learning_rate);
    let eps = S::from_f64_lossy(cfg.epsilon);

    for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = params.get_mut(id).data_mut();
        let g = grads[i].as_ref().map(|g| g.data());
        for j in 0..p.len() {
            let gj = g.map_or(S::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (S::one() - b1) * gj;
            v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
