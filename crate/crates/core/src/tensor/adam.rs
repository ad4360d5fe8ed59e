use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{NetworkWeights, ParamKind, Real, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: IndexMap<String, Vec<T>>,
    pub second_moment: IndexMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments for every trainable tensor in `weights`.
    pub fn new(config: AdamConfig, weights: &NetworkWeights<T>) -> Self {
        let mut first_moment = IndexMap::new();
        let mut second_moment = IndexMap::new();
        for (name, t, kind) in weights.iter() {
            if kind == ParamKind::Trainable {
                first_moment.insert(name.to_string(), vec![T::zero(); t.len()]);
                second_moment.insert(name.to_string(), vec![T::zero(); t.len()]);
            }
        }
        Self {
            config,
            step_count: 0,
            first_moment,
            second_moment,
        }
    }
}

/// One Adam update from the gradients accumulated in `weights`.
///
/// Gradients are consumed (zeroed) on success. A NaN anywhere aborts before
/// any parameter is touched.
pub fn adam_step<T: Real>(weights: &mut NetworkWeights<T>, state: &mut AdamState<T>) -> Result<()> {
    for (name, t, kind) in weights.iter() {
        if kind != ParamKind::Trainable {
            continue;
        }
        if !state.first_moment.contains_key(name) {
            return Err(TensorError::UnknownParameter(name.to_string()));
        }
        if t.grad().is_some_and(|g| g.iter().any(|v| v.is_nan())) {
            return Err(TensorError::NanGradient {
                name: name.to_string(),
            });
        }
    }

    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.epsilon);

    for (name, tensor, kind) in weights.iter_mut() {
        if kind != ParamKind::Trainable {
            continue;
        }
        let m = state.first_moment.get_mut(name).expect("checked above");
        let v = state.second_moment.get_mut(name).expect("checked above");
        let grad: Vec<T> = tensor.grad().map(<[T]>::to_vec).unwrap_or_default();
        if grad.is_empty() {
            continue;
        }
        for (i, w) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.zero_grad();
    }
    Ok(())
}
