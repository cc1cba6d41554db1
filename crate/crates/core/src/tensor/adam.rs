//! Adam optimizer over named parameter tensors.

use super::Tensor;
use std::collections::BTreeMap;

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One Adam update for a single parameter buffer. `t` is the 1-based step
/// count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), state.m.len());
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Keeps per-name moment buffers and the shared step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, states: BTreeMap::new() }
    }

    /// Advance the shared step counter; call once per optimization step,
    /// before the per-tensor [`Adam::update`] calls.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one named parameter tensor. Moment buffers are
    /// zero-initialized on first sight of a name.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) {
        let n = param.numel();
        let state = self
            .states
            .entry(name.to_string())
            .or_insert_with(|| AdamState { m: vec![0.0; n], v: vec![0.0; n] });
        adam_step(param.data_mut(), grad, state, self.t, self.lr, self.beta1, self.beta2, self.eps);
    }

    pub fn states(&self) -> &BTreeMap<String, AdamState> {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut BTreeMap<String, AdamState> {
        &mut self.states
    }
}
