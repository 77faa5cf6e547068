//! AdamW with decoupled weight decay and bias-corrected moments.

use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update of `params` in place.
///
/// Decay is applied to the weights directly (`p *= 1 - lr * wd`) before the
/// Adam step, independent of the gradient. Moments are kept in f64.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamWState,
    config: &AdamWConfig,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    if state.m.is_empty() {
        state.m = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let (b1, b2) = config.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - config.lr * config.weight_decay;
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gf = gi.as_f64();
            *mi = b1 * *mi + (1.0 - b1) * gf;
            *vi = b2 * *vi + (1.0 - b2) * gf * gf;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            let updated = pi.as_f64() * decay - config.lr * mhat / (vhat.sqrt() + config.eps);
            *pi = T::of(updated);
        }
    }
}

/// Optimizer handle bundling configuration and state.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: AdamWState::new(),
        }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) {
        adamw_step(params, grads, &mut self.state, &self.config);
    }
}
