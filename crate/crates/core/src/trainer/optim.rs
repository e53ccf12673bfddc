//! Adam with a Lookahead wrapper.

use crate::error::{Error, Result};
use crate::mapper::ParamStore;
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub k: usize,
    pub alpha: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.95,
            beta2: 0.9,
            eps: 1e-8,
            k: 5,
            alpha: 0.5,
        }
    }
}

/// Moments and slow weights, flattened per parameter array and kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub slow: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new<T: Scalar>(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
            slow: params
                .values()
                .iter()
                .map(|p| p.data().iter().map(|x| x.to_f64_lossy()).collect())
                .collect(),
        }
    }
}

/// One Adam step with bias correction; every `k`-th step the slow weights
/// move `alpha` of the way to the fast weights and the fast weights are reset
/// to them.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimState,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "optimizer got {} gradients and {} moment arrays for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads.values()) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let sync = state.t % cfg.k as u64 == 0;
    let mut next = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.values().iter().zip(grads.values()).enumerate() {
        let (m, v, slow) = (&mut state.m[i], &mut state.v[i], &mut state.slow[i]);
        let mut out = Vec::with_capacity(p.len());
        for j in 0..p.len() {
            let gj = g.data()[j].to_f64_lossy();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let mut x = p.data()[j].to_f64_lossy() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            if sync {
                slow[j] += cfg.alpha * (x - slow[j]);
                x = slow[j];
            }
            out.push(T::of(x));
        }
        next.push(Tensor::new(p.shape(), out)?);
    }
    params.set_values(next)
}
