//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the function on untracked tensors, so
//! it shares nothing with the reverse sweep it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::error::NdError;
use super::tensor::{Tape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Elementwise discrepancies below this are accepted regardless of relative error.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
    /// Check only this many randomly chosen coordinates (over all inputs).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: 1e-4,
            abs_floor: ABS_FLOOR,
            max_coords: None,
            seed: 0,
        }
    }
}

impl CheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with an absolute floor: differences under `abs_floor`
/// count as exact.
pub fn rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares reverse-mode gradients of the scalar `f` at `inputs` against
/// central differences.
pub fn check<F, E>(name: &str, inputs: &[Tensor<f64>], f: F, opts: &CheckOptions) -> Result<GradReport, E>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>, E>,
    E: From<NdError>,
{
    let tape = Tape::new();
    let bound: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&bound)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = bound.iter().map(|b| grads.get_or_zeros(b).to_vec()).collect();

    let mut all: Vec<(usize, usize)> = Vec::new();
    for (j, t) in inputs.iter().enumerate() {
        all.extend((0..t.len()).map(|k| (j, k)));
    }
    let coords: Vec<(usize, usize)> = match opts.max_coords {
        Some(m) if m < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked: Vec<usize> = sample(&mut rng, all.len(), m).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    };

    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for &(j, k) in &coords {
        let eval = |delta: f64| -> Result<f64, E> {
            let mut args: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
            let mut d = args[j].to_vec();
            d[k] += delta;
            args[j] = Tensor::new(inputs[j].shape(), d)?;
            Ok(f(&args)?.item()?)
        };
        let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
        let a = analytic[j][k];
        max_abs = max_abs.max((a - numeric).abs());
        max_rel = max_rel.max(rel_err(a, numeric, opts.abs_floor));
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        coords: coords.len(),
        tolerance: opts.tolerance,
        passed: max_rel < opts.tolerance,
    })
}
