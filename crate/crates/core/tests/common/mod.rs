#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use voxgrad::{grad_check, GradCheckReport, Tensor, TensorError, Var};

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Central finite-difference check of a scalar function built from
/// library calls.
pub fn check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&Var) -> scenegan::Result<Var>,
{
    grad_check(|v| f(v).map_err(|e| TensorError::Usage(e.to_string())), x, step, tol).unwrap()
}
