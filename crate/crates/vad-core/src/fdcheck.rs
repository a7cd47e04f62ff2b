//! Central finite-difference gradient oracle. Only evaluates the forward
//! pass, so it stays independent of the backward implementation it checks.

use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative error with an absolute floor: central differences carry ~1e-10
/// of cancellation noise, so gradients below the floor are effectively
/// compared at absolute tolerance floor * rtol.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-5);
    (a - b).abs() / denom
}

/// Central finite difference of `loss_fn` w.r.t. element `idx` of `params[pi]`.
pub fn central_diff<F>(loss_fn: &F, params: &[Tensor<f64>], pi: usize, idx: usize, h: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut plus = params.to_vec();
    plus[pi].data_mut()[idx] += h;
    let lp = loss_fn(&plus);
    let mut minus = params.to_vec();
    minus[pi].data_mut()[idx] -= h;
    let lm = loss_fn(&minus);
    (lp - lm) / (2.0 * h)
}

/// Check every element of every parameter. Returns the max relative error.
pub fn check_full<F>(loss_fn: &F, params: &[Tensor<f64>], analytic: &[Tensor<f64>], h: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.numel() {
            let fd = central_diff(loss_fn, params, pi, idx, h);
            worst = worst.max(relative_error(grad.data()[idx], fd));
        }
    }
    worst
}

/// Check a random sample of parameter elements (per parameter tensor).
/// Probe positions are seeded so failures reproduce.
pub fn check_probes<F>(
    loss_fn: &F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    probes_per_param: usize,
    seed: u64,
) -> f64
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        for &idx in indices.iter().take(probes_per_param.min(n)) {
            let fd = central_diff(loss_fn, params, pi, idx, h);
            worst = worst.max(relative_error(grad.data()[idx], fd));
        }
    }
    worst
}
