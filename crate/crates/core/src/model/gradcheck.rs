//! Finite-difference verification of the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::network::{cross_entropy, forward};
use super::params::ModelParams;
use super::train::{batch_gradient, EncodedExample};
use super::ModelError;

pub const STEP: f64 = 1e-4;
/// Floor of the relative-error denominator, so vanishing gradients are
/// compared on absolute error.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// `(tensor, index, analytic, numeric)` of the worst entry.
    pub worst: (usize, usize, f64, f64),
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOMINATOR_FLOOR)
}

fn loss(p: &ModelParams<f64>, ex: &EncodedExample) -> Result<f64, ModelError> {
    let em = vec![true; ex.encoder.len()];
    let dm = vec![true; ex.decoder_input.len()];
    let logits = forward(p, &ex.encoder, &ex.decoder_input, &em, &dm)?;
    Ok(cross_entropy(&logits, &ex.decoder_target, &dm).0)
}

/// Compare backprop against central differences on `samples` parameters,
/// chosen by first drawing a tensor uniformly and then an entry within it.
pub fn gradient_check(
    params: &ModelParams<f64>,
    example: &EncodedExample,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let (_, grads) = batch_gradient(params, std::slice::from_ref(example), None)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: (0, 0, 0.0, 0.0),
    };
    let n_tensors = analytic.len();
    for _ in 0..samples {
        let ti = rng.random_range(0..n_tensors);
        let ei = rng.random_range(0..analytic[ti].len());
        let original = probe.tensors()[ti][ei];
        probe.tensors_mut()[ti][ei] = original + STEP;
        let plus = loss(&probe, example)?;
        probe.tensors_mut()[ti][ei] = original - STEP;
        let minus = loss(&probe, example)?;
        probe.tensors_mut()[ti][ei] = original;
        let numeric = (plus - minus) / (2.0 * STEP);
        let a = analytic[ti][ei];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (ti, ei, a, numeric);
        }
    }
    Ok(report)
}

/// Add Gaussian noise to every parameter (including norm gains and biases)
/// so a check does not run at the symmetric initial point.
pub fn jitter(params: &mut ModelParams<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, scale).expect("valid scale");
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x += dist.sample(&mut rng);
        }
    }
}
