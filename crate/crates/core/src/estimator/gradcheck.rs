use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{backward, mse_loss, Batch, RegressorModel};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub parameter: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Gradients below this magnitude are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-8;

/// Compares analytic gradients against central differences
/// `(L(p + h) - L(p - h)) / 2h` on the chosen parameters.
///
/// Passes when every relative error is strictly below `tolerance`.
pub fn gradient_check(
    model: &RegressorModel,
    batch: &Batch,
    step: f64,
    tolerance: f64,
    parameters: &[usize],
) -> Result<GradCheckReport> {
    let analytic = backward(model, batch)?;
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(parameters.len());
    for &p in parameters {
        let original = probe.param(p);
        probe.set_param(p, original + step);
        let up = mse_loss(&probe, batch)?;
        probe.set_param(p, original - step);
        let down = mse_loss(&probe, batch)?;
        probe.set_param(p, original);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.get(p);
        let relative_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
        entries.push(GradCheckEntry {
            parameter: p,
            analytic: a,
            numeric,
            relative_error,
        });
    }
    let max_relative_error = entries.iter().map(|e| e.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step,
        tolerance,
        passed: !entries.is_empty() && max_relative_error < tolerance,
        entries,
        max_relative_error,
    })
}

/// Distinct parameter indices drawn uniformly.
pub fn sample_parameters<R: Rng + ?Sized>(model: &RegressorModel, count: usize, rng: &mut R) -> Vec<usize> {
    let total = model.param_count();
    let mut idx = sample(rng, total, count.min(total)).into_vec();
    idx.sort_unstable();
    idx
}

/// Runs [`gradient_check`] at `settings` random parameter settings, each the
/// model with independent `N(0, spread)` noise added to every parameter, probing
/// `per_setting` sampled parameters per setting.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check_settings(
    model: &RegressorModel,
    batch: &Batch,
    settings: usize,
    per_setting: usize,
    spread: f64,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread.abs()).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    (0..settings)
        .map(|_| {
            let mut probe = model.clone();
            for p in 0..probe.param_count() {
                probe.set_param(p, probe.param(p) + noise.sample(&mut rng));
            }
            let params = sample_parameters(&probe, per_setting, &mut rng);
            gradient_check(&probe, batch, step, tolerance, &params)
        })
        .collect()
}
