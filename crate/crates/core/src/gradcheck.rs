//! Central finite-difference check of the reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderModel;
use crate::error::{invalid, Result};
use crate::tensor::Matrix;
use crate::text::TokenizedSequence;

/// Denominator floor so that two near-zero gradients do not blow up the
/// relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// A scalar parameter: `(tensor index, flat offset)`.
pub type ParamCoord = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub num_checked: usize,
    /// Coordinate with the largest relative error.
    pub worst: Option<ParamCoord>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Reverse-mode gradient of the classification loss for one example.
pub fn analytic_gradient(model: &EncoderModel<f64>, seq: &TokenizedSequence, label: usize) -> Result<Vec<Matrix<f64>>> {
    let mut grads = model.params().zeros_like();
    model.loss_and_grad(seq, label, &mut grads, None)?;
    Ok(grads)
}

/// Checks `num_samples` distinct scalar parameters drawn uniformly (seeded)
/// from all model parameters, or every parameter if there are fewer.
pub fn grad_check(
    model: &EncoderModel<f64>,
    seq: &TokenizedSequence,
    label: usize,
    epsilon: f64,
    num_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let sizes: Vec<usize> = model.params().tensors.iter().map(Matrix::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = sample(&mut rng, total, num_samples.min(total)).into_vec();
    flat.sort_unstable();
    let mut coords = Vec::with_capacity(flat.len());
    let (mut tensor, mut start) = (0, 0);
    for f in flat {
        while f >= start + sizes[tensor] {
            start += sizes[tensor];
            tensor += 1;
        }
        coords.push((tensor, f - start));
    }
    grad_check_at(model, seq, label, epsilon, &coords)
}

/// Checks the listed coordinates only.
pub fn grad_check_at(
    model: &EncoderModel<f64>,
    seq: &TokenizedSequence,
    label: usize,
    epsilon: f64,
    coords: &[ParamCoord],
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid("epsilon must be positive"));
    }
    let grads = analytic_gradient(model, seq, label)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, num_checked: 0, worst: None };
    for &(t, i) in coords {
        if t >= grads.len() || i >= grads[t].len() {
            return Err(invalid(format!("parameter coordinate ({t}, {i}) out of range")));
        }
        let orig = probe.params().tensors[t].as_slice()[i];
        probe.params_mut()[t].as_mut_slice()[i] = orig + epsilon;
        let plus = probe.loss(seq, label)?;
        probe.params_mut()[t].as_mut_slice()[i] = orig - epsilon;
        let minus = probe.loss(seq, label)?;
        probe.params_mut()[t].as_mut_slice()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads[t].as_slice()[i];
        let rel = relative_error(analytic, numeric);
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((t, i));
        }
        report.num_checked += 1;
    }
    Ok(report)
}
