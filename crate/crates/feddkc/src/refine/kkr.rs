//! Kernel-based knowledge refinement: closed-form peak-probability targeting.
//!
//! The softmax-normalized vector is remapped so its maximum entry lands
//! exactly on the target peak T. The affine-kernel solution is the linear
//! form below; when it would leave the simplex (possible when the original
//! peak sits under T), the output is rectified to "T at the peak, uniform
//! elsewhere", which keeps the peak-equals-T guarantee.

use crate::error::{Error, Result};
use crate::knowledge::{peak_probability, softmax, Knowledge, ProbVector};

/// The closed form divides by C*v_max - 1; below this margin the input is
/// treated as uniform and rectified directly.
pub const UNIFORM_MARGIN: f64 = 1e-8;

pub(crate) fn validate_target_peak(target_peak: f64, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::InvalidTarget(format!(
            "peak refinement needs at least 2 classes, got {classes}"
        )));
    }
    let floor = 1.0 / classes as f64;
    if !(target_peak > floor && target_peak < 1.0) {
        return Err(Error::InvalidTarget(format!(
            "target peak {target_peak} violates 1/C < T < 1 (C = {classes})"
        )));
    }
    Ok(())
}

/// The un-rectified linear map. Entries may be negative; callers that need a
/// probability vector go through [`kkr_refine`]. Exposed so the negativity
/// witness can be inspected directly.
pub fn kkr_closed_form(p: &ProbVector, target_peak: f64) -> Vec<f64> {
    let c = p.class_count() as f64;
    let (v_max, _) = peak_probability(p);
    let denom = c * v_max - 1.0;
    p.probs()
        .iter()
        .map(|&v| ((c * target_peak - 1.0) * v + v_max - target_peak) / denom)
        .collect()
}

/// Rectified fallback: T at `peak_idx`, the rest uniform at (1-T)/(C-1).
pub(crate) fn rectified(classes: usize, peak_idx: usize, target_peak: f64) -> ProbVector {
    let rest = (1.0 - target_peak) / (classes - 1) as f64;
    let mut out = vec![rest; classes];
    out[peak_idx] = target_peak;
    ProbVector::from_normalized(out)
}

/// Refines `z` so the output peak probability is exactly `target_peak`.
///
/// Near-uniform input (C*v_max - 1 below [`UNIFORM_MARGIN`]) is rectified
/// directly: that is the continuous limit of the rectification branch and
/// avoids the vanishing denominator.
pub fn kkr_refine(z: &Knowledge, target_peak: f64) -> Result<ProbVector> {
    validate_target_peak(target_peak, z.class_count())?;
    let p = softmax(z);
    Ok(kkr_refine_prob(&p, target_peak))
}

/// Same as [`kkr_refine`] but starting from an already-normalized vector.
pub fn kkr_refine_prob(p: &ProbVector, target_peak: f64) -> ProbVector {
    let (v_max, peak_idx) = peak_probability(p);
    let c = p.class_count();
    if c as f64 * v_max - 1.0 < UNIFORM_MARGIN {
        return rectified(c, peak_idx, target_peak);
    }
    let mapped = kkr_closed_form(p, target_peak);
    if mapped.iter().any(|&x| x < 0.0) {
        return rectified(c, peak_idx, target_peak);
    }
    ProbVector::from_normalized(mapped)
}

/// Closed-form kernel scale used by the affine kernel; recorded in
/// refinement event dumps. Meaningless (and negative) on rectified inputs.
pub(crate) fn kkr_scale(v_max: f64, classes: usize, target_peak: f64) -> f64 {
    (v_max - target_peak) / (v_max * (classes as f64 * target_peak - 1.0))
}
