//! Searching-based knowledge refinement: entropy targeting via temperature
//! search. A temperature theta reshapes softmax(z / theta); bisection finds
//! theta* whose output entropy sits within the tolerance of the target.

use crate::error::{Error, Result};
use crate::knowledge::{shannon_entropy, softmax_with_temperature, Knowledge, ProbVector};
use crate::refine::bisect::{bisection_root, BisectionConfig};

pub(crate) fn validate_target_entropy(target_entropy: f64, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::InvalidTarget(format!(
            "entropy refinement needs at least 2 classes, got {classes}"
        )));
    }
    let ceiling = (classes as f64).log2();
    if !(target_entropy > 0.0 && target_entropy < ceiling) {
        return Err(Error::InvalidTarget(format!(
            "target entropy {target_entropy} violates 0 < E < log2(C) = {ceiling} (C = {classes})"
        )));
    }
    Ok(())
}

/// Refined vector plus the temperature that produced it.
#[derive(Debug, Clone)]
pub struct SkrOutcome {
    pub refined: ProbVector,
    pub theta: f64,
    /// Midpoint evaluations spent in the bisection.
    pub iterations: usize,
}

/// Rescales `z` by a searched temperature so the output Shannon entropy is
/// within `cfg.f_tol` (epsilon/2) of `target_entropy`.
///
/// Constant logits give the uniform distribution at every temperature; they
/// succeed only when the target already sits at log2(C), and otherwise fail
/// with `DegenerateKnowledge`.
pub fn skr_refine(z: &Knowledge, target_entropy: f64, cfg: &BisectionConfig) -> Result<SkrOutcome> {
    validate_target_entropy(target_entropy, z.class_count())?;
    cfg.validate()?;

    if z.is_constant() {
        let classes = z.class_count();
        let max_entropy = (classes as f64).log2();
        if (target_entropy - max_entropy).abs() < cfg.f_tol {
            return Ok(SkrOutcome {
                refined: ProbVector::uniform(classes),
                theta: 1.0,
                iterations: 0,
            });
        }
        return Err(Error::DegenerateKnowledge(format!(
            "constant logits have entropy log2(C) = {max_entropy} at every temperature; \
             target {target_entropy} is out of reach"
        )));
    }

    let entropy_gap = |theta: f64| shannon_entropy(&softmax_with_temperature(z, theta)) - target_entropy;
    let found = bisection_root(entropy_gap, cfg)?;
    Ok(SkrOutcome {
        refined: softmax_with_temperature(z, found.root),
        theta: found.root,
        iterations: found.iterations,
    })
}
