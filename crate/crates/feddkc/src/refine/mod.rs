//! Refinement mappings that project incongruent client logits into a
//! congruent distribution family.
//!
//! Under KKR every refined vector has the same peak probability T; under SKR
//! every refined vector's Shannon entropy lies within epsilon/2 of the target
//! E, so any two clients differ by less than epsilon. Refined knowledge is a
//! constant supervision target during server distillation; no gradient flows
//! through these mappings.

mod bisect;
mod kernel;
mod kkr;
mod skr;

pub use bisect::{bisection_root, Bisection, BisectionConfig};
pub use kernel::{generalized_kkr_refine, GeneralizedKkrOutcome, KernelSpec};
pub use kkr::{kkr_closed_form, kkr_refine, kkr_refine_prob};
pub use skr::{skr_refine, SkrOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{
    peak_probability, shannon_entropy, softmax, DistMeasure, Knowledge, ProbVector,
};

/// Which refinement mapping the server applies to uplinked knowledge.
/// `None` leaves plain softmax in place (the unrefined baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    None,
    Kkr,
    Skr,
    GeneralizedKkr,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Kkr => "kkr",
            Strategy::Skr => "skr",
            Strategy::GeneralizedKkr => "generalized-kkr",
        }
    }
}

/// Strategy choice plus every knob the mappings need.
#[derive(Debug, Clone)]
pub struct RefinementConfig {
    pub strategy: Strategy,
    /// T, the target peak probability; must satisfy 1/C < T < 1.
    pub target_peak: f64,
    /// E, the target Shannon entropy in bits; must satisfy 0 < E < log2(C).
    pub target_entropy: f64,
    /// Epsilon, the congruence bound; searches stop within epsilon/2.
    pub tolerance: f64,
    pub bisection: BisectionConfig,
    /// Kernel for the generalized strategy; ignored by the others.
    pub kernel: KernelSpec,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            target_peak: 0.11,
            target_entropy: 3.3,
            tolerance: 1e-3,
            bisection: BisectionConfig::with_half_tolerance(1e-3),
            kernel: KernelSpec::LinearAffine { k: 1.0, b: 1.0 },
        }
    }
}

impl RefinementConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    /// Checks every bound that depends on the class count.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidTarget(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        self.bisection.validate()?;
        match self.strategy {
            Strategy::None => Ok(()),
            Strategy::Kkr | Strategy::GeneralizedKkr => {
                kkr::validate_target_peak(self.target_peak, classes)
            }
            Strategy::Skr => skr::validate_target_entropy(self.target_entropy, classes),
        }
    }

    /// Bisection bracket with this config's epsilon/2 as the stop tolerance.
    fn search_config(&self) -> BisectionConfig {
        BisectionConfig {
            f_tol: self.tolerance / 2.0,
            ..self.bisection.clone()
        }
    }
}

/// Refined knowledge plus the searched parameter, when the strategy has one
/// (theta for SKR, the kernel scale for generalized KKR, the closed-form
/// scale for KKR on non-rectified inputs).
#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub refined: ProbVector,
    pub scale: Option<f64>,
}

/// Applies the configured strategy to one knowledge vector.
pub fn refine(z: &Knowledge, cfg: &RefinementConfig) -> Result<RefineOutput> {
    match cfg.strategy {
        Strategy::None => Ok(RefineOutput {
            refined: softmax(z),
            scale: None,
        }),
        Strategy::Kkr => {
            let refined = kkr_refine(z, cfg.target_peak)?;
            let p = softmax(z);
            let (v_max, _) = peak_probability(&p);
            let scale = kkr::kkr_scale(v_max, z.class_count(), cfg.target_peak);
            Ok(RefineOutput {
                refined,
                // The closed-form scale is only meaningful when the linear
                // map stayed in the simplex.
                scale: (scale > 0.0).then_some(scale),
            })
        }
        Strategy::Skr => {
            let out = skr_refine(z, cfg.target_entropy, &cfg.search_config())?;
            Ok(RefineOutput {
                refined: out.refined,
                scale: Some(out.theta),
            })
        }
        Strategy::GeneralizedKkr => {
            let out = generalized_kkr_refine(
                z,
                &cfg.kernel,
                cfg.target_peak,
                cfg.tolerance,
                &cfg.bisection,
            )?;
            Ok(RefineOutput {
                refined: out.refined,
                scale: Some(out.scale),
            })
        }
    }
}

/// |measure(p1) - measure(p2)|, the discrepancy the congruence bounds are
/// stated on.
pub fn knowledge_discrepancy(p1: &ProbVector, p2: &ProbVector, measure: DistMeasure) -> Result<f64> {
    if p1.class_count() != p2.class_count() {
        return Err(Error::DimensionMismatch {
            expected: p1.class_count(),
            got: p2.class_count(),
        });
    }
    Ok((measure.evaluate(p1) - measure.evaluate(p2)).abs())
}

/// One line of the refinement debug dump (serialized as JSON, one object per
/// refined row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementEvent {
    pub client_id: usize,
    pub round: u32,
    pub strategy: String,
    pub theta_or_t: Option<f64>,
    pub pre_peak: f64,
    pub post_peak: f64,
    pub pre_entropy: f64,
    pub post_entropy: f64,
}

impl RefinementEvent {
    pub fn from_refinement(
        client_id: usize,
        round: u32,
        strategy: &str,
        scale: Option<f64>,
        before: &ProbVector,
        after: &ProbVector,
    ) -> Self {
        Self {
            client_id,
            round,
            strategy: strategy.to_string(),
            theta_or_t: scale,
            pre_peak: peak_probability(before).0,
            post_peak: peak_probability(after).0,
            pre_entropy: shannon_entropy(before),
            post_entropy: shannon_entropy(after),
        }
    }
}
