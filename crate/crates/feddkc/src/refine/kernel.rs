//! Generalized kernel-based refinement: the closed form only exists for the
//! affine kernel, but any admissible kernel can reach the target peak by
//! searching the kernel's input scale with bisection.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::knowledge::{softmax, Knowledge, ProbVector};
use crate::refine::bisect::{bisection_root, BisectionConfig};
use crate::refine::kkr::validate_target_peak;

/// Sampled admissibility grid for custom kernels.
const VALIDATION_POINTS: usize = 1000;
const VALIDATION_LO: f64 = 1e-6;
const VALIDATION_HI: f64 = 64.0;

/// Log-spaced sampling resolution when hunting for a sign change in the
/// kernel-scale search.
const SCAN_POINTS: usize = 64;

/// A kernel admissible for peak refinement: positive, continuous, monotone
/// increasing, and not directly proportional (a pure scaling kernel cancels
/// out of the normalization and can never move the peak).
#[derive(Clone)]
pub enum KernelSpec {
    /// sigma(x) = k*x + b with k > 0, b > 0. Its scale parameter has the
    /// closed-form solution implemented in [`crate::refine::kkr_refine`].
    LinearAffine { k: f64, b: f64 },
    /// Arbitrary scalar kernel, admissibility-checked by sampling.
    Custom {
        name: String,
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::LinearAffine { k, b } => write!(f, "LinearAffine {{ k: {k}, b: {b} }}"),
            KernelSpec::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl KernelSpec {
    pub fn linear_affine(k: f64, b: f64) -> Result<Self> {
        if !(k > 0.0) || !(b > 0.0) {
            return Err(Error::InvalidKernel(format!(
                "affine kernel requires k > 0 and b > 0, got k = {k}, b = {b}"
            )));
        }
        Ok(KernelSpec::LinearAffine { k, b })
    }

    /// exp(x): positive, monotone, non-proportional. Unlike the affine
    /// kernel its peak range covers all of (1/C, 1), so it can reach targets
    /// above the input's own peak.
    pub fn exponential() -> Self {
        KernelSpec::Custom {
            name: "exp".into(),
            f: Arc::new(f64::exp),
        }
    }

    /// Wraps an arbitrary kernel after checking the admissibility conditions
    /// on a sampled grid: positivity, monotone increase, and rejection of
    /// direct proportion (sigma(2x) = 2*sigma(x) across the whole grid).
    /// The conditions are semantic; sampling is the testable approximation.
    pub fn custom<F>(name: impl Into<String>, f: F) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let name = name.into();
        let ratio = VALIDATION_HI / VALIDATION_LO;
        let mut prev = f64::NEG_INFINITY;
        let mut proportional_everywhere = true;
        for i in 0..VALIDATION_POINTS {
            let x = VALIDATION_LO * ratio.powf(i as f64 / (VALIDATION_POINTS - 1) as f64);
            let y = f(x);
            if !y.is_finite() || y <= 0.0 {
                return Err(Error::InvalidKernel(format!(
                    "kernel `{name}` is not consistently positive: sigma({x}) = {y}"
                )));
            }
            if y < prev {
                return Err(Error::InvalidKernel(format!(
                    "kernel `{name}` is not monotonically increasing near x = {x}"
                )));
            }
            prev = y;
            let doubled = f(2.0 * x);
            if (doubled - 2.0 * y).abs() > 1e-9 * doubled.abs().max(1.0) {
                proportional_everywhere = false;
            }
        }
        if proportional_everywhere {
            return Err(Error::InvalidKernel(format!(
                "kernel `{name}` is directly proportional (sigma(2x) = 2*sigma(x) on the \
                 sampled grid); a pure scaling kernel cannot move the peak"
            )));
        }
        Ok(KernelSpec::Custom {
            name,
            f: Arc::new(f),
        })
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        match self {
            KernelSpec::LinearAffine { k, b } => k * x + b,
            KernelSpec::Custom { f, .. } => f(x),
        }
    }

    pub fn name(&self) -> String {
        match self {
            KernelSpec::LinearAffine { k, b } => format!("affine(k={k},b={b})"),
            KernelSpec::Custom { name, .. } => name.clone(),
        }
    }
}

/// Refined vector plus the searched kernel scale.
#[derive(Debug, Clone)]
pub struct GeneralizedKkrOutcome {
    pub refined: ProbVector,
    pub scale: f64,
    pub iterations: usize,
}

fn kernel_map(kernel: &KernelSpec, probs: &[f64], v_max: f64, scale: f64) -> Option<Vec<f64>> {
    let mut mapped = Vec::with_capacity(probs.len());
    let mut sum = 0.0;
    for &v in probs {
        let y = kernel.evaluate(v / (scale * v_max));
        if !y.is_finite() || y <= 0.0 {
            return None;
        }
        sum += y;
        mapped.push(y);
    }
    if !sum.is_finite() || sum <= 0.0 {
        return None;
    }
    for y in &mut mapped {
        *y /= sum;
    }
    Some(mapped)
}

/// Searches the kernel scale so the refined peak lands within `eps / 2` of
/// `target_peak`, then applies the kernel map at the found scale.
///
/// The scale axis is first scanned log-spaced across the configured bracket;
/// bisection runs between the first adjacent pair of finite peak values with
/// opposite signs. Kernels can overflow at extreme scales, so non-finite
/// samples are skipped rather than treated as candidates.
pub fn generalized_kkr_refine(
    z: &Knowledge,
    kernel: &KernelSpec,
    target_peak: f64,
    eps: f64,
    cfg: &BisectionConfig,
) -> Result<GeneralizedKkrOutcome> {
    validate_target_peak(target_peak, z.class_count())?;
    cfg.validate()?;
    if !(eps > 0.0) {
        return Err(Error::InvalidTarget(format!(
            "tolerance must be positive, got {eps}"
        )));
    }

    let p = softmax(z);
    let probs = p.probs().to_vec();
    let v_max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = eps / 2.0;

    let peak_gap = |scale: f64| -> f64 {
        match kernel_map(kernel, &probs, v_max, scale) {
            Some(mapped) => mapped.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - target_peak,
            None => f64::NAN,
        }
    };

    // Scan for a sign change over finite samples.
    let ratio = cfg.upper / cfg.lower;
    let mut prev: Option<(f64, f64)> = None;
    let mut bracket: Option<(f64, f64)> = None;
    for i in 0..SCAN_POINTS {
        let t = cfg.lower * ratio.powf(i as f64 / (SCAN_POINTS - 1) as f64);
        let gap = peak_gap(t);
        if !gap.is_finite() {
            continue;
        }
        if gap.abs() < tol {
            let mapped = kernel_map(kernel, &probs, v_max, t).expect("finite gap implies finite map");
            return Ok(GeneralizedKkrOutcome {
                refined: ProbVector::from_normalized(mapped),
                scale: t,
                iterations: 0,
            });
        }
        if let Some((t_prev, gap_prev)) = prev {
            if gap_prev.signum() != gap.signum() {
                bracket = Some((t_prev, t));
                break;
            }
        }
        prev = Some((t, gap));
    }

    let (lo, hi) = bracket.ok_or_else(|| {
        Error::BracketFailure(format!(
            "peak gap for kernel `{}` never changes sign over [{}, {}] \
             (target {target_peak} unreachable for this input)",
            kernel.name(),
            cfg.lower,
            cfg.upper
        ))
    })?;

    let search = BisectionConfig {
        lower: lo,
        upper: hi,
        max_expand: 0,
        f_tol: tol,
        max_iters: cfg.max_iters,
    };
    let found = bisection_root(peak_gap, &search)?;
    let mapped =
        kernel_map(kernel, &probs, v_max, found.root).expect("root had a finite gap value");
    Ok(GeneralizedKkrOutcome {
        refined: ProbVector::from_normalized(mapped),
        scale: found.root,
        iterations: found.iterations,
    })
}
