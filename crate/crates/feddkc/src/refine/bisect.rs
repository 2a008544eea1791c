//! Bracketed scalar root finding with automatic upper-bound expansion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bracket and stopping parameters for [`bisection_root`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectionConfig {
    /// Initial lower bound; must be positive (temperatures and kernel scales
    /// are positive parameters).
    pub lower: f64,
    /// Initial upper bound.
    pub upper: f64,
    /// How many times the upper bound may double while hunting for a sign
    /// change. A root is known to exist for the functions searched here but
    /// its location is input-dependent, so expansion stands in for a
    /// problem-specific bracket.
    pub max_expand: usize,
    /// Stop when |f(x)| drops below this. For entropy targeting this is
    /// epsilon/2.
    pub f_tol: f64,
    pub max_iters: usize,
}

impl Default for BisectionConfig {
    fn default() -> Self {
        Self {
            lower: 1e-6,
            upper: 1e6,
            max_expand: 40,
            f_tol: 5e-4,
            max_iters: 200,
        }
    }
}

impl BisectionConfig {
    /// Default bracket with the stopping tolerance set to `eps / 2`.
    pub fn with_half_tolerance(eps: f64) -> Self {
        Self {
            f_tol: eps / 2.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower > 0.0) {
            return Err(Error::InvalidTarget(format!(
                "bisection lower bound must be positive, got {}",
                self.lower
            )));
        }
        if !(self.upper > self.lower) {
            return Err(Error::InvalidTarget(format!(
                "bisection upper bound {} must exceed lower bound {}",
                self.upper, self.lower
            )));
        }
        if !(self.f_tol > 0.0) {
            return Err(Error::InvalidTarget(format!(
                "bisection tolerance must be positive, got {}",
                self.f_tol
            )));
        }
        Ok(())
    }
}

/// Root plus the search statistics the iteration-count contract is stated on.
#[derive(Debug, Clone, Copy)]
pub struct Bisection {
    pub root: f64,
    pub f_root: f64,
    /// Midpoint evaluations performed.
    pub iterations: usize,
    /// Upper-bound doublings performed before the bracket held.
    pub expansions: usize,
    /// Bracket [lo, hi] at termination.
    pub bracket: (f64, f64),
}

/// Finds x in [lo, hi] with |f(x)| < `f_tol`.
///
/// If f(lo) and f(hi) share a sign, hi doubles up to `max_expand` times; if
/// no sign change appears the search fails with `BracketFailure`. Hitting the
/// iteration cap yields `ToleranceNotMet` carrying the last midpoint.
pub fn bisection_root<F: FnMut(f64) -> f64>(mut f: F, cfg: &BisectionConfig) -> Result<Bisection> {
    cfg.validate()?;
    let mut lo = cfg.lower;
    let mut hi = cfg.upper;
    let mut flo = f(lo);
    let mut fhi = f(hi);
    if !flo.is_finite() || !fhi.is_finite() {
        return Err(Error::BracketFailure(format!(
            "non-finite endpoint values f({lo})={flo}, f({hi})={fhi}"
        )));
    }

    let mut expansions = 0;
    while flo.signum() == fhi.signum() && flo.abs() >= cfg.f_tol && fhi.abs() >= cfg.f_tol {
        if expansions == cfg.max_expand {
            return Err(Error::BracketFailure(format!(
                "no sign change in [{}, {}] after {} expansions",
                cfg.lower, hi, expansions
            )));
        }
        hi *= 2.0;
        fhi = f(hi);
        expansions += 1;
        if !fhi.is_finite() {
            return Err(Error::BracketFailure(format!(
                "non-finite value f({hi})={fhi} during expansion"
            )));
        }
    }

    if flo.abs() < cfg.f_tol {
        return Ok(Bisection {
            root: lo,
            f_root: flo,
            iterations: 0,
            expansions,
            bracket: (lo, hi),
        });
    }
    if fhi.abs() < cfg.f_tol {
        return Ok(Bisection {
            root: hi,
            f_root: fhi,
            iterations: 0,
            expansions,
            bracket: (lo, hi),
        });
    }

    let mut mid = 0.5 * (lo + hi);
    for iter in 1..=cfg.max_iters {
        mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        if !fmid.is_finite() {
            return Err(Error::BracketFailure(format!(
                "non-finite value f({mid})={fmid} inside bracket"
            )));
        }
        if fmid.abs() < cfg.f_tol {
            return Ok(Bisection {
                root: mid,
                f_root: fmid,
                iterations: iter,
                expansions,
                bracket: (lo, hi),
            });
        }
        if fmid.signum() == flo.signum() {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
    }
    Err(Error::ToleranceNotMet { best: mid })
}
