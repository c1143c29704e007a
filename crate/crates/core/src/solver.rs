//! Bracketed bisection for monotone scalar functions.
//!
//! Every inverse in the channel model (Q-function, required SNR, coverage
//! radius, minimum latency) is a root of a monotone function, so a plain
//! bisection with an explicit sign check is all that is needed.

use crate::error::{Error, Result};

/// Stopping rule for [`bisect`].
#[derive(Clone, Copy, Debug)]
pub enum Tolerance {
    /// Stop once the bracket width is below this value.
    Absolute(f64),
    /// Stop once the bracket width is below `tol * max(|lo|, |hi|)`.
    Relative(f64),
}

impl Tolerance {
    fn converged(self, lo: f64, hi: f64) -> bool {
        let width = (hi - lo).abs();
        match self {
            Tolerance::Absolute(tol) => width < tol,
            Tolerance::Relative(tol) => width <= tol * lo.abs().max(hi.abs()),
        }
    }
}

const MAX_ITERATIONS: usize = 2000;

/// Finds `x` in `[lo, hi]` with `g(x) = 0` by bisection.
///
/// `g(lo)` and `g(hi)` must have opposite signs (or one of them be zero).
/// Returns the midpoint of the final bracket.
pub fn bisect<F>(mut g: F, mut lo: f64, mut hi: f64, tol: Tolerance) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::Solver(format!("invalid bracket [{lo}, {hi}]")));
    }
    let mut g_lo = g(lo);
    let g_hi = g(hi);
    if g_lo.is_nan() || g_hi.is_nan() {
        return Err(Error::Solver("objective is NaN at bracket end".into()));
    }
    if g_lo == 0.0 {
        return Ok(lo);
    }
    if g_hi == 0.0 {
        return Ok(hi);
    }
    if g_lo.signum() == g_hi.signum() {
        return Err(Error::Solver(format!(
            "no sign change on [{lo}, {hi}]: g(lo)={g_lo}, g(hi)={g_hi}"
        )));
    }
    for _ in 0..MAX_ITERATIONS {
        if tol.converged(lo, hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // bracket collapsed to adjacent floats
            break;
        }
        let g_mid = g(mid);
        if g_mid.is_nan() {
            return Err(Error::Solver(format!("objective is NaN at {mid}")));
        }
        if g_mid == 0.0 {
            return Ok(mid);
        }
        if g_mid.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
