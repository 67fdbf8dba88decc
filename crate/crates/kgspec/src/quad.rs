//! Adaptive Gauss–Kronrod quadrature.
//!
//! A 7/15 Gauss–Kronrod pair on a worst-interval-first subdivision queue.
//! Plenty for the smooth coefficient integrands in this crate; intervals that
//! refuse to converge are reported with their endpoints so the caller can see
//! where the integrand is misbehaving.

use crate::error::{KgError, Result};
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Kronrod abscissae for [-1, 1]; the Gauss points are every other entry.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_2,
    0.949_107_912_342_758_524_5,
    0.864_864_423_359_769_072_8,
    0.741_531_185_599_394_439_9,
    0.586_087_235_467_691_130_3,
    0.405_845_151_377_397_166_9,
    0.207_784_955_007_898_467_6,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963,
    0.063_092_092_629_978_553_291,
    0.104_790_010_322_250_183_84,
    0.140_653_259_715_525_918_74,
    0.169_004_726_639_267_902_83,
    0.190_350_578_064_785_409_91,
    0.204_432_940_075_298_892_41,
    0.209_482_141_084_727_828_11,
];

const WG: [f64; 4] = [
    0.129_484_966_168_869_693_27,
    0.279_705_391_489_276_667_9,
    0.381_830_050_505_118_944_95,
    0.417_959_183_673_469_387_76,
];

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub abs_err: f64,
    pub subdivisions: usize,
}

fn gk15<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> (f64, f64) {
    let c = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = f(c);
    let mut resk = WGK[7] * fc;
    let mut resg = WG[3] * fc;
    for j in 0..7 {
        let x = half * XGK[j];
        let fsum = f(c - x) + f(c + x);
        resk += WGK[j] * fsum;
        if j % 2 == 1 {
            resg += WG[j / 2] * fsum;
        }
    }
    let value = resk * half;
    // |K - G| is a conservative error proxy for the Kronrod value; the true
    // error of `value` is usually orders of magnitude below it.
    let err = ((resk - resg) * half).abs();
    (value, err)
}

#[derive(Debug)]
struct Interval {
    lo: f64,
    hi: f64,
    value: f64,
    err: f64,
}

impl PartialEq for Interval {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err && self.lo == other.lo
    }
}
impl Eq for Interval {}
impl PartialOrd for Interval {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Interval {
    fn cmp(&self, other: &Self) -> Ordering {
        // Worst error first; break ties by left endpoint for determinism.
        self.err
            .total_cmp(&other.err)
            .then_with(|| other.lo.total_cmp(&self.lo))
    }
}

/// Integrate `f` over `[lo, hi]` until the error estimate drops below
/// `max(abs_tol, rel_tol * |I|)` or the subdivision budget is exhausted.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<QuadResult> {
    if lo == hi {
        return Ok(QuadResult { value: 0.0, abs_err: 0.0, subdivisions: 0 });
    }
    let (sign, lo, hi) = if lo < hi { (1.0, lo, hi) } else { (-1.0, hi, lo) };
    let max_subdivisions = 20_000;

    let (v, e) = gk15(&f, lo, hi);
    let mut heap = BinaryHeap::new();
    heap.push(Interval { lo, hi, value: v, err: e });
    let mut total = v;
    let mut total_err = e;
    let mut subdivisions = 0;

    loop {
        if !total.is_finite() || !total_err.is_finite() {
            // Overflowing or NaN panel sums mean a genuinely divergent (or
            // singular) integrand; never report that as convergence.
            let worst = heap.peek().expect("non-empty heap");
            return Err(KgError::QuadratureNoConvergence {
                lo: worst.lo,
                hi: worst.hi,
                err: f64::INFINITY,
                tol: abs_tol,
            });
        }
        if total_err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        if subdivisions >= max_subdivisions {
            let worst = heap.peek().expect("non-empty heap");
            return Err(KgError::QuadratureNoConvergence {
                lo: worst.lo,
                hi: worst.hi,
                err: total_err,
                tol: abs_tol.max(rel_tol * total.abs()),
            });
        }
        let worst = heap.pop().expect("non-empty heap");
        let mid = 0.5 * (worst.lo + worst.hi);
        if mid <= worst.lo || mid >= worst.hi {
            // Interval at floating-point resolution; give up on it.
            return Err(KgError::QuadratureNoConvergence {
                lo: worst.lo,
                hi: worst.hi,
                err: total_err,
                tol: abs_tol.max(rel_tol * total.abs()),
            });
        }
        let (v1, e1) = gk15(&f, worst.lo, mid);
        let (v2, e2) = gk15(&f, mid, worst.hi);
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.err;
        heap.push(Interval { lo: worst.lo, hi: mid, value: v1, err: e1 });
        heap.push(Interval { lo: mid, hi: worst.hi, value: v2, err: e2 });
        subdivisions += 1;
    }

    Ok(QuadResult { value: sign * total, abs_err: total_err, subdivisions })
}

/// Integrate `f` over `[lo, ∞)` through the rational substitution
/// `x = lo + s/(1-s)`.
///
/// The upper endpoint is truncated at `s = 1 - 1e-9`, i.e. `x ≈ lo + 1e9`;
/// integrands must decay at least quadratically for the tail to be
/// negligible, which holds for every integrable tail handled here.
pub fn integrate_to_infinity<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<QuadResult> {
    let g = |s: f64| {
        let om = 1.0 - s;
        let x = lo + s / om;
        let fx = f(x);
        if fx.is_finite() {
            fx / (om * om)
        } else {
            0.0
        }
    };
    integrate(g, 0.0, 1.0 - 1e-9, rel_tol, abs_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polynomial_is_reproduced_to_tolerance() {
        let r = integrate(|x| x * x * x - 2.0 * x + 1.0, -1.0, 3.0, 1e-12, 1e-14).unwrap();
        // Antiderivative x^4/4 - x^2 + x evaluated on [-1, 3].
        assert_relative_eq!(r.value, 16.0, max_relative = 1e-12);
    }

    #[test]
    fn oscillatory_integrand_converges() {
        let r = integrate(|x| (10.0 * x).sin(), 0.0, 2.0, 1e-12, 1e-14).unwrap();
        let exact = (1.0 - (20.0_f64).cos()) / 10.0;
        assert_relative_eq!(r.value, exact, max_relative = 1e-10);
    }

    #[test]
    fn tail_integral_matches_closed_form() {
        // ∫_1^∞ x^{-3} dx = 1/2.
        let r = integrate_to_infinity(|x| x.powi(-3), 1.0, 1e-11, 1e-13).unwrap();
        assert_relative_eq!(r.value, 0.5, max_relative = 1e-9);
    }

    #[test]
    fn reversed_limits_change_sign() {
        let a = integrate(|x| x.exp(), 0.0, 1.0, 1e-12, 1e-14).unwrap();
        let b = integrate(|x| x.exp(), 1.0, 0.0, 1e-12, 1e-14).unwrap();
        assert_relative_eq!(a.value, -b.value, max_relative = 1e-13);
    }

    #[test]
    fn endpoint_singularity_is_reported() {
        let err = integrate(|x| 1.0 / x, 0.0, 1.0, 1e-12, 1e-14);
        assert!(matches!(err, Err(KgError::QuadratureNoConvergence { .. })));
    }
}
