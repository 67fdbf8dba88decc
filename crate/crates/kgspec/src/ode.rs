//! Embedded Runge–Kutta integration (Dormand–Prince 5(4)).
//!
//! The stepper works on fixed-size state arrays, lands exactly on a caller
//! supplied list of sample times, and accepts a per-step cap on the step
//! size.  The cap is how oscillatory systems keep the stage values honest:
//! callers pass a fraction of the local oscillation period so that the
//! embedded error estimate is always evaluated on resolved phases.

use crate::error::{KgError, Result};

/// Tolerances and limits for one integration.
#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Initial step; `None` picks a conservative guess.
    pub h_init: Option<f64>,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rel_tol: 1e-10, abs_tol: 1e-12, h_init: None, max_steps: 50_000_000 }
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = B1 - 5179.0 / 57600.0;
const E3: f64 = B3 - 7571.0 / 16695.0;
const E4: f64 = B4 - 393.0 / 640.0;
const E5: f64 = B5 + 92097.0 / 339200.0;
const E6: f64 = B6 - 187.0 / 2100.0;
const E7: f64 = -1.0 / 40.0;

/// Integrate `y' = rhs(t, y)` from `t0` to `t1` (`t1 > t0`).
///
/// `samples` must be sorted, strictly inside `(t0, t1]`; `observe` fires with
/// the exact sample time and the state there (the stepper shortens steps to
/// land on each sample, so no interpolation is involved).  `h_cap` bounds the
/// next step from the current state; return `f64::INFINITY` for no cap.
pub fn integrate<const N: usize>(
    mut rhs: impl FnMut(f64, &[f64; N], &mut [f64; N]),
    t0: f64,
    t1: f64,
    y0: [f64; N],
    opts: &OdeOptions,
    mut h_cap: impl FnMut(f64, &[f64; N]) -> f64,
    samples: &[f64],
    mut observe: impl FnMut(f64, &[f64; N]),
) -> Result<[f64; N]> {
    debug_assert!(samples.windows(2).all(|w| w[0] < w[1]));
    if t1 <= t0 {
        return Err(KgError::InvalidParameter(format!(
            "integration range is empty: [{t0}, {t1}]"
        )));
    }

    let mut t = t0;
    let mut y = y0;
    let mut k1 = [0.0; N];
    rhs(t, &y, &mut k1);
    let mut next_sample = 0usize;
    while next_sample < samples.len() && samples[next_sample] <= t0 {
        next_sample += 1;
    }

    let span = t1 - t0;
    let mut h = opts.h_init.unwrap_or(1e-4 * span).min(span);
    let mut rejected = false;

    let mut k2 = [0.0; N];
    let mut k3 = [0.0; N];
    let mut k4 = [0.0; N];
    let mut k5 = [0.0; N];
    let mut k6 = [0.0; N];
    let mut k7 = [0.0; N];
    let mut ytmp = [0.0; N];
    let mut ynew = [0.0; N];

    for _step in 0..opts.max_steps {
        if t >= t1 {
            return Ok(y);
        }
        let cap = h_cap(t, &y);
        h = h.min(cap);
        // Land exactly on the next sample time and the right endpoint.
        let target = if next_sample < samples.len() { samples[next_sample] } else { t1 };
        let mut landing = false;
        if t + h >= target - 1e-14 * (1.0 + target.abs()) {
            h = target - t;
            landing = true;
        }
        if h <= 1e-15 * (1.0 + t.abs()) {
            return Err(KgError::StepUnderflow { t, h });
        }

        for i in 0..N {
            ytmp[i] = y[i] + h * A21 * k1[i];
        }
        rhs(t + h / 5.0, &ytmp, &mut k2);
        for i in 0..N {
            ytmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        rhs(t + 3.0 * h / 10.0, &ytmp, &mut k3);
        for i in 0..N {
            ytmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        rhs(t + 4.0 * h / 5.0, &ytmp, &mut k4);
        for i in 0..N {
            ytmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        rhs(t + 8.0 * h / 9.0, &ytmp, &mut k5);
        for i in 0..N {
            ytmp[i] =
                y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        rhs(t + h, &ytmp, &mut k6);
        for i in 0..N {
            ynew[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        rhs(t + h, &ynew, &mut k7);

        let mut err_sq = 0.0;
        for i in 0..N {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = opts.abs_tol + opts.rel_tol * y[i].abs().max(ynew[i].abs());
            err_sq += (e / scale) * (e / scale);
        }
        let err = (err_sq / N as f64).sqrt();

        if err <= 1.0 {
            t += h;
            y = ynew;
            k1 = k7;
            if landing {
                t = target;
                if next_sample < samples.len() && target == samples[next_sample] {
                    observe(target, &y);
                    next_sample += 1;
                }
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(KgError::NonFinite { t, xi: f64::NAN });
            }
            let grow = if rejected { 1.0 } else { 5.0 };
            h *= (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, grow);
            rejected = false;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            rejected = true;
        }
    }
    Err(KgError::InvalidParameter(format!(
        "ODE step budget exhausted at t = {t:.6e} (target {t1:.6e})"
    )))
}

/// Convenience wrapper collecting the state at each sample time.
pub fn integrate_collect<const N: usize>(
    rhs: impl FnMut(f64, &[f64; N], &mut [f64; N]),
    t0: f64,
    t1: f64,
    y0: [f64; N],
    opts: &OdeOptions,
    h_cap: impl FnMut(f64, &[f64; N]) -> f64,
    samples: &[f64],
) -> Result<Vec<(f64, [f64; N])>> {
    let mut out = Vec::with_capacity(samples.len());
    integrate(rhs, t0, t1, y0, opts, h_cap, samples, |t, y| out.push((t, *y)))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential_growth_matches_closed_form() {
        let opts = OdeOptions::default();
        let y = integrate(
            |_t, y: &[f64; 1], dy| dy[0] = y[0],
            0.0,
            2.0,
            [1.0],
            &opts,
            |_, _| f64::INFINITY,
            &[],
            |_, _| {},
        )
        .unwrap();
        assert_relative_eq!(y[0], 2.0_f64.exp(), max_relative = 1e-9);
    }

    #[test]
    fn harmonic_oscillator_over_many_periods() {
        let omega = 5.0;
        let opts = OdeOptions { rel_tol: 1e-11, abs_tol: 1e-13, ..Default::default() };
        let y = integrate(
            |_t, y: &[f64; 2], dy| {
                dy[0] = y[1];
                dy[1] = -omega * omega * y[0];
            },
            0.0,
            40.0,
            [1.0, 0.0],
            &opts,
            |_, _| f64::INFINITY,
            &[],
            |_, _| {},
        )
        .unwrap();
        assert_relative_eq!(y[0], (omega * 40.0_f64).cos(), epsilon = 1e-6);
        assert_relative_eq!(y[1], -omega * (omega * 40.0_f64).sin(), epsilon = 2e-5);
    }

    #[test]
    fn samples_are_hit_exactly() {
        let opts = OdeOptions::default();
        let samples = [0.25, 0.5, 1.0, 1.5];
        let mut seen = Vec::new();
        integrate(
            |t, _y: &[f64; 1], dy| dy[0] = 2.0 * t,
            0.0,
            1.5,
            [0.0],
            &opts,
            |_, _| f64::INFINITY,
            &samples,
            |t, y| seen.push((t, y[0])),
        )
        .unwrap();
        assert_eq!(seen.len(), samples.len());
        for ((t, v), s) in seen.iter().zip(samples.iter()) {
            assert_eq!(t, s);
            assert_relative_eq!(*v, s * s, epsilon = 1e-10);
        }
    }

    #[test]
    fn step_cap_is_respected() {
        let opts = OdeOptions::default();
        let mut step_starts: Vec<f64> = Vec::new();
        integrate(
            |_t, _y: &[f64; 1], dy| dy[0] = 1.0,
            0.0,
            1.0,
            [0.0],
            &opts,
            |t, _| {
                step_starts.push(t);
                0.01
            },
            &[],
            |_, _| {},
        )
        .unwrap();
        // `h_cap` observes every attempted step start; consecutive accepted
        // starts can therefore never be farther apart than the cap.
        let max_dt = step_starts
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0_f64, f64::max);
        assert!(max_dt <= 0.01 + 1e-12, "max step {max_dt}");
    }
}
