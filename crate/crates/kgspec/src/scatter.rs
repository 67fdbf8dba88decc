//! Scattering diagnostics: fundamental solutions in both zones, the mass
//! perturbation series, the wave operator on a frequency-truncated subspace,
//! and the asymptotic-equivalence discrepancy against the free wave.
//!
//! All first-order systems here use the symmetrized derivative
//! `D_t = (1/i) ∂_t`. In the hyperbolic zone the weighted pair
//! `U_W = (a|ξ|û, D_tû)` is mixed into characteristic variables
//! `U⁽⁰⁾ = M⁻¹U_W`, whose flow factors as `E_{a,m} = E_a · Q`:
//!
//! * `E_a` solves the mass-free system `D_tE_a = (D + R_a)E_a` with
//!   `D = diag(a|ξ|, −a|ξ|)` and the antidiagonal speed coupling `R_a`; its
//!   determinant is `a(t)/a(s)` exactly, so the condition number stays
//!   bounded while the norm grows like `√(a(t)/a(s))`.
//! * `Q` solves `D_tQ = P Q` with `P = E_a⁻¹ R_{a,m} E_a`, a rank-one
//!   matrix of norm at most `cond(E_a)·m²/(a|ξ|)`; when `(A/a)m²` is
//!   integrable the limit `Q(∞)` exists and defines the wave operator.
//!
//! `E_a` is marched in a phase-factored form: the oscillation `e^{±iφ}`,
//! `φ′ = a|ξ|`, and the growth `√(a(t)/a(s))` are carried analytically and
//! only the slowly varying mixing factor is integrated, so step sizes are
//! set by the speed variation, not by stiffness of the growth.
//!
//! In the pseudodifferential zone `A|ξ| ≤ N` the regularized symbol
//! `h = (a²|ξ|² + N²η²)^{1/2}` replaces `a|ξ|` and the full system for
//! `U = (1/√a)(hû, D_tû)` is integrated directly; its solution `E` is
//! bounded there, which is asserted rather than assumed.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::classify::{classify, scattering_integrand, ClassKind, Classification};
use crate::coeffs::{CoefficientProfile, MassFamily};
use crate::error::{KgError, Result};
use crate::linalg::{vec2_norm_sqr, C64, Mat2};
use crate::modes::{self, ModeOptions};
use crate::ode::{self, OdeOptions};
use crate::quad;
use crate::zones::{self, ZoneGeometry};

/// Tunables shared by the scattering computations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatterOptions {
    /// Solver tolerance for the marched systems.
    pub tol: f64,
    /// Zone constant `N` in `A|ξ| ⋛ N`.
    pub zone_n: f64,
    /// Step cap as a fraction of the shortest resolved period.
    pub cap_fraction: f64,
    /// Accept `a′ ≡ 0`. The scattering hypotheses ask for strictly
    /// increasing speed; constant-speed oracles are still invaluable in
    /// tests, so the check can be relaxed explicitly.
    pub flat_speed_test: bool,
    /// Samples per fundamental-solution curve.
    pub curve_samples: usize,
    /// Horizon for the classification and the speed-primitive check.
    pub probe_horizon: f64,
    /// First Cauchy window length past the separating time; windows double.
    pub ladder_window: f64,
    /// Give up on the wave-operator limit beyond this time.
    pub max_horizon: f64,
}

impl Default for ScatterOptions {
    fn default() -> Self {
        ScatterOptions {
            tol: 1e-10,
            zone_n: 10.0,
            cap_fraction: 0.25,
            flat_speed_test: false,
            curve_samples: 33,
            probe_horizon: 1e8,
            ladder_window: 1.0,
            max_horizon: 1e6,
        }
    }
}

/// Which system a sampled fundamental solution solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    /// Low-frequency propagator of the `h`-weighted system.
    PseudoE,
    /// Mass-free hyperbolic propagator `E_a`.
    FreeWaveEa,
    /// Truncated perturbation series `Q`.
    PerturbationQ,
    /// Product `E_{a,m} = E_a · Q`, the full hyperbolic propagator.
    ComposedEam,
}

/// A 2×2 matrix solution sampled on `[s, t]`, equal to the identity at the
/// anchor `s`.
#[derive(Debug, Clone, Serialize)]
pub struct FundamentalSolution {
    pub kind: SolutionKind,
    /// Frequency of the mode; `NaN` when the solution was built from an
    /// abstract matrix function rather than a profile.
    pub xi_norm: f64,
    /// Anchor time `s`.
    pub anchor: f64,
    pub times: Vec<f64>,
    pub matrices: Vec<Mat2>,
}

impl FundamentalSolution {
    pub fn final_matrix(&self) -> Mat2 {
        *self.matrices.last().expect("solutions carry at least one sample")
    }

    /// Index of the sample at time `t`, within rounding slack.
    pub fn sample_index(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * (1.0 + t.abs());
        let i = self.times.partition_point(|&s| s < t - tol);
        (i < self.times.len() && (self.times[i] - t).abs() <= tol).then_some(i)
    }
}

/// Truncated iterated-integral solution of `D_tQ = PQ` with a certified
/// remainder.
#[derive(Debug, Clone, Serialize)]
pub struct TruncatedSeries {
    pub solution: FundamentalSolution,
    /// `L^{K+1}/(K+1)! · e^L` with `L = ∫‖P‖`; bounds the distance to the
    /// exact solution in operator norm.
    pub error_bound: f64,
    /// `L = ∫_s^t ‖P‖`.
    pub p_integral: f64,
    /// Change of the endpoint value under the last grid refinement.
    pub grid_error: f64,
}

/// Converged wave-operator data for a single frequency.
#[derive(Debug, Clone, Serialize)]
pub struct WaveOperatorSample {
    pub xi_norm: f64,
    /// Separating time `θ_{|ξ|}`; the march starts there.
    pub theta: f64,
    /// `Q(∞, θ, ξ)` to within the Cauchy tolerance.
    pub q_limit: Mat2,
    pub times: Vec<f64>,
    /// `‖Q(t) − Q_limit‖` at each sample.
    pub residual: Vec<f64>,
    /// Remaining mass `∫_t^∞ (A/a) m² dτ` at each sample (tail integral by
    /// quadrature plus tail-exponent extrapolation).
    pub bound: Vec<f64>,
    /// `‖Q(t)‖` at each sample; stays below `exp(∫‖P‖)`.
    pub q_norm: Vec<f64>,
    /// Running `∫_θ^t ‖P‖`.
    pub p_integral: Vec<f64>,
    /// `max residual/bound` past the convergence onset.
    pub residual_factor: f64,
    /// First sample from which the residual is non-increasing.
    pub onset_index: usize,
    /// Last Cauchy increment of the ladder.
    pub last_increment: f64,
    /// Fitted log-log decay rate of the bound curve.
    pub tail_exponent: f64,
    /// Largest value of `√a·∫₀√a / A` seen on the probe window.
    pub condition_constant: f64,
}

impl WaveOperatorSample {
    /// Fitted log-log slope of the residual curve, with the fit residual.
    ///
    /// Samples below the limit-proximity floor (dominated by the truncation
    /// of the ladder itself) are excluded; `None` when too few remain.
    pub fn residual_slope(&self) -> Option<(f64, f64)> {
        let floor = (10.0 * self.last_increment).max(1e-13 * (1.0 + self.q_limit.op_norm()));
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in self.onset_index..self.times.len() {
            if self.residual[i] > floor {
                xs.push((1.0 + self.times[i]).ln());
                ys.push(self.residual[i].ln());
            }
        }
        sloped_fit(&xs, &ys)
    }

    /// Fitted log-log slope of the bound curve.
    pub fn bound_slope(&self) -> Option<(f64, f64)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in self.onset_index..self.times.len() {
            if self.bound[i] > 1e-300 {
                xs.push((1.0 + self.times[i]).ln());
                ys.push(self.bound[i].ln());
            }
        }
        sloped_fit(&xs, &ys)
    }
}

/// Scattering-class certificate for a profile: classification plus the
/// numerically validated speed-primitive inequality `√a·∫₀√a ≲ A`.
#[derive(Debug, Clone, Serialize)]
pub struct ScatteringFrame {
    pub classification: Classification,
    /// `sup_t √a·∫₀ᵗ√a / A(t)` over the probe window.
    pub condition_constant: f64,
    /// Late-time log-log trend of that ratio; positive means still growing.
    pub condition_trend: f64,
    /// Probe horizon actually used.
    pub horizon: f64,
}

/// Discrepancy between a solution and its free-wave comparison.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceCurve {
    pub times: Vec<f64>,
    /// `(1/√a)‖(a|ξ|v̂, D_tv̂) − (h û, D_tû)‖` assembled in `ℓ²` over the
    /// frequency grid.
    pub discrepancy: Vec<f64>,
    /// The same, per frequency.
    pub per_mode: Vec<Vec<f64>>,
    /// Free-wave data `(v̂₀, v̂₁)` produced by the wave operator.
    pub wave_data: Vec<(C64, C64)>,
    /// Wave-operator matrix per frequency.
    pub w_plus: Vec<Mat2>,
}

/// Mixing matrix from characteristic variables to the weighted pair
/// `(a|ξ|û, D_tû)`; its columns are the two characteristic directions.
pub fn mixing_matrix() -> Mat2 {
    Mat2::from_real(1.0, -1.0, 1.0, 1.0)
}

pub fn mixing_inverse() -> Mat2 {
    Mat2::from_real(0.5, 0.5, -0.5, 0.5)
}

/// Mass coupling in characteristic variables,
/// `(m²/(2a|ξ|))·[[1, −1], [1, −1]]`; nilpotent, with operator norm
/// `m²/(a|ξ|)`.
pub fn r_mass_matrix(profile: &CoefficientProfile, t: f64, xi_norm: f64) -> Mat2 {
    let m = profile.m(t);
    let r = 0.5 * m * m / (profile.a(t) * xi_norm);
    Mat2::from_real(r, -r, r, -r)
}

fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

fn mat_of(y: &[f64]) -> Mat2 {
    Mat2::new(
        C64::new(y[0], y[1]),
        C64::new(y[2], y[3]),
        C64::new(y[4], y[5]),
        C64::new(y[6], y[7]),
    )
}

fn solver_opts(tol: f64) -> OdeOptions {
    let rel = (0.1 * tol).clamp(1e-13, 1e-7);
    OdeOptions { rel_tol: rel, abs_tol: 1e-2 * rel, h_init: None, max_steps: 50_000_000 }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let mut v: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    v[0] = lo;
    *v.last_mut().unwrap() = hi;
    v
}

fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let (l, h) = (lo.ln(), hi.ln());
    let mut v: Vec<f64> = (0..n)
        .map(|i| (l + (h - l) * i as f64 / (n - 1) as f64).exp())
        .collect();
    v[0] = lo;
    *v.last_mut().unwrap() = hi;
    v
}

/// Least-squares line through `(xs, ys)`; returns `(slope, rms residual)`.
/// `None` when fewer than five points or less than half a decade of spread.
fn sloped_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 5 {
        return None;
    }
    let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if spread < 0.5 {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let mut ss = 0.0;
    for i in 0..n {
        let r = ys[i] - my - slope * (xs[i] - mx);
        ss += r * r;
    }
    Some((slope, (ss / nf).sqrt()))
}

fn speed_increasing_on(profile: &CoefficientProfile, ts: &[f64], flat_ok: bool) -> Result<()> {
    for &t in ts {
        let d = profile.a1(t);
        if d < 0.0 {
            return Err(KgError::InvalidProfile(format!(
                "the speed must be non-decreasing, but a'({t:.4}) = {d:.3e}"
            )));
        }
        if d == 0.0 && !flat_ok {
            return Err(KgError::InvalidProfile(format!(
                "a'({t:.4}) vanishes; the scattering hypotheses need strictly increasing \
                 speed (set flat_speed_test to run constant-speed oracles)"
            )));
        }
    }
    Ok(())
}

/// March the phase-factored mass-free system and reconstruct `E_a` at the
/// requested times (sorted, within `[s, t]`; entries at `s` map to the
/// identity).
fn ea_march(
    profile: &CoefficientProfile,
    s: f64,
    t: f64,
    xi: f64,
    opts: &ScatterOptions,
    wanted: &[f64],
) -> Result<(Vec<f64>, Vec<Mat2>)> {
    let a_s = profile.a(s);
    let mut times = Vec::with_capacity(wanted.len());
    let mut mats = Vec::with_capacity(wanted.len());
    let mut inner = Vec::new();
    for &w in wanted {
        if w <= s {
            times.push(s);
            mats.push(Mat2::identity());
        } else {
            inner.push(w);
        }
    }
    if inner.is_empty() {
        return Ok((times, mats));
    }

    let rhs = |tau: f64, y: &[f64; 9], dy: &mut [f64; 9]| {
        let a = profile.a(tau);
        let c = 0.5 * profile.a1(tau) / a;
        let (s2, c2) = (2.0 * y[8]).sin_cos();
        let e2 = C64::new(c2, s2);
        let f00 = C64::new(y[0], y[1]);
        let f01 = C64::new(y[2], y[3]);
        let f10 = C64::new(y[4], y[5]);
        let f11 = C64::new(y[6], y[7]);
        let d00 = -c * e2.conj() * f10;
        let d01 = -c * e2.conj() * f11;
        let d10 = -c * e2 * f00;
        let d11 = -c * e2 * f01;
        *dy = [d00.re, d00.im, d01.re, d01.im, d10.re, d10.im, d11.re, d11.im, a * xi];
    };
    let cap = |tau: f64, _y: &[f64; 9]| {
        let a = profile.a(tau);
        let osc = (a * xi).max(1e-300);
        let mix = (0.5 * profile.a1(tau) / a).abs().max(1e-300);
        (PI * opts.cap_fraction / osc).min(0.5 / mix)
    };
    let y0 = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    ode::integrate(rhs, s, t, y0, &solver_opts(opts.tol), cap, &inner, |tau, y| {
        let r = (profile.a(tau) / a_s).sqrt();
        let e1 = C64::new(y[8].cos(), y[8].sin());
        let f = mat_of(&y[..8]);
        times.push(tau);
        mats.push(Mat2::new(r * e1 * f.a, r * e1 * f.b, r * e1.conj() * f.c, r * e1.conj() * f.d));
    })?;
    Ok((times, mats))
}

/// March the `h`-weighted low-frequency system `∂_tE = iÃE` directly.
fn pseudo_march(
    profile: &CoefficientProfile,
    s: f64,
    t: f64,
    xi: f64,
    opts: &ScatterOptions,
    wanted: &[f64],
) -> Result<(Vec<f64>, Vec<Mat2>)> {
    let n = opts.zone_n;
    let mut times = Vec::with_capacity(wanted.len());
    let mut mats = Vec::with_capacity(wanted.len());
    let mut inner = Vec::new();
    for &w in wanted {
        if w <= s {
            times.push(s);
            mats.push(Mat2::identity());
        } else {
            inner.push(w);
        }
    }
    if inner.is_empty() {
        return Ok((times, mats));
    }

    let rhs = |tau: f64, y: &[f64; 8], dy: &mut [f64; 8]| {
        let a = profile.a(tau);
        let a1 = profile.a1(tau);
        let m = profile.m(tau);
        let eta = profile.eta(tau);
        let eta1 = eta * (a1 / a - eta);
        let h = (xi * a).hypot(n * eta);
        let h1 = (a * a1 * xi * xi + n * n * eta * eta1) / h;
        let half = 0.5 * a1 / a;
        let b00 = re(h1 / h - half);
        let b01 = C64::new(0.0, h);
        let b10 = C64::new(0.0, (a * a * xi * xi + m * m) / h);
        let b11 = re(-half);
        let e00 = C64::new(y[0], y[1]);
        let e01 = C64::new(y[2], y[3]);
        let e10 = C64::new(y[4], y[5]);
        let e11 = C64::new(y[6], y[7]);
        let d00 = b00 * e00 + b01 * e10;
        let d01 = b00 * e01 + b01 * e11;
        let d10 = b10 * e00 + b11 * e10;
        let d11 = b10 * e01 + b11 * e11;
        *dy = [d00.re, d00.im, d01.re, d01.im, d10.re, d10.im, d11.re, d11.im];
    };
    let cap = |tau: f64, _y: &[f64; 8]| {
        let h = (xi * profile.a(tau)).hypot(n * profile.eta(tau));
        let freq = h.max(profile.angular(tau, xi)).max(1e-300);
        PI * opts.cap_fraction / freq
    };
    let y0 = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    ode::integrate(rhs, s, t, y0, &solver_opts(opts.tol), cap, &inner, |tau, y| {
        times.push(tau);
        mats.push(mat_of(y));
    })?;
    Ok((times, mats))
}

/// Joint march of the phase-factored `E_a` state, the perturbation `Q` and
/// the running `∫‖P‖`. State layout: `F` (8), `φ`, `Q` (8), `∫‖P‖`.
fn joint_march(
    profile: &CoefficientProfile,
    xi: f64,
    from: f64,
    to: f64,
    y0: [f64; 18],
    tol: f64,
    opts: &ScatterOptions,
    wanted: &[f64],
    mut observe: impl FnMut(f64, &[f64; 18]),
) -> Result<[f64; 18]> {
    let rhs = |tau: f64, y: &[f64; 18], dy: &mut [f64; 18]| {
        let a = profile.a(tau);
        let c = 0.5 * profile.a1(tau) / a;
        let m = profile.m(tau);
        let r_amp = 0.5 * m * m / (a * xi);
        let (s1, c1) = y[8].sin_cos();
        let e1 = C64::new(c1, s1);
        let e2 = e1 * e1;
        let f00 = C64::new(y[0], y[1]);
        let f01 = C64::new(y[2], y[3]);
        let f10 = C64::new(y[4], y[5]);
        let f11 = C64::new(y[6], y[7]);
        let d00 = -c * e2.conj() * f10;
        let d01 = -c * e2.conj() * f11;
        let d10 = -c * e2 * f00;
        let d11 = -c * e2 * f01;

        // P = E_a⁻¹ R_{a,m} E_a collapses to a rank-one outer product in the
        // phase variables; the growth factors √(a/a_s) cancel exactly.
        let p = e1 * f00 - e1.conj() * f10;
        let q = e1 * f01 - e1.conj() * f11;
        let w = C64::new(0.0, r_amp);
        let ip00 = -w * q * p;
        let ip01 = -w * q * q;
        let ip10 = w * p * p;
        let ip11 = w * p * q;
        let q00 = C64::new(y[9], y[10]);
        let q01 = C64::new(y[11], y[12]);
        let q10 = C64::new(y[13], y[14]);
        let q11 = C64::new(y[15], y[16]);
        let g00 = ip00 * q00 + ip01 * q10;
        let g01 = ip00 * q01 + ip01 * q11;
        let g10 = ip10 * q00 + ip11 * q10;
        let g11 = ip10 * q01 + ip11 * q11;
        *dy = [
            d00.re, d00.im, d01.re, d01.im, d10.re, d10.im, d11.re, d11.im,
            a * xi,
            g00.re, g00.im, g01.re, g01.im, g10.re, g10.im, g11.re, g11.im,
            r_amp * (p.norm_sqr() + q.norm_sqr()),
        ];
    };
    let cap = |tau: f64, _y: &[f64; 18]| {
        let a = profile.a(tau);
        let osc = (a * xi).max(1e-300);
        let mix = (0.5 * profile.a1(tau) / a).abs().max(1e-300);
        (PI * opts.cap_fraction / osc).min(0.5 / mix)
    };
    ode::integrate(rhs, from, to, y0, &solver_opts(tol), cap, wanted, |tau, y| observe(tau, y))
}

fn hyperbolic_anchor_check(
    profile: &CoefficientProfile,
    s: f64,
    xi: f64,
    opts: &ScatterOptions,
) -> Result<()> {
    let geom = ZoneGeometry::wavefront(opts.zone_n);
    if geom.boundary_value(profile, s, xi) >= opts.zone_n * (1.0 - 1e-9) {
        return Ok(());
    }
    let theta = geom.separating_time(profile, xi).unwrap_or(f64::INFINITY);
    Err(KgError::ZoneViolation { t: s, theta, xi })
}

fn validate_span(s: f64, t: f64, xi: f64) -> Result<()> {
    if !s.is_finite() || !t.is_finite() || s < 0.0 {
        return Err(KgError::InvalidParameter(format!(
            "times must be finite and non-negative, got s = {s}, t = {t}"
        )));
    }
    if t < s {
        return Err(KgError::InvalidParameter(format!(
            "anchor must not exceed the target time, got s = {s} > t = {t}"
        )));
    }
    if !xi.is_finite() || xi < 0.0 {
        return Err(KgError::InvalidParameter(format!("|xi| must be finite and >= 0, got {xi}")));
    }
    Ok(())
}

/// Mass-free hyperbolic propagator `E_a(·, s, ξ)` on `[s, t]`.
///
/// Requires the anchor to sit in the hyperbolic zone and the speed to be
/// non-decreasing on the span (strictly, unless `flat_speed_test`).
pub fn free_wave_fundamental(
    profile: &CoefficientProfile,
    s: f64,
    t: f64,
    xi_norm: f64,
    opts: &ScatterOptions,
) -> Result<FundamentalSolution> {
    validate_span(s, t, xi_norm)?;
    if xi_norm == 0.0 {
        return Err(KgError::InvalidParameter(
            "the hyperbolic propagator needs |xi| > 0".into(),
        ));
    }
    speed_increasing_on(profile, &linspace(s, t.max(s + 1e-6), 33), opts.flat_speed_test)?;
    hyperbolic_anchor_check(profile, s, xi_norm, opts)?;
    if t == s {
        return Ok(FundamentalSolution {
            kind: SolutionKind::FreeWaveEa,
            xi_norm,
            anchor: s,
            times: vec![s],
            matrices: vec![Mat2::identity()],
        });
    }
    let wanted = linspace(s, t, opts.curve_samples.max(2));
    let (times, matrices) = ea_march(profile, s, t, xi_norm, opts, &wanted)?;
    Ok(FundamentalSolution { kind: SolutionKind::FreeWaveEa, xi_norm, anchor: s, times, matrices })
}

/// Low-frequency propagator `E(·, s, ξ)` of the `h`-weighted system on
/// `[s, t]`, valid while `A|ξ| ≤ N`.
pub fn pseudo_fundamental(
    profile: &CoefficientProfile,
    s: f64,
    t: f64,
    xi_norm: f64,
    opts: &ScatterOptions,
) -> Result<FundamentalSolution> {
    validate_span(s, t, xi_norm)?;
    let geom = ZoneGeometry::wavefront(opts.zone_n);
    if geom.boundary_value(profile, t, xi_norm) > opts.zone_n * (1.0 + 1e-9) {
        let theta = geom.separating_time(profile, xi_norm).unwrap_or(f64::INFINITY);
        return Err(KgError::ZoneViolation { t, theta, xi: xi_norm });
    }
    if t == s {
        return Ok(FundamentalSolution {
            kind: SolutionKind::PseudoE,
            xi_norm,
            anchor: s,
            times: vec![s],
            matrices: vec![Mat2::identity()],
        });
    }
    let wanted = linspace(s, t, opts.curve_samples.max(2));
    let (times, matrices) = pseudo_march(profile, s, t, xi_norm, opts, &wanted)?;
    Ok(FundamentalSolution { kind: SolutionKind::PseudoE, xi_norm, anchor: s, times, matrices })
}

/// Full hyperbolic propagator `E_{a,m} = E_a · Q` on `[s, t]`.
pub fn composed_fundamental(
    profile: &CoefficientProfile,
    s: f64,
    t: f64,
    xi_norm: f64,
    opts: &ScatterOptions,
) -> Result<FundamentalSolution> {
    validate_span(s, t, xi_norm)?;
    if xi_norm == 0.0 {
        return Err(KgError::InvalidParameter(
            "the hyperbolic propagator needs |xi| > 0".into(),
        ));
    }
    speed_increasing_on(profile, &linspace(s, t.max(s + 1e-6), 33), opts.flat_speed_test)?;
    hyperbolic_anchor_check(profile, s, xi_norm, opts)?;
    let mut times = vec![s];
    let mut matrices = vec![Mat2::identity()];
    if t > s {
        let a_s = profile.a(s);
        let wanted: Vec<f64> = linspace(s, t, opts.curve_samples.max(2))[1..].to_vec();
        let mut y0 = [0.0; 18];
        y0[0] = 1.0;
        y0[6] = 1.0;
        y0[9] = 1.0;
        y0[15] = 1.0;
        joint_march(profile, xi_norm, s, t, y0, opts.tol, opts, &wanted, |tau, y| {
            let r = (profile.a(tau) / a_s).sqrt();
            let e1 = C64::new(y[8].cos(), y[8].sin());
            let f = mat_of(&y[..8]);
            let ea =
                Mat2::new(r * e1 * f.a, r * e1 * f.b, r * e1.conj() * f.c, r * e1.conj() * f.d);
            times.push(tau);
            matrices.push(ea * mat_of(&y[9..17]));
        })?;
    }
    Ok(FundamentalSolution { kind: SolutionKind::ComposedEam, xi_norm, anchor: s, times, matrices })
}

/// Second-order-seeded Simpson chain: cumulative integral of `f` on a
/// uniform grid with spacing `h`, fourth-order accurate.
fn cumulative_mat(h: f64, f: &[Mat2]) -> Vec<Mat2> {
    let n = f.len();
    let mut c = vec![Mat2::zero(); n];
    if n < 4 {
        for j in 1..n {
            c[j] = c[j - 1] + (f[j - 1] + f[j]).scale(re(0.5 * h));
        }
        return c;
    }
    c[1] = (f[0].scale(re(9.0)) + f[1].scale(re(19.0)) + f[2].scale(re(-5.0)) + f[3])
        .scale(re(h / 24.0));
    for j in 2..n {
        c[j] = c[j - 2] + (f[j - 2] + f[j - 1].scale(re(4.0)) + f[j]).scale(re(h / 3.0));
    }
    c
}

fn cumulative_scalar(h: f64, f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut c = vec![0.0; n];
    if n < 4 {
        for j in 1..n {
            c[j] = c[j - 1] + 0.5 * h * (f[j - 1] + f[j]);
        }
        return c;
    }
    c[1] = h / 24.0 * (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3]);
    for j in 2..n {
        c[j] = c[j - 2] + h / 3.0 * (f[j - 2] + 4.0 * f[j - 1] + f[j]);
    }
    c
}

fn series_pass(
    p: &impl Fn(f64) -> Mat2,
    s: f64,
    t: f64,
    n: usize,
    k_terms: usize,
) -> Result<(Vec<f64>, Vec<Mat2>, f64)> {
    let h = (t - s) / n as f64;
    let mut xs: Vec<f64> = (0..=n).map(|j| s + h * j as f64).collect();
    *xs.last_mut().unwrap() = t;
    let mut pv = Vec::with_capacity(n + 1);
    let mut pn = Vec::with_capacity(n + 1);
    for &x in &xs {
        let m = p(x);
        if !m.is_finite() {
            return Err(KgError::InvalidParameter(format!(
                "matrix function is not finite at t = {x:.6e}"
            )));
        }
        pn.push(m.op_norm());
        pv.push(m);
    }
    let l_end = *cumulative_scalar(h, &pn).last().unwrap();

    let mut acc = vec![Mat2::identity(); n + 1];
    let mut cur = vec![Mat2::identity(); n + 1];
    let mut coef = C64::new(0.0, 1.0);
    for _ in 0..k_terms {
        let g: Vec<Mat2> = (0..=n).map(|j| pv[j] * cur[j]).collect();
        cur = cumulative_mat(h, &g);
        for j in 0..=n {
            acc[j] = acc[j] + cur[j].scale(coef);
        }
        coef *= C64::new(0.0, 1.0);
    }
    Ok((xs, acc, l_end))
}

/// Truncated iterated-integral series for `D_tQ = PQ`,
/// `Q ≈ I + Σ_{k≤K} i^k ∫…∫ P⋯P`, with the remainder bound
/// `L^{K+1}/(K+1)!·e^L`, `L = ∫‖P‖`. Refuses the truncation when the bound
/// exceeds `tol`.
///
/// This is the verification route; production values of `Q` come from
/// direct integration, which is the same solution without the factorial
/// fan-out.
pub fn peano_baker(
    p: impl Fn(f64) -> Mat2,
    s: f64,
    t: f64,
    k_terms: usize,
    tol: f64,
) -> Result<TruncatedSeries> {
    if k_terms == 0 {
        return Err(KgError::InvalidParameter("the series needs at least one term".into()));
    }
    if !s.is_finite() || !t.is_finite() || t < s {
        return Err(KgError::InvalidParameter(format!(
            "need a finite span with s <= t, got [{s}, {t}]"
        )));
    }
    if !(tol > 0.0) {
        return Err(KgError::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    if t == s {
        return Ok(TruncatedSeries {
            solution: FundamentalSolution {
                kind: SolutionKind::PerturbationQ,
                xi_norm: f64::NAN,
                anchor: s,
                times: vec![s],
                matrices: vec![Mat2::identity()],
            },
            error_bound: 0.0,
            p_integral: 0.0,
            grid_error: 0.0,
        });
    }

    let mut n = 256;
    let (mut xs, mut acc, mut l_end) = series_pass(&p, s, t, n, k_terms)?;
    let mut grid_error = f64::INFINITY;
    while n < 16384 {
        n *= 2;
        let (nxs, nacc, nl) = series_pass(&p, s, t, n, k_terms)?;
        grid_error = (*nacc.last().unwrap() - *acc.last().unwrap()).frobenius_norm();
        xs = nxs;
        acc = nacc;
        l_end = nl;
        if grid_error <= 1e-12 {
            break;
        }
    }

    let kk = k_terms as f64;
    let ln_bound =
        (kk + 1.0) * l_end.ln() - (2..=k_terms + 1).map(|j| (j as f64).ln()).sum::<f64>() + l_end;
    let error_bound = if l_end > 0.0 { ln_bound.exp() } else { 0.0 };
    if error_bound > tol {
        return Err(KgError::SeriesTruncation { bound: error_bound, tol, k: k_terms });
    }

    let stride = (xs.len() / 128).max(1);
    let mut times = Vec::new();
    let mut matrices = Vec::new();
    for j in (0..xs.len()).step_by(stride) {
        times.push(xs[j]);
        matrices.push(acc[j]);
    }
    if *times.last().unwrap() != t {
        times.push(t);
        matrices.push(*acc.last().unwrap());
    }
    Ok(TruncatedSeries {
        solution: FundamentalSolution {
            kind: SolutionKind::PerturbationQ,
            xi_norm: f64::NAN,
            anchor: s,
            times,
            matrices,
        },
        error_bound,
        p_integral: l_end,
        grid_error: if grid_error.is_finite() { grid_error } else { 0.0 },
    })
}

/// Verify the scattering frame for a profile: classification, the
/// normalization `a(0) = 1`, and the speed-primitive inequality
/// `√a·∫₀√a ≲ A` on the probe horizon.
pub fn scattering_frame(
    profile: &CoefficientProfile,
    opts: &ScatterOptions,
) -> Result<ScatteringFrame> {
    let a0 = profile.a(0.0);
    if (a0 - 1.0).abs() > 1e-9 {
        return Err(KgError::InvalidProfile(format!(
            "the scattering frame assumes a(0) = 1, got a(0) = {a0:.6}; rescale the profile"
        )));
    }
    let classification = classify(profile, opts.probe_horizon.max(100.0), 0.05)?;
    if classification.kind != ClassKind::Scattering {
        return Err(KgError::ScatteringConditionViolated(format!(
            "profile \"{}\" classifies as {:?}; the free-wave comparison needs the \
             scattering class",
            profile.label(),
            classification.kind
        )));
    }
    let horizon = classification.t_probe.min(1e6);
    let (condition_constant, condition_trend) = speed_primitive_condition(profile, horizon)?;
    if condition_trend > 0.1 {
        return Err(KgError::ScatteringConditionViolated(format!(
            "sqrt(a)*int(sqrt(a))/A grows like t^{condition_trend:.2} on the probe window; \
             stabilized propagator norms are not justified"
        )));
    }
    Ok(ScatteringFrame { classification, condition_constant, condition_trend, horizon })
}

fn speed_primitive_condition(profile: &CoefficientProfile, horizon: f64) -> Result<(f64, f64)> {
    // Stop where the coefficients leave the representable range
    // (exponential speeds overflow near t ≈ 700).
    let mut grid = Vec::with_capacity(160);
    for t in geomspace(1e-2, horizon.max(1.0), 160) {
        if !profile.a(t).is_finite() || !profile.big_a(t).is_finite() {
            break;
        }
        grid.push(t);
    }
    let mut cmax = 0.0f64;
    let mut cum = 0.0;
    let mut prev = 0.0;
    let mut ratios = Vec::with_capacity(grid.len());
    for &t in &grid {
        // Normalize by the right endpoint so exponential speeds stay inside
        // the representable range; a is non-decreasing, so the scaled
        // integrand is at most one.
        let scale = profile.a(t).sqrt();
        cum += scale * quad::integrate(|x| (profile.a(x) / profile.a(t)).sqrt(), prev, t, 1e-9, 1e-14)?.value;
        prev = t;
        let r = cum / profile.big_a(t) * profile.a(t).sqrt();
        ratios.push(r);
        cmax = cmax.max(r);
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &t) in grid.iter().enumerate() {
        if t >= grid.last().unwrap() / 10.0 && ratios[i] > 0.0 {
            xs.push(t.ln());
            ys.push(ratios[i].ln());
        }
    }
    let trend = sloped_fit(&xs, &ys).map(|(s, _)| s).unwrap_or(0.0);
    Ok((cmax, trend))
}

/// Remaining-mass bound `∫_{t_i}^∞ (A/a) m² dτ` at each sample time, plus
/// the fitted decay exponent of that curve. Tail beyond the last sample by
/// exponent extrapolation of the integrand.
fn bound_curve(profile: &CoefficientProfile, times: &[f64]) -> Result<(Vec<f64>, f64)> {
    let g = |t: f64| scattering_integrand(profile, t);
    let gv: Vec<f64> = times.iter().map(|&t| g(t)).collect();
    if gv.iter().all(|&v| v == 0.0) {
        return Ok((vec![0.0; times.len()], 0.0));
    }
    let mut cum = vec![0.0; times.len()];
    for i in 1..times.len() {
        cum[i] =
            cum[i - 1] + quad::integrate(&g, times[i - 1], times[i], 1e-9, 1e-18)?.value;
    }
    let t_last = *times.last().unwrap();
    let g_last = *gv.last().unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        if t >= t_last / 8.0 && gv[i] > 0.0 {
            xs.push((1.0 + t).ln());
            ys.push(gv[i].ln());
        }
    }
    let fit = sloped_fit(&xs, &ys);
    let (tail, exponent) = match fit {
        Some((p, _)) => {
            if p > -1.02 {
                return Err(KgError::ScatteringConditionViolated(format!(
                    "the mass tail (A/a)m^2 ~ (1+t)^{p:.2} is not integrable enough beyond \
                     t = {t_last:.3e}"
                )));
            }
            (g_last * (1.0 + t_last) / (-p - 1.0), p + 1.0)
        }
        None => {
            if g_last == 0.0 {
                (0.0, 0.0)
            } else {
                (quad::integrate_to_infinity(&g, t_last, 1e-8, 1e-14)?.value, 0.0)
            }
        }
    };
    let total = cum[times.len() - 1] + tail;
    let bounds: Vec<f64> = cum.iter().map(|&c| (total - c).max(0.0)).collect();
    Ok((bounds, exponent))
}

fn convergence_onset(residual: &[f64], floor: f64) -> usize {
    let n = residual.len();
    if n == 0 {
        return 0;
    }
    let mut onset = n - 1;
    for i in (0..n - 1).rev() {
        if residual[i + 1] <= residual[i] * 1.05 + floor {
            onset = i;
        } else {
            break;
        }
    }
    onset
}

/// Wave-operator limit `Q(∞, θ_{|ξ|}, ξ)` for one frequency of a scattering
/// profile, with the residual curve and its theoretical bound.
///
/// The flow is marched on doubling Cauchy windows past the separating time
/// until two consecutive increments fall below `tol`.
pub fn wave_operator(
    profile: &CoefficientProfile,
    xi_norm: f64,
    epsilon_cutoff: f64,
    tol: f64,
    opts: &ScatterOptions,
) -> Result<WaveOperatorSample> {
    if !(epsilon_cutoff > 0.0) || !epsilon_cutoff.is_finite() {
        return Err(KgError::InvalidParameter(format!(
            "the frequency cutoff must be positive and finite, got {epsilon_cutoff}"
        )));
    }
    if !xi_norm.is_finite() || xi_norm < epsilon_cutoff * (1.0 - 1e-12) {
        return Err(KgError::InvalidParameter(format!(
            "|xi| = {xi_norm} lies below the cutoff {epsilon_cutoff}"
        )));
    }
    if !(tol > 0.0) {
        return Err(KgError::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    let frame = scattering_frame(profile, opts)?;
    wave_operator_in_frame(profile, xi_norm, tol, opts, &frame)
}

fn wave_operator_in_frame(
    profile: &CoefficientProfile,
    xi: f64,
    tol: f64,
    opts: &ScatterOptions,
    frame: &ScatteringFrame,
) -> Result<WaveOperatorSample> {
    let mut probe = vec![0.0];
    probe.extend(geomspace(1e-3, frame.horizon.min(1e4), 64));
    speed_increasing_on(profile, &probe, opts.flat_speed_test)?;

    let geom = ZoneGeometry::wavefront(opts.zone_n);
    let theta = if geom.boundary_value(profile, 0.0, xi) >= opts.zone_n {
        0.0
    } else {
        geom.separating_time(profile, xi)?
    };

    let mut y = [0.0; 18];
    y[0] = 1.0;
    y[6] = 1.0;
    y[9] = 1.0;
    y[15] = 1.0;
    let mut times = vec![theta];
    let mut q_curve = vec![Mat2::identity()];
    let mut q_norm = vec![1.0];
    let mut p_integral = vec![0.0];
    let mut t_prev = theta;
    let mut q_prev = Mat2::identity();
    let mut window = opts.ladder_window.max(1e-3);
    let mut increment = f64::INFINITY;
    let mut hits = 0u32;
    let mut converged = false;
    while t_prev < opts.max_horizon {
        let t_next = (t_prev + window).min(opts.max_horizon);
        let mut wanted: Vec<f64> =
            (1..=6).map(|j| t_prev + (t_next - t_prev) * j as f64 / 6.0).collect();
        *wanted.last_mut().unwrap() = t_next;
        y = joint_march(profile, xi, t_prev, t_next, y, tol, opts, &wanted, |tau, st| {
            let q = mat_of(&st[9..17]);
            times.push(tau);
            q_norm.push(q.op_norm());
            p_integral.push(st[17]);
            q_curve.push(q);
        })?;
        let q_now = mat_of(&y[9..17]);
        increment = (q_now - q_prev).op_norm();
        q_prev = q_now;
        t_prev = t_next;
        window *= 2.0;
        if increment < tol {
            hits += 1;
            if hits >= 2 || increment == 0.0 {
                converged = true;
                break;
            }
        } else {
            hits = 0;
        }
    }
    if !converged {
        return Err(KgError::Inconclusive(format!(
            "the wave-operator limit is not Cauchy by t = {t_prev:.3e}: last increment \
             {increment:.3e} against tolerance {tol:.3e}; extend max_horizon or relax tol"
        )));
    }
    let q_limit = q_prev;
    let residual: Vec<f64> = q_curve.iter().map(|q| (*q - q_limit).op_norm()).collect();
    let (bound, tail_exponent) = bound_curve(profile, &times)?;

    let onset_floor = 1e-12 * (1.0 + q_limit.op_norm());
    let onset_index = convergence_onset(&residual, onset_floor);
    let mut residual_factor = 0.0f64;
    for i in onset_index..times.len() {
        if bound[i] > 1e-300 {
            residual_factor = residual_factor.max(residual[i] / bound[i]);
        }
    }
    if residual_factor > 1e3 {
        return Err(KgError::FitRejected(format!(
            "the residual exceeds the remaining-mass bound by a factor {residual_factor:.1e}; \
             the fitted tail underestimates the mass decay"
        )));
    }

    Ok(WaveOperatorSample {
        xi_norm: xi,
        theta,
        q_limit,
        times,
        residual,
        bound,
        q_norm,
        p_integral,
        residual_factor,
        onset_index,
        last_increment: increment,
        tail_exponent,
        condition_constant: frame.condition_constant,
    })
}

/// Asymptotic equivalence with the free wave: build comparison data
/// `(a(0)|ξ|v̂₀, D_tv̂(0)) = W₊·(h(0,ξ)û₀, D_tû(0))` per mode, integrate
/// both flows along the probe ladder, and assemble
/// `(1/√a)‖(a|ξ|v̂, D_tv̂) − (h û, D_tû)‖` in `ℓ²` over the grid.
///
/// The curve must decay along the ladder; a flat or growing curve is
/// reported as inconclusive rather than returned silently.
pub fn asymptotic_equivalence(
    profile: &CoefficientProfile,
    data: &[(C64, C64)],
    xi_grid: &[f64],
    t_probe_ladder: &[f64],
    tol: f64,
    opts: &ScatterOptions,
) -> Result<EquivalenceCurve> {
    if xi_grid.is_empty() {
        return Err(KgError::InvalidParameter("the frequency grid is empty".into()));
    }
    if data.len() != xi_grid.len() {
        return Err(KgError::GridMismatch(format!(
            "{} data pairs against {} frequencies",
            data.len(),
            xi_grid.len()
        )));
    }
    for &xi in xi_grid {
        if !xi.is_finite() || xi <= 0.0 {
            return Err(KgError::InvalidParameter(format!(
                "frequencies must be positive and finite, got {xi}"
            )));
        }
    }
    if t_probe_ladder.len() < 4 {
        return Err(KgError::InvalidParameter(
            "the probe ladder needs at least four times".into(),
        ));
    }
    if t_probe_ladder[0] < 0.0
        || t_probe_ladder.iter().any(|t| !t.is_finite())
        || t_probe_ladder.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(KgError::InvalidParameter(
            "the probe ladder must be finite, non-negative and strictly increasing".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(KgError::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }

    let frame = scattering_frame(profile, opts)?;
    let free_profile = CoefficientProfile::new(
        format!("{} [free]", profile.label()),
        profile.speed().clone(),
        MassFamily::Zero,
    )?;
    let t_end = *t_probe_ladder.last().unwrap();
    // The two flows being compared are O(1)-different solutions, so their
    // phase errors do not cancel; march them tighter than the comparison
    // tolerance.
    let mode_opts = ModeOptions {
        tol: (1e-2 * opts.tol).clamp(1e-13, 1e-6),
        zone_n: opts.zone_n,
        cap_fraction: opts.cap_fraction,
        force_direct: false,
        overlap_check: false,
    };
    let a0 = profile.a(0.0);

    let mut per_mode = Vec::with_capacity(xi_grid.len());
    let mut wave_data = Vec::with_capacity(xi_grid.len());
    let mut w_plus = Vec::with_capacity(xi_grid.len());
    let mut sums = vec![0.0f64; t_probe_ladder.len()];
    let mut scale_sq = 0.0f64;

    for (j, &xi) in xi_grid.iter().enumerate() {
        let op = wave_operator_in_frame(profile, xi, tol, opts, &frame)?;
        let theta = op.theta;
        let (e_pd, e_a_back) = if theta > 0.0 {
            let pd = pseudo_march(profile, 0.0, theta, xi, opts, &[theta])?.1[0];
            let fwd = ea_march(profile, 0.0, theta, xi, opts, &[theta])?.1[0];
            // Exact inverse through the adjugate: det E_a = a(θ)/a(0).
            let back = Mat2::new(fwd.d, -fwd.b, -fwd.c, fwd.a).scale(re(a0 / profile.a(theta)));
            (pd, back)
        } else {
            (Mat2::identity(), Mat2::identity())
        };
        let h_theta = zones::symbols(profile, opts.zone_n, theta, xi).h;
        let h_inv = Mat2::diag(re(xi * profile.a(theta) / h_theta), re(1.0));
        let scal = (profile.a(theta) / a0).sqrt();
        let w = (mixing_matrix() * e_a_back * op.q_limit * mixing_inverse() * h_inv * e_pd)
            .scale(re(scal));

        let h0 = zones::symbols(profile, opts.zone_n, 0.0, xi).h;
        let u0 = [re(h0) * data[j].0, C64::new(0.0, -1.0) * data[j].1];
        scale_sq += vec2_norm_sqr(&u0);
        let v0 = w.mul_vec(&u0);
        let v_hat0 = v0[0] / (a0 * xi);
        let v_hat1 = C64::new(0.0, 1.0) * v0[1];

        let traj_u = modes::integrate_mode(profile, xi, data[j], t_end, t_probe_ladder, &mode_opts)?;
        let traj_v =
            modes::integrate_mode(&free_profile, xi, (v_hat0, v_hat1), t_end, t_probe_ladder, &mode_opts)?;
        let mut curve = Vec::with_capacity(t_probe_ladder.len());
        for (i, &t) in t_probe_ladder.iter().enumerate() {
            let a_t = profile.a(t);
            let h_t = zones::symbols(profile, opts.zone_n, t, xi).h;
            let du = re(h_t) * traj_u.u_hat[i] - re(a_t * xi) * traj_v.u_hat[i];
            let dt = traj_u.u_hat_t[i] - traj_v.u_hat_t[i];
            let d = (du.norm_sqr() + dt.norm_sqr()).sqrt() / a_t.sqrt();
            sums[i] += d * d;
            curve.push(d);
        }
        per_mode.push(curve);
        wave_data.push((v_hat0, v_hat1));
        w_plus.push(w);
    }

    let discrepancy: Vec<f64> = sums.iter().map(|&s| s.sqrt()).collect();
    let scale = scale_sq.sqrt().max(1e-300);
    let peak = discrepancy.iter().cloned().fold(0.0f64, f64::max);
    if peak > 1e-12 * scale {
        let q = (discrepancy.len() / 4).max(1);
        let tail_min =
            discrepancy[discrepancy.len() - q..].iter().cloned().fold(f64::INFINITY, f64::min);
        if !(tail_min <= 0.6 * peak) {
            return Err(KgError::Inconclusive(format!(
                "the discrepancy has not decayed across the ladder (peak {peak:.3e}, final \
                 window minimum {tail_min:.3e}); extend t_probe_ladder"
            )));
        }
    }

    Ok(EquivalenceCurve { times: t_probe_ladder.to_vec(), discrepancy, per_mode, wave_data, w_plus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{MassFamily, SpeedFamily};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn profile(label: &str, speed: SpeedFamily, mass: MassFamily) -> CoefficientProfile {
        CoefficientProfile::new(label, speed, mass).unwrap()
    }

    fn flat_opts() -> ScatterOptions {
        ScatterOptions { flat_speed_test: true, ..ScatterOptions::default() }
    }

    fn flat_scattering() -> CoefficientProfile {
        profile(
            "flat-scat",
            SpeedFamily::Polynomial { ell: 0.0 },
            MassFamily::Power { mu0: 1.0, p: -2.0 },
        )
    }

    fn exp_free() -> CoefficientProfile {
        profile("exp-free", SpeedFamily::Exponential { lambda: 1.0 }, MassFamily::Zero)
    }

    #[test]
    fn anchored_solution_starts_at_the_identity() {
        let p = exp_free();
        let opts = ScatterOptions::default();
        let sol = free_wave_fundamental(&p, 3.0, 3.0, 1.0, &opts).unwrap();
        assert_eq!(sol.times, vec![3.0]);
        assert!((sol.final_matrix() - Mat2::identity()).frobenius_norm() == 0.0);

        let sol = free_wave_fundamental(&p, 3.0, 8.0, 1.0, &opts).unwrap();
        assert_eq!(sol.times[0], 3.0);
        assert!((sol.matrices[0] - Mat2::identity()).frobenius_norm() < 1e-14);
        assert_eq!(sol.kind, SolutionKind::FreeWaveEa);
        assert_eq!(sol.sample_index(8.0), Some(sol.times.len() - 1));
    }

    #[test]
    fn flat_speed_propagator_is_unitary_with_unit_norm_ratio() {
        let p = profile("flat-free", SpeedFamily::Polynomial { ell: 0.0 }, MassFamily::Zero);
        let xi = 2.0;
        let sol = free_wave_fundamental(&p, 5.0, 25.0, xi, &flat_opts()).unwrap();
        for (i, &t) in sol.times.iter().enumerate() {
            let e = sol.matrices[i];
            assert!((e.op_norm() - 1.0).abs() < 1e-9, "norm ratio drifts at t = {t}");
            assert!(e.b.norm() < 1e-12 && e.c.norm() < 1e-12);
            let phase = c(0.0, xi * (t - 5.0)).exp();
            assert!((e.a - phase).norm() < 1e-8);
            assert!((e.det() - c(1.0, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn zone_and_monotonicity_preconditions_are_enforced() {
        let grow = profile("lin", SpeedFamily::Polynomial { ell: 1.0 }, MassFamily::Zero);
        let opts = ScatterOptions::default();
        match free_wave_fundamental(&grow, 1.0, 5.0, 1.0, &opts) {
            Err(KgError::ZoneViolation { t, theta, xi }) => {
                assert_eq!(t, 1.0);
                assert_eq!(xi, 1.0);
                assert!((theta - (19.0f64.sqrt() - 1.0)).abs() < 1e-6);
            }
            other => panic!("expected a zone violation, got {other:?}"),
        }

        let flat = profile("flat", SpeedFamily::Polynomial { ell: 0.0 }, MassFamily::Zero);
        assert!(matches!(
            free_wave_fundamental(&flat, 10.0, 12.0, 1.5, &opts),
            Err(KgError::InvalidProfile(_))
        ));

        let dec = profile(
            "dec",
            SpeedFamily::custom(crate::coeffs::CustomSpeed::new("dec", |t| 2.0 - 0.1 * t)),
            MassFamily::Zero,
        );
        assert!(matches!(
            free_wave_fundamental(&dec, 6.0, 9.0, 1.0, &opts),
            Err(KgError::InvalidProfile(_))
        ));

        assert!(matches!(
            free_wave_fundamental(&grow, 9.0, 5.0, 1.0, &opts),
            Err(KgError::InvalidParameter(_))
        ));
        assert!(matches!(
            free_wave_fundamental(&grow, 5.0, 9.0, 0.0, &opts),
            Err(KgError::InvalidParameter(_))
        ));
    }

    #[test]
    fn determinant_follows_the_speed_ratio() {
        let p = exp_free();
        let opts = ScatterOptions::default();
        for &xi in &[0.5, 1.0, 2.0] {
            let theta = (10.0f64 / xi).ln();
            for ds in [0.0, 1.0] {
                for dt in [2.5, 5.0] {
                    let s = theta + ds;
                    let t = s + dt;
                    let sol = free_wave_fundamental(&p, s, t, xi, &opts).unwrap();
                    let det = sol.final_matrix().det();
                    let ratio = (p.a(t) / p.a(s)).recip();
                    assert!(
                        (det * ratio - c(1.0, 0.0)).norm() < 1e-8,
                        "det off at xi = {xi}, s = {s}, t = {t}: {det:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn growth_normalized_norm_stays_bounded() {
        let p = exp_free();
        let sol = free_wave_fundamental(&p, 3.0, 10.0, 1.0, &ScatterOptions::default()).unwrap();
        for (i, &t) in sol.times.iter().enumerate() {
            let e = sol.matrices[i];
            let normalized = e.op_norm() * (p.a(3.0) / p.a(t)).sqrt();
            assert!((0.999..=1.1).contains(&normalized), "normalized norm {normalized} at t = {t}");
            let inv = Mat2::new(e.d, -e.b, -e.c, e.a).scale(re(p.a(3.0) / p.a(t)));
            let cond = e.op_norm() * inv.op_norm();
            assert!(cond < 1.2, "condition number {cond} at t = {t}");
        }
    }

    #[test]
    fn cocycle_composition_matches_the_direct_propagator() {
        let p = exp_free();
        let opts = ScatterOptions::default();
        let r = 10.0f64.ln() + 0.1;
        let (s, t) = (r + 2.0, r + 4.0);
        let e_sr = free_wave_fundamental(&p, r, s, 1.0, &opts).unwrap().final_matrix();
        let e_ts = free_wave_fundamental(&p, s, t, 1.0, &opts).unwrap().final_matrix();
        let e_tr = free_wave_fundamental(&p, r, t, 1.0, &opts).unwrap().final_matrix();
        let diff = (e_ts * e_sr - e_tr).frobenius_norm() / e_tr.frobenius_norm();
        assert!(diff < 1e-8, "cocycle defect {diff}");
    }

    #[test]
    fn pseudo_solution_is_identity_at_the_anchor_and_bounded() {
        let p = flat_scattering();
        let opts = flat_opts();
        let sol = pseudo_fundamental(&p, 0.0, 90.0, 0.1, &opts).unwrap();
        assert_eq!(sol.kind, SolutionKind::PseudoE);
        assert!((sol.matrices[0] - Mat2::identity()).frobenius_norm() < 1e-14);
        for (i, &t) in sol.times.iter().enumerate() {
            assert!(sol.matrices[i].op_norm() < 10.0, "pseudo propagator blows up at t = {t}");
        }

        match pseudo_fundamental(&p, 0.0, 104.0, 0.1, &opts) {
            Err(KgError::ZoneViolation { theta, .. }) => {
                assert!((theta - 99.0).abs() < 1e-6);
            }
            other => panic!("expected a zone violation, got {other:?}"),
        }
    }

    #[test]
    fn pseudo_propagator_matches_the_direct_mode_solution() {
        let p = flat_scattering();
        let opts = flat_opts();
        let xi = 0.1;
        let data = (c(0.8, 0.3), c(-0.2, 0.5));
        let sol = pseudo_fundamental(&p, 0.0, 50.0, xi, &opts).unwrap();

        let mode_opts = ModeOptions { force_direct: true, ..ModeOptions::default() };
        let traj = modes::integrate_mode(&p, xi, data, 50.0, &[50.0], &mode_opts).unwrap();

        let h0 = zones::symbols(&p, opts.zone_n, 0.0, xi).h;
        let u0 = [re(h0) * data.0, c(0.0, -1.0) * data.1];
        let got = sol.final_matrix().mul_vec(&u0);
        let h_t = zones::symbols(&p, opts.zone_n, 50.0, xi).h;
        let want = [re(h_t) * traj.u_hat[0], c(0.0, -1.0) * traj.u_hat_t[0]];
        let err = ((got[0] - want[0]).norm_sqr() + (got[1] - want[1]).norm_sqr()).sqrt()
            / (want[0].norm_sqr() + want[1].norm_sqr()).sqrt();
        assert!(err < 1e-7, "pseudo route misses the direct solution by {err}");
    }

    #[test]
    fn composed_solution_solves_the_full_mode_system() {
        let p = profile(
            "rapid",
            SpeedFamily::Polynomial { ell: 2.0 },
            MassFamily::Power { mu0: 1.0, p: -2.0 },
        );
        let opts = ScatterOptions::default();
        let xi = 1.0;
        let (s, t) = (3.0, 8.0);
        let sol = composed_fundamental(&p, s, t, xi, &opts).unwrap();
        assert_eq!(sol.kind, SolutionKind::ComposedEam);

        let data = (c(0.6, -0.1), c(0.2, 0.4));
        let mode_opts = ModeOptions { force_direct: true, ..ModeOptions::default() };
        let traj = modes::integrate_mode(&p, xi, data, t, &[s, t], &mode_opts).unwrap();
        let pair = |i: usize| {
            let tt = traj.times[i];
            [re(p.a(tt) * xi) * traj.u_hat[i], c(0.0, -1.0) * traj.u_hat_t[i]]
        };
        let uw_s = pair(0);
        let uw_t = pair(1);
        let prop = mixing_matrix() * sol.final_matrix() * mixing_inverse();
        let got = prop.mul_vec(&uw_s);
        let err = ((got[0] - uw_t[0]).norm_sqr() + (got[1] - uw_t[1]).norm_sqr()).sqrt()
            / (uw_t[0].norm_sqr() + uw_t[1].norm_sqr()).sqrt();
        assert!(err < 1e-6, "composed route misses the direct solution by {err}");
    }

    #[test]
    fn mass_perturbation_norms_obey_the_zone_estimates() {
        let flat = flat_scattering();
        let opts = flat_opts();
        let sol = free_wave_fundamental(&flat, 9.0, 29.0, 1.0, &opts).unwrap();
        for (i, &t) in sol.times.iter().enumerate() {
            let e = sol.matrices[i];
            let inv = e.inv().unwrap();
            let r = r_mass_matrix(&flat, t, 1.0);
            let p_norm = (inv * r * e).op_norm();
            assert!((p_norm - r.op_norm()).abs() <= 1e-9 * r.op_norm() + 1e-16);
            let am = flat.big_a(t) / flat.a(t) * flat.m(t) * flat.m(t);
            assert!(r.op_norm() <= am * (1.0 + 1e-12), "R exceeds (A/a)m^2 at t = {t}");
        }

        let exp = profile(
            "exp-mass",
            SpeedFamily::Exponential { lambda: 1.0 },
            MassFamily::Power { mu0: 1.0, p: -1.0 },
        );
        let s = 10.0f64.ln() + 0.1;
        let sol = free_wave_fundamental(&exp, s, s + 5.0, 1.0, &ScatterOptions::default()).unwrap();
        for (i, &t) in sol.times.iter().enumerate() {
            let e = sol.matrices[i];
            let inv = e.inv().unwrap();
            let cond = e.op_norm() * inv.op_norm();
            let r = r_mass_matrix(&exp, t, 1.0);
            let p_norm = (inv * r * e).op_norm();
            assert!(cond < 1.5);
            assert!(p_norm <= cond * r.op_norm() * (1.0 + 1e-9));
            let am = exp.big_a(t) / exp.a(t) * exp.m(t) * exp.m(t);
            assert!(r.op_norm() <= am * (1.0 + 1e-12));
        }
    }

    #[test]
    fn h_ratio_is_pinched_and_tends_to_one() {
        let p = profile("rapid-free", SpeedFamily::Polynomial { ell: 2.0 }, MassFamily::Zero);
        let n = 10.0;
        let theta = ZoneGeometry::wavefront(n).separating_time(&p, 1.0).unwrap();
        let ratio0 = zones::symbols(&p, n, theta, 1.0).h / (p.a(theta) * 1.0);
        assert!((ratio0 - 2.0f64.sqrt()).abs() < 1e-6, "boundary ratio {ratio0}");
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let t = theta + 5.0 * k as f64;
            let ratio = zones::symbols(&p, n, t, 1.0).h / (p.a(t) * 1.0);
            assert!(ratio >= 1.0 && ratio <= 2.0f64.sqrt() + 1e-12);
            assert!(ratio <= prev + 1e-15);
            prev = ratio;
        }
        assert!(prev - 1.0 < 1e-10, "h/(a|xi|) has not flattened: {prev}");
    }

    #[test]
    fn zero_matrix_series_returns_identity() {
        let series = peano_baker(|_| Mat2::zero(), 0.0, 1.0, 3, 1e-12).unwrap();
        assert_eq!(series.error_bound, 0.0);
        assert_eq!(series.p_integral, 0.0);
        for m in &series.solution.matrices {
            assert!((*m - Mat2::identity()).frobenius_norm() == 0.0);
        }
    }

    #[test]
    fn scalar_series_matches_the_exponential_oracle() {
        let series =
            peano_baker(|_| Mat2::from_real(0.25, 0.0, 0.0, 0.25), 0.0, 1.0, 8, 1e-10).unwrap();
        let q = series.solution.final_matrix();
        let exact = c(0.0, 0.25).exp();
        let err = (q.a - exact).norm();
        assert!(err < 1e-10, "K = 8 truncation error {err}");
        assert!(q.b.norm() < 1e-14 && q.c.norm() < 1e-14);
        assert!(series.error_bound >= err, "certified bound below the observed error");
        assert!(series.error_bound < 1e-10);
        assert!(series.grid_error < 1e-12);

        let series =
            peano_baker(|_| Mat2::from_real(0.5, 0.0, 0.0, 0.5), 0.0, 1.0, 10, 1e-10).unwrap();
        let err = (series.solution.final_matrix().a - c(0.0, 0.5).exp()).norm();
        assert!(err < 1e-10);
        assert!(series.error_bound >= err && series.error_bound < 1e-10);

        let f = |t: f64| 0.3 * (2.0 * t).cos();
        let series =
            peano_baker(|t| Mat2::from_real(f(t), 0.0, 0.0, f(t)), 0.0, 2.0, 12, 1e-9).unwrap();
        let exact = c(0.0, 0.15 * 4.0f64.sin()).exp();
        assert!((series.solution.final_matrix().a - exact).norm() < 1e-10);
    }

    #[test]
    fn underpowered_truncation_is_refused() {
        match peano_baker(|_| Mat2::from_real(0.5, 0.0, 0.0, 0.5), 0.0, 1.0, 8, 1e-10) {
            Err(KgError::SeriesTruncation { bound, tol, k }) => {
                assert_eq!(k, 8);
                assert_eq!(tol, 1e-10);
                let expect = 0.5f64.powi(9) / 362880.0 * 0.5f64.exp();
                assert!((bound / expect - 1.0).abs() < 1e-2, "bound {bound} vs {expect}");
            }
            other => panic!("expected a truncation refusal, got {other:?}"),
        }
    }

    #[test]
    fn series_and_ode_routes_agree_on_a_scattering_mode() {
        let p = flat_scattering();
        let opts = flat_opts();
        let (s, t) = (9.0, 29.0);
        let xi = 1.0;

        // With constant speed the phase factors are exact, so P has the
        // closed form r·[[1, −e^{−2iφ}], [e^{2iφ}, −1]], φ = ξ(τ−s).
        let p_fn = |tau: f64| {
            let m = (1.0 + tau).powi(-2);
            let r = 0.5 * m * m / xi;
            let phi = 2.0 * xi * (tau - s);
            let e2 = c(phi.cos(), phi.sin());
            Mat2::new(re(r), -re(r) * e2.conj(), re(r) * e2, re(-r))
        };
        let series = peano_baker(p_fn, s, t, 4, 1e-10).unwrap();

        let eam = composed_fundamental(&p, s, t, xi, &opts).unwrap().final_matrix();
        let ea = free_wave_fundamental(&p, s, t, xi, &opts).unwrap().final_matrix();
        let q_ode = Mat2::new(ea.d, -ea.b, -ea.c, ea.a) * eam;
        let diff = (series.solution.final_matrix() - q_ode).frobenius_norm();
        assert!(diff < 1e-8, "series and solver routes disagree by {diff}");
    }

    #[test]
    fn wave_operator_trivial_mass_is_identity() {
        let p = profile("lin-free", SpeedFamily::Polynomial { ell: 1.0 }, MassFamily::Zero);
        let sample = wave_operator(&p, 1.0, 0.5, 1e-10, &ScatterOptions::default()).unwrap();
        assert!((sample.theta - (19.0f64.sqrt() - 1.0)).abs() < 1e-6);
        assert!((sample.q_limit - Mat2::identity()).frobenius_norm() < 1e-12);
        assert!(sample.residual.iter().all(|&r| r < 1e-12));
        assert!(sample.bound.iter().all(|&b| b == 0.0));
        assert_eq!(sample.tail_exponent, 0.0);
        assert!(sample.residual_slope().is_none());
    }

    #[test]
    fn residual_tracks_the_integrable_tail() {
        let p = flat_scattering();
        let opts = flat_opts();
        let sample = wave_operator(&p, 1.0, 0.1, 1e-10, &opts).unwrap();

        assert!((sample.theta - 9.0).abs() < 1e-6);
        assert!(sample.onset_index <= sample.times.len() / 4);
        assert!((0.5..=1.01).contains(&sample.condition_constant));

        let (bound_slope, _) = sample.bound_slope().expect("bound curve is fittable");
        assert!(
            (bound_slope + 2.0).abs() < 0.1,
            "remaining-mass curve decays like t^{bound_slope}, expected -2"
        );
        assert!((sample.tail_exponent + 2.0).abs() < 0.1);

        let (res_slope, _) = sample.residual_slope().expect("residual curve is fittable");
        assert!(
            (res_slope + 3.0).abs() < 0.3,
            "residual decays like t^{res_slope}, expected -3 for this family"
        );

        assert!(sample.residual_factor > 0.0 && sample.residual_factor <= 0.2);
        for i in 0..sample.times.len() {
            assert!(sample.q_norm[i] <= (sample.p_integral[i]).exp() * (1.0 + 1e-8));
        }
        assert!((sample.q_limit.det() - c(1.0, 0.0)).norm() < 1e-8);

        let refined = wave_operator(&p, 1.0, 0.1, 1e-11, &opts).unwrap();
        let ratio = refined.residual_factor / sample.residual_factor;
        assert!((0.6..=1.5).contains(&ratio), "residual/bound constant unstable: {ratio}");
    }

    #[test]
    fn rapid_decay_family_converges_fast() {
        let p = profile(
            "rapid",
            SpeedFamily::Polynomial { ell: 2.0 },
            MassFamily::Power { mu0: 1.0, p: -2.0 },
        );
        let sample = wave_operator(&p, 0.3, 0.1, 1e-10, &ScatterOptions::default()).unwrap();
        assert!((sample.theta - ((98.0f64).cbrt() - 1.0)).abs() < 1e-6);

        let (bound_slope, _) = sample.bound_slope().expect("bound curve is fittable");
        assert!((bound_slope + 2.0).abs() < 0.15, "bound slope {bound_slope}");
        let (res_slope, _) = sample.residual_slope().expect("residual curve is fittable");
        assert!((res_slope + 5.0).abs() < 0.5, "residual slope {res_slope}, expected -5");
        assert!(sample.residual_factor < 1.0);
    }

    #[test]
    fn wave_operator_rejects_non_scattering_profiles() {
        let p = profile(
            "effective",
            SpeedFamily::Polynomial { ell: 1.0 },
            MassFamily::Power { mu0: 0.5, p: 0.0 },
        );
        assert!(matches!(
            wave_operator(&p, 1.0, 0.5, 1e-8, &ScatterOptions::default()),
            Err(KgError::ScatteringConditionViolated(_))
        ));
    }

    #[test]
    fn equivalence_discrepancy_vanishes_for_the_free_wave() {
        let p = exp_free();
        let ladder = geomspace(2.5, 12.0, 10);
        let data = [(c(1.0, 0.0), c(0.2, -0.4)), (c(0.3, 0.7), c(-0.5, 0.1))];
        let curve = asymptotic_equivalence(
            &p,
            &data,
            &[1.0, 2.0],
            &ladder,
            1e-10,
            &ScatterOptions::default(),
        )
        .unwrap();
        assert_eq!(curve.per_mode.len(), 2);
        let last = *curve.discrepancy.last().unwrap();
        assert!(last < 1e-6, "free-wave discrepancy should vanish, got {last}");
        assert!(last < 1e-3 * curve.discrepancy[0].max(1e-30));
    }

    #[test]
    fn matched_data_closes_the_gap_at_the_bound_rate() {
        let p = flat_scattering();
        let opts = flat_opts();
        let xi = 1.0;
        let op = wave_operator(&p, xi, 0.1, 1e-10, &opts).unwrap();
        let theta = op.theta;

        // Outgoing data: a single characteristic channel at the separating
        // time, so the late-time discrepancy is phase-stable.
        let e_pd = pseudo_march(&p, 0.0, theta, xi, &opts, &[theta]).unwrap().1[0];
        let h_theta = zones::symbols(&p, opts.zone_n, theta, xi).h;
        let h_mat = Mat2::diag(re(h_theta / (xi * p.a(theta))), re(1.0));
        let u0 = (e_pd.inv().unwrap() * h_mat * mixing_matrix()).mul_vec(&[c(1.0, 0.0), c(0.0, 0.0)]);
        let h0 = zones::symbols(&p, opts.zone_n, 0.0, xi).h;
        let data = (u0[0] / h0, c(0.0, 1.0) * u0[1]);

        let ladder = geomspace(20.0, 2000.0, 25);
        let curve =
            asymptotic_equivalence(&p, &[data], &[xi], &ladder, 1e-10, &opts).unwrap();

        let xs: Vec<f64> = ladder.iter().map(|&t| (1.0 + t).ln()).collect();
        let ys: Vec<f64> = curve.discrepancy.iter().map(|&d| d.ln()).collect();
        let (slope, rms) = sloped_fit(&xs, &ys).expect("discrepancy curve is fittable");
        assert!((slope + 2.0).abs() < 0.15, "discrepancy slope {slope}, expected -2");
        assert!(rms < 0.2, "noisy discrepancy fit: rms {rms}");
        let (bound_slope, _) = op.bound_slope().unwrap();
        assert!((slope - bound_slope).abs() < 0.2, "discrepancy decays at {slope}, bound at {bound_slope}");

        let doubled = (data.0 * 2.0, data.1 * 2.0);
        let curve2 =
            asymptotic_equivalence(&p, &[doubled], &[xi], &ladder, 1e-10, &opts).unwrap();
        for i in 0..ladder.len() {
            if curve.discrepancy[i] > 1e-13 {
                let ratio = curve2.discrepancy[i] / curve.discrepancy[i];
                assert!((ratio - 2.0).abs() < 1e-6, "linearity broken: ratio {ratio}");
            }
        }
    }

    #[test]
    fn equivalence_input_validation() {
        let p = exp_free();
        let opts = ScatterOptions::default();
        let ladder = [1.0, 2.0, 3.0, 4.0];
        let d = (c(1.0, 0.0), c(0.0, 0.0));
        assert!(matches!(
            asymptotic_equivalence(&p, &[d], &[1.0, 2.0], &ladder, 1e-8, &opts),
            Err(KgError::GridMismatch(_))
        ));
        assert!(matches!(
            asymptotic_equivalence(&p, &[d], &[0.0], &ladder, 1e-8, &opts),
            Err(KgError::InvalidParameter(_))
        ));
        assert!(matches!(
            asymptotic_equivalence(&p, &[d], &[1.0], &[1.0, 2.0, 3.0], 1e-8, &opts),
            Err(KgError::InvalidParameter(_))
        ));
        assert!(matches!(
            asymptotic_equivalence(&p, &[d], &[1.0], &[1.0, 3.0, 2.0, 4.0], 1e-8, &opts),
            Err(KgError::InvalidParameter(_))
        ));
    }
}
