//! Scale-invariant speed/mass pairs and their closed-form growth rates.
//!
//! The family ties the mass to the speed through the primitive: with
//! `A' = a`, `A(0) = a0` and a real parameter `alpha <= 1`,
//!
//! ```text
//! a(t) = a0^{-alpha} A(t)^alpha,      m(t) = mu a(t) / A(t),
//! ```
//!
//! so `m A / a = mu` stays constant and low frequencies sit on the
//! borderline between oscillatory and power-type behaviour.  Which side wins
//! is decided by the discriminant `delta = (alpha - 1)^2 - 4 mu^2`.
//!
//! The change of time `1 + tau = A(t)` maps the equation onto a damped wave
//! with an inverse-square potential,
//!
//! ```text
//! v_{tau tau} - Delta v + alpha/(1+tau) v_tau + mu^2/(1+tau)^2 v = 0,
//! ```
//!
//! and one more power weight in `1 + tau` removes either the damping
//! (`delta < 0`, a self-adjoint inverse-square potential remains) or the
//! potential (`delta >= 0`, pure damping `(1 + sqrt(delta))/(1+tau)`
//! remains).  The L^2 and energy growth laws read off that reduced
//! equation; [`predict_rates`] tabulates them and [`verify_rates`] checks a
//! prediction against a mode-level simulation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::coeffs::{CoefficientProfile, MassFamily, SpeedFamily};
use crate::error::{KgError, Result};
use crate::linalg::C64;
use crate::modes::{assemble_energies, integrate_mode, ModeOptions};

/// `(alpha - 1)^2 - 4 mu^2`, the threshold between oscillatory and
/// power-type low-frequency behaviour.
pub fn discriminant(alpha: f64, mu: f64) -> f64 {
    (alpha - 1.0).powi(2) - 4.0 * mu * mu
}

/// A speed/mass pair with `a = a0^{-alpha} A^alpha` and `m = mu a / A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleInvariantModel {
    /// Power of the primitive in the speed, `alpha <= 1`.
    pub alpha: f64,
    /// Constant value of `m A / a`.
    pub mu: f64,
    /// `A(0)`.
    pub a0: f64,
    /// Cached [`discriminant`] of `(alpha, mu)`.
    pub delta: f64,
    /// `(ell, mu_tilde)` with `a ~ (1+t)^ell`, `m ~ mu_tilde/(1+t)` for
    /// `alpha < 1`.  The match is exact when `a0 = 1/(ell+1)`; any other
    /// normalization only dilates time, which leaves power-law rates alone.
    pub equiv_poly: Option<(f64, f64)>,
}

impl ScaleInvariantModel {
    pub fn from_alpha(alpha: f64, mu: f64, a0: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha > 1.0 {
            return Err(KgError::InvalidParameter(format!(
                "scale-invariant model needs alpha <= 1 \
                 (the primitive blows up in finite time otherwise), got {alpha}"
            )));
        }
        if !mu.is_finite() || mu < 0.0 {
            return Err(KgError::InvalidParameter(format!(
                "scale-invariant model needs mu >= 0, got {mu}"
            )));
        }
        if !a0.is_finite() || a0 <= 0.0 || a0 > 1.0 {
            return Err(KgError::InvalidParameter(format!(
                "scale-invariant model needs A(0) in (0, 1], got {a0}"
            )));
        }
        Ok(Self::build(alpha, mu, a0))
    }

    /// The polynomial pair `a = (1+t)^ell`, `m = mu_tilde/(1+t)` in
    /// scale-invariant form.  The primitive normalization is forced to
    /// `A(0) = 1/(ell+1)`, which exceeds 1 for decaying speeds; that is the
    /// price of keeping the coefficients exactly polynomial.
    pub fn from_poly(ell: f64, mu_tilde: f64) -> Result<Self> {
        if !ell.is_finite() || ell <= -1.0 {
            return Err(KgError::InvalidParameter(format!(
                "polynomial speed needs ell > -1, got {ell}"
            )));
        }
        if !mu_tilde.is_finite() || mu_tilde < 0.0 {
            return Err(KgError::InvalidParameter(format!(
                "polynomial mass needs mu_tilde >= 0, got {mu_tilde}"
            )));
        }
        let scale = ell + 1.0;
        let mut model = Self::build(ell / scale, mu_tilde / scale, 1.0 / scale);
        model.equiv_poly = Some((ell, mu_tilde));
        Ok(model)
    }

    fn build(alpha: f64, mu: f64, a0: f64) -> Self {
        let delta = discriminant(alpha, mu);
        let equiv_poly =
            (alpha < 1.0).then(|| (alpha / (1.0 - alpha), mu / (1.0 - alpha)));
        Self { alpha, mu, a0, delta, equiv_poly }
    }

    /// The coefficient pair as a profile ready for hypothesis checks and
    /// mode integration.
    pub fn profile(&self) -> Result<CoefficientProfile> {
        let speed = SpeedFamily::ScaleInvariant { alpha: self.alpha, a0: self.a0 };
        let mass = if self.mu == 0.0 {
            MassFamily::Zero
        } else {
            MassFamily::ScaleInvariantMass { mu: self.mu }
        };
        CoefficientProfile::new(self.label(), speed, mass)
    }

    fn label(&self) -> String {
        match self.equiv_poly {
            Some((ell, mu_tilde)) => {
                format!("scale-invariant (ell = {ell}, mu~ = {mu_tilde})")
            }
            None => format!(
                "scale-invariant (alpha = {}, mu = {})",
                self.alpha, self.mu
            ),
        }
    }

    /// `A(t)` in the model's own normalization `A(0) = a0` (not the
    /// unit-normalized primitive used by the hypothesis checks).
    pub fn primitive(&self, t: f64) -> f64 {
        if (self.alpha - 1.0).abs() < 1e-12 {
            self.a0 * (t / self.a0).exp()
        } else {
            let c = (1.0 - self.alpha) / self.a0;
            self.a0 * (1.0 + c * t).powf(1.0 / (1.0 - self.alpha))
        }
    }

    /// Damped-wave time `tau = A(t) - 1`.
    pub fn tau_of_t(&self, t: f64) -> f64 {
        self.primitive(t) - 1.0
    }

    /// Inverse of [`ScaleInvariantModel::tau_of_t`].
    pub fn t_of_tau(&self, tau: f64) -> f64 {
        let ratio = (1.0 + tau) / self.a0;
        if (self.alpha - 1.0).abs() < 1e-12 {
            self.a0 * ratio.ln()
        } else {
            let c = (1.0 - self.alpha) / self.a0;
            (ratio.powf(1.0 - self.alpha) - 1.0) / c
        }
    }
}

/// The model after the change of time `1 + tau = A(t)`:
///
/// ```text
/// v_{tau tau} - Delta v + damping/(1+tau) v_tau + potential/(1+tau)^2 v = 0
/// ```
///
/// posed from `tau0 = A(0) - 1`, together with the power weight that removes
/// one of the two lower-order terms.  The speed satisfies `a(0) = 1`, so
/// mode data carries over unchanged: `v(tau0) = u(0)`, `v_tau(tau0) = u_t(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DissipativeForm {
    pub tau0: f64,
    /// Coefficient of `v_tau / (1+tau)`; equals `alpha`.
    pub damping: f64,
    /// Coefficient of `v / (1+tau)^2`; equals `mu^2`.
    pub potential: f64,
    pub delta: f64,
    pub reduction: SecondaryReduction,
}

/// Second change of unknown applied to the damped form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SecondaryReduction {
    /// `delta < 0`: `v = (1+tau)^{-damping/2} w` leaves
    /// `w_{tau tau} - Delta w + sigma/(1+tau)^2 w = 0` with
    /// `sigma = (1 - delta)/4 >= 1/4`.
    InverseSquare { sigma: f64 },
    /// `delta >= 0`: `v = (1+tau)^sigma w` with
    /// `sigma = (1 - alpha + sqrt(delta))/2` leaves
    /// `w_{tau tau} - Delta w + coefficient/(1+tau) w_tau = 0` with
    /// `coefficient = 1 + sqrt(delta)`.
    Damping { sigma: f64, coefficient: f64 },
}

impl DissipativeForm {
    /// Cauchy data for the reduced unknown `w` at `tau0`, from mode data
    /// `(u(0), u_t(0))`.
    pub fn reduced_data(&self, u0: C64, u1: C64) -> (C64, C64) {
        let s = 1.0 + self.tau0;
        match self.reduction {
            SecondaryReduction::InverseSquare { .. } => {
                let g = self.damping / 2.0;
                (u0 * s.powf(g), u0 * (g * s.powf(g - 1.0)) + u1 * s.powf(g))
            }
            SecondaryReduction::Damping { sigma, .. } => (
                u0 * s.powf(-sigma),
                u1 * s.powf(-sigma) - u0 * (sigma * s.powf(-sigma - 1.0)),
            ),
        }
    }

    /// Value of the damped unknown `v` recovered from the reduced one.
    pub fn damped_from_reduced(&self, tau: f64, w: C64) -> C64 {
        let s = 1.0 + tau;
        match self.reduction {
            SecondaryReduction::InverseSquare { .. } => w * s.powf(-self.damping / 2.0),
            SecondaryReduction::Damping { sigma, .. } => w * s.powf(sigma),
        }
    }
}

/// Rewrite a model in the damped-wave time `1 + tau = A(t)`.
pub fn transform_to_dissipative(model: &ScaleInvariantModel) -> DissipativeForm {
    let delta = model.delta;
    let reduction = if delta < 0.0 {
        SecondaryReduction::InverseSquare { sigma: (1.0 - delta) / 4.0 }
    } else {
        let root = delta.sqrt();
        SecondaryReduction::Damping {
            sigma: (1.0 - model.alpha + root) / 2.0,
            coefficient: 1.0 + root,
        }
    };
    DissipativeForm {
        tau0: model.a0 - 1.0,
        damping: model.alpha,
        potential: model.mu * model.mu,
        delta,
        reduction,
    }
}

/// Which variable carries a power law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RateScale {
    /// Powers of `1 + t`, logs of `e + t`.
    Time,
    /// Powers of `a(t)`, logs of `e + A/A(0)`.
    Speed,
    /// Powers of `A(t)/A(0)`, logs of the same quantity.
    Primitive,
}

/// A one-term law `base^exponent * log^log_exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateLaw {
    pub exponent: f64,
    pub log_exponent: f64,
    pub scale: RateScale,
}

impl RateLaw {
    fn time(exponent: f64, log_exponent: f64) -> Self {
        Self { exponent, log_exponent, scale: RateScale::Time }
    }

    fn speed(exponent: f64, log_exponent: f64) -> Self {
        Self { exponent, log_exponent, scale: RateScale::Speed }
    }

    fn primitive(exponent: f64, log_exponent: f64) -> Self {
        Self { exponent, log_exponent, scale: RateScale::Primitive }
    }
}

impl fmt::Display for RateLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.scale {
            RateScale::Time => "(1+t)",
            RateScale::Speed => "a(t)",
            RateScale::Primitive => "(A/A0)",
        };
        write!(f, "{base}^{:.4}", self.exponent)?;
        if self.log_exponent != 0.0 {
            let arg = match self.scale {
                RateScale::Time => "e+t",
                _ => "e+A/A0",
            };
            write!(f, " log^{:.4}({arg})", self.log_exponent)?;
        }
        Ok(())
    }
}

/// Which refinement applies to data in `L^q`, `1 <= q <= 2`, with smoothness
/// index `kappa` in `[0, 1]` and space dimension `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LqBranch {
    /// `q = 2`: plain energy-space data, no refinement.
    Energy,
    /// `delta <= 0`, `n > q/(2-q)`: full decay, no dimensional correction.
    FullDecay,
    /// `delta <= 0`, `n = q/(2-q)`: an extra `log^{(2-q)/(2q)}` factor.
    LogCorrected { log_exponent: f64 },
    /// `delta <= 0`, `n < q/(2-q)`: no closed-form rate in this family.
    NotCovered,
    /// `delta > 0`, `1 + sqrt(delta) > n(2-q)/q + 2 kappa`: the rate improves
    /// with the data integrability.
    DataImproved,
    /// `delta > 0`, equality: borderline, with a `log^{(2-q)/q}` factor.
    Borderline,
    /// `delta > 0`, `1 + sqrt(delta) < n(2-q)/q + 2 kappa`: integrability
    /// beyond `L^2` no longer helps.
    Saturated,
}

/// Sharp growth laws for one model and data class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePrediction {
    /// Bound on `||u||_{L^2}^2`.
    pub potential: RateLaw,
    /// Bound on `||u_t||^2 + a^2 ||grad u||^2`.
    pub kinetic: RateLaw,
    /// Which `L^q` refinement applies to the requested `(q, kappa, n)`.
    pub lq_branch: LqBranch,
    /// Bound on the unsquared homogeneous `H^kappa` norm under the `L^q`
    /// data assumption, when the branch provides one.  For `delta <= 0` the
    /// bound concerns the `L^2` norm and `kappa` is ignored.
    pub lq_law: Option<RateLaw>,
}

fn delta_class(delta: f64, alpha: f64, mu: f64) -> i8 {
    let scale = (alpha - 1.0).powi(2).max(4.0 * mu * mu).max(1.0);
    if delta.abs() <= 1e-12 * scale {
        0
    } else if delta > 0.0 {
        1
    } else {
        -1
    }
}

/// Growth laws for the squared L^2 norm and the kinetic-plus-elastic energy,
/// plus the `L^q`-data refinement for the requested `(q, kappa, n)`.
///
/// Models with a polynomial twin report powers of `1 + t`; at `alpha = 1`
/// the laws are powers of the speed itself.  The `L^q` law is always a power
/// of `A/A(0)`, which stays finite for every admissible `alpha` including 0.
pub fn predict_rates(
    model: &ScaleInvariantModel,
    q: f64,
    kappa: f64,
    n: u32,
) -> Result<RatePrediction> {
    if !(1.0..=2.0).contains(&q) {
        return Err(KgError::InvalidParameter(format!(
            "data integrability q must lie in [1, 2], got {q}"
        )));
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(KgError::InvalidParameter(format!(
            "smoothness index kappa must lie in [0, 1], got {kappa}"
        )));
    }
    if n == 0 {
        return Err(KgError::InvalidParameter("dimension n must be >= 1".into()));
    }

    let delta = model.delta;
    let cls = delta_class(delta, model.alpha, model.mu);

    let (potential, kinetic) = match model.equiv_poly {
        Some((ell, mu_tilde)) => {
            let root = (1.0 - 4.0 * mu_tilde * mu_tilde).max(0.0).sqrt();
            let potential = match cls {
                0 => RateLaw::time(1.0, 2.0),
                c if c < 0 => RateLaw::time(1.0, 0.0),
                _ => RateLaw::time(1.0 + root, 0.0),
            };
            let kinetic = if delta < 1.0 {
                RateLaw::time(ell, 0.0)
            } else {
                RateLaw::time(root - 1.0, 0.0)
            };
            (potential, kinetic)
        }
        None => {
            // alpha = 1 exactly; dividing by it is cosmetic but keeps the
            // formulas in the shape valid for the whole family.
            let root = delta.max(0.0).sqrt();
            let base = (1.0 - model.alpha) / model.alpha;
            let potential = match cls {
                0 => RateLaw::speed(base, 2.0),
                c if c < 0 => RateLaw::speed(base, 0.0),
                _ => RateLaw::speed(base + root / model.alpha, 0.0),
            };
            let kinetic = if delta < 1.0 {
                RateLaw::speed(1.0, 0.0)
            } else {
                RateLaw::speed((model.alpha - 1.0 + root) / model.alpha, 0.0)
            };
            (potential, kinetic)
        }
    };

    let nf = f64::from(n);
    let half = model.alpha / 2.0;
    let (lq_branch, lq_law) = if q >= 2.0 - 1e-12 {
        (LqBranch::Energy, None)
    } else if cls <= 0 {
        let critical = q / (2.0 - q);
        let gamma = if cls == 0 { 1.0 } else { 0.0 };
        if (nf - critical).abs() <= 1e-9 * critical.max(1.0) {
            let extra = (2.0 - q) / (2.0 * q);
            (
                LqBranch::LogCorrected { log_exponent: extra },
                Some(RateLaw::primitive(-half, gamma + extra)),
            )
        } else if nf > critical {
            (LqBranch::FullDecay, Some(RateLaw::primitive(-half, gamma)))
        } else {
            (LqBranch::NotCovered, None)
        }
    } else {
        let gain = 1.0 + delta.sqrt();
        let threshold = nf * (2.0 - q) / q + 2.0 * kappa;
        if (gain - threshold).abs() <= 1e-9 {
            (
                LqBranch::Borderline,
                Some(RateLaw::primitive(-half, (2.0 - q) / q)),
            )
        } else if gain > threshold {
            let e = (1.0 - model.alpha + delta.sqrt()) / 2.0
                - kappa
                - nf * (2.0 - q) / (2.0 * q);
            (LqBranch::DataImproved, Some(RateLaw::primitive(e, 0.0)))
        } else {
            (LqBranch::Saturated, Some(RateLaw::primitive(-half, 0.0)))
        }
    };

    Ok(RatePrediction { potential, kinetic, lq_branch, lq_law })
}

/// Settings for the mode-level rate verification.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Simulation horizon.
    pub t_max: f64,
    /// Modes whose high-frequency-zone entry times are spread from well
    /// before the fit window up to the horizon.
    pub staircase_modes: usize,
    /// Modes kept deep in the low-frequency zone for the whole window.
    pub deep_modes: usize,
    /// Extra frequencies added verbatim.
    pub extra_xi: Vec<f64>,
    /// Mode data; defaults to `(1, i m(0))`.
    pub data: Option<(C64, C64)>,
    /// ODE tolerance.
    pub tol: f64,
    /// Sample count across the fit window.
    pub fit_points: usize,
    /// Acceptance band around the predicted exponent.
    pub tolerance: f64,
    /// Residual level above which a fit is inconclusive.
    pub rms_gate: f64,
}

impl SimConfig {
    pub fn new(t_max: f64) -> Self {
        Self {
            t_max,
            staircase_modes: 14,
            deep_modes: 6,
            extra_xi: Vec::new(),
            data: None,
            tol: 1e-10,
            fit_points: 40,
            tolerance: 0.05,
            rms_gate: 0.1,
        }
    }
}

/// Result of fitting one simulated energy series against its predicted law.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitOutcome {
    pub fitted: f64,
    pub predicted: f64,
    pub residual_rms: f64,
    /// False when the horizon or the fit quality does not support a verdict.
    pub conclusive: bool,
    /// Conclusive and within the acceptance band.
    pub ok: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateFitReport {
    pub potential: FitOutcome,
    pub kinetic: FitOutcome,
    pub tolerance: f64,
}

fn inconclusive(law: &RateLaw) -> FitOutcome {
    FitOutcome {
        fitted: f64::NAN,
        predicted: law.exponent,
        residual_rms: f64::NAN,
        conclusive: false,
        ok: false,
    }
}

fn slope_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let mut rr = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let r = y - slope * x - icept;
        rr += r * r;
    }
    Some((slope, (rr / n).sqrt()))
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64)
        .collect();
    *v.last_mut().unwrap() = hi;
    v
}

fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let r = (hi / lo).ln() / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|j| lo * (r * j as f64).exp()).collect();
    *v.last_mut().unwrap() = hi;
    v
}

/// Simulate a frequency sweep and fit the growth exponents of the potential
/// and kinetic-plus-elastic series over the last decade of the horizon.
///
/// The frequency grid has two blocks.  Deep modes sit below `m/a` at the
/// horizon, so their mass-dominated growth runs through the whole window;
/// the L^2 series is assembled from them alone, since they stand in for the
/// shrinking low-frequency band that carries the L^2 growth.  Staircase
/// modes have zone crossing times staggered from well before the window to
/// the horizon; their post-crossing energies stack up to the energy
/// envelope, and the energy series uses the full sweep.  The fitted slope
/// reflects the supplied data: growth bounds are attained only when the
/// data excites the slowest branch, which the default `(1, i m(0))` does.
/// An insufficient horizon or a noisy fit yields `conclusive = false`,
/// never a false pass.
pub fn verify_rates(
    model: &ScaleInvariantModel,
    prediction: &RatePrediction,
    config: &SimConfig,
) -> Result<RateFitReport> {
    if !config.t_max.is_finite() || config.t_max <= 0.0 {
        return Err(KgError::InvalidParameter(format!(
            "simulation horizon must be positive, got {}",
            config.t_max
        )));
    }
    let exponential = model.equiv_poly.is_none();
    if exponential != (prediction.potential.scale == RateScale::Speed) {
        return Err(KgError::InvalidParameter(
            "prediction does not belong to this model family".into(),
        ));
    }

    let lo = if exponential {
        config.t_max - std::f64::consts::LN_10 * model.a0
    } else {
        config.t_max / 10.0
    };
    if lo < 1.0 || config.fit_points < 10 {
        return Ok(RateFitReport {
            potential: inconclusive(&prediction.potential),
            kinetic: inconclusive(&prediction.kinetic),
            tolerance: config.tolerance,
        });
    }

    let profile = model.profile()?;
    let times = if exponential {
        linspace(lo, config.t_max, config.fit_points)
    } else {
        geomspace(lo, config.t_max, config.fit_points)
    };

    let opts = ModeOptions { tol: config.tol, ..ModeOptions::default() };
    let span = config.t_max - lo;
    let stair_lo = (lo - 1.5 * span).max(lo / 3.0).max(1.0);
    let mut xis: Vec<f64> = Vec::new();
    let stairs = config.staircase_modes.max(2);
    for j in 0..stairs {
        let f = j as f64 / (stairs - 1) as f64;
        let t_exit = stair_lo + f * (config.t_max - stair_lo);
        xis.push(opts.zone_n / profile.big_a(t_exit));
    }
    // Deep modes must keep a xi < m through the window, not merely stay
    // inside the low-frequency zone; the growth of a mode ends at the first
    // of the two crossovers.
    let mass_cross = profile.m(config.t_max) / profile.a(config.t_max);
    let deep_top = if mass_cross > 0.0 {
        0.5 * mass_cross
    } else {
        0.5 * opts.zone_n / profile.big_a(config.t_max)
    };
    let deeps = config.deep_modes.max(2);
    for j in 0..deeps {
        let f = j as f64 / (deeps - 1) as f64;
        xis.push(deep_top * 10f64.powf(f - 1.0));
    }
    xis.extend(config.extra_xi.iter().copied());
    xis.retain(|x| x.is_finite() && *x > 0.0);
    xis.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xis.dedup_by(|p, q| (*p - *q).abs() <= 1e-12 * q.abs());

    let data = config
        .data
        .unwrap_or_else(|| (C64::new(1.0, 0.0), C64::new(0.0, profile.m(0.0))));
    let mut trajectories = Vec::with_capacity(xis.len());
    for &xi in &xis {
        trajectories.push(integrate_mode(&profile, xi, data, config.t_max, &times, &opts)?);
    }
    let deep_count = xis.partition_point(|&x| x <= deep_top * 1.5);
    let low_block = &trajectories[..deep_count.max(1).min(trajectories.len())];
    let low_series =
        assemble_energies(low_block, &profile, None, &vec![1.0; low_block.len()])?;
    let weights = vec![1.0; trajectories.len()];
    let series = assemble_energies(&trajectories, &profile, None, &weights)?;

    let fit = |law: &RateLaw, values: &[f64]| -> FitOutcome {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, &t) in series.times.iter().enumerate() {
            let v = values[i];
            if t < lo * (1.0 - 1e-9) || !v.is_finite() || v <= 0.0 {
                continue;
            }
            let x = match law.scale {
                RateScale::Time => (1.0 + t).ln(),
                RateScale::Speed => profile.a(t).ln(),
                RateScale::Primitive => (model.primitive(t) / model.a0).ln(),
            };
            let log_arg = match law.scale {
                RateScale::Time => (std::f64::consts::E + t).ln(),
                _ => (std::f64::consts::E + model.primitive(t) / model.a0).ln(),
            };
            xs.push(x);
            ys.push(v.ln() - law.log_exponent * log_arg.ln());
        }
        let spread = match (xs.first(), xs.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        };
        match slope_fit(&xs, &ys) {
            Some((slope, rms))
                if xs.len() >= 10 && spread >= 0.9 * std::f64::consts::LN_10 =>
            {
                let conclusive = rms <= config.rms_gate;
                FitOutcome {
                    fitted: slope,
                    predicted: law.exponent,
                    residual_rms: rms,
                    conclusive,
                    ok: conclusive && (slope - law.exponent).abs() <= config.tolerance,
                }
            }
            _ => inconclusive(law),
        }
    };

    Ok(RateFitReport {
        potential: fit(&prediction.potential, &low_series.l2),
        kinetic: fit(&prediction.kinetic, &series.kinetic_elastic),
        tolerance: config.tolerance,
    })
}
