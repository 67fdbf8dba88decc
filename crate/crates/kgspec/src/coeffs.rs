//! Coefficient profiles for `u_tt - a(t)^2 Δu + m(t)^2 u = 0`.
//!
//! A profile bundles the propagation speed `a`, the mass `m`, their first two
//! derivatives, and the primitive
//!
//! ```text
//!     A(t) = 1 + ∫_0^t a(s) ds,
//! ```
//!
//! from which the derived scales `η = a/A` and `μ = m/η` are formed. `η` is
//! the decay scale set by the light cone; `μ` measures the mass against it,
//! and everything downstream (classification, zone geometry, energy rates)
//! is phrased in terms of these two.
//!
//! The named families cover every model exercised by the experiment runner;
//! [`CustomSpeed`] / [`CustomMass`] accept arbitrary closures, with
//! finite-difference fallback derivatives and memoized adaptive quadrature
//! for the primitive.

use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{KgError, Result};
use crate::quad;

/// Relative step for finite-difference first derivatives: `h = 1e-5 (1+t)`.
const FD1_SCALE: f64 = 1e-5;
/// Relative step for second differences, coarser to tame rounding noise.
const FD2_SCALE: f64 = 1e-4;

pub(crate) fn fd1(f: &dyn Fn(f64) -> f64, t: f64) -> f64 {
    let h = FD1_SCALE * (1.0 + t);
    if t >= h {
        (f(t + h) - f(t - h)) / (2.0 * h)
    } else {
        (-3.0 * f(t) + 4.0 * f(t + h) - f(t + 2.0 * h)) / (2.0 * h)
    }
}

pub(crate) fn fd2(f: &dyn Fn(f64) -> f64, t: f64) -> f64 {
    let h = FD2_SCALE * (1.0 + t);
    if t >= h {
        (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h)
    } else {
        (f(t) - 2.0 * f(t + h) + f(t + 2.0 * h)) / (h * h)
    }
}

/// `(x^p - 1) / p`, stable as `p → 0` where it tends to `ln x`.
pub(crate) fn pow_growth(x: f64, p: f64) -> f64 {
    if p.abs() < 1e-12 {
        x.ln()
    } else {
        (p * x.ln()).exp_m1() / p
    }
}

type ScalarFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied propagation speed.
///
/// Derivatives default to finite differences; the primitive defaults to
/// adaptive quadrature over unit panels whose values are memoized, so
/// repeated queries along an ODE solve stay cheap and, importantly,
/// independent of query order.
pub struct CustomSpeed {
    label: String,
    a: ScalarFn,
    a1: Option<ScalarFn>,
    a2: Option<ScalarFn>,
    big_a: Option<ScalarFn>,
    /// `panels[k] = ∫_0^k a`, grown on demand.
    panels: Mutex<Vec<f64>>,
}

impl CustomSpeed {
    pub fn new(label: impl Into<String>, a: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        CustomSpeed {
            label: label.into(),
            a: Box::new(a),
            a1: None,
            a2: None,
            big_a: None,
            panels: Mutex::new(vec![0.0]),
        }
    }

    pub fn with_derivatives(
        mut self,
        a1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        a2: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.a1 = Some(Box::new(a1));
        self.a2 = Some(Box::new(a2));
        self
    }

    /// Closed-form primitive `A(t) = 1 + ∫_0^t a`; bypasses quadrature.
    pub fn with_primitive(mut self, big_a: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.big_a = Some(Box::new(big_a));
        self
    }

    fn primitive(&self, t: f64) -> Result<f64> {
        if let Some(big_a) = &self.big_a {
            return Ok(big_a(t));
        }
        let k = t.floor().max(0.0) as usize;
        let base = {
            let mut panels = self.panels.lock().expect("panel memo poisoned");
            while panels.len() <= k {
                let j = panels.len();
                let piece =
                    quad::integrate(|s| (self.a)(s), (j - 1) as f64, j as f64, 1e-11, 1e-14)?;
                let prev = panels[j - 1];
                panels.push(prev + piece.value);
            }
            panels[k]
        };
        let tail = quad::integrate(|s| (self.a)(s), k as f64, t, 1e-11, 1e-14)?;
        Ok(1.0 + base + tail.value)
    }
}

impl fmt::Debug for CustomSpeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomSpeed").field("label", &self.label).finish_non_exhaustive()
    }
}

/// User-supplied mass coefficient; derivatives default to finite differences.
pub struct CustomMass {
    label: String,
    m: ScalarFn,
    m1: Option<ScalarFn>,
    m2: Option<ScalarFn>,
}

impl CustomMass {
    pub fn new(label: impl Into<String>, m: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        CustomMass { label: label.into(), m: Box::new(m), m1: None, m2: None }
    }

    pub fn with_derivatives(
        mut self,
        m1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        m2: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.m1 = Some(Box::new(m1));
        self.m2 = Some(Box::new(m2));
        self
    }
}

impl fmt::Debug for CustomMass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomMass").field("label", &self.label).finish_non_exhaustive()
    }
}

fn default_lambda() -> f64 {
    1.0
}

fn default_a0() -> f64 {
    1.0
}

/// Propagation-speed families.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SpeedFamily {
    /// `a(t) = (1+t)^ℓ`, `ℓ > -1`.
    Polynomial { ell: f64 },
    /// `a(t) = e^{λt}`, `λ > 0`.
    Exponential {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    /// The family with `a = const · A^α` along its own light cone:
    /// `a(t) = (1 + ct)^{α/(1-α)}` with `c = (1-α)/a0` for `α < 1`, and
    /// `a(t) = e^{t/a0}` at `α = 1`. `a0 = A(0) > 0` is the primitive's
    /// starting value in the scale-invariant normalization; the paper-style
    /// primitive `1 + ∫_0^t a` is still available as [`CoefficientProfile::big_a`].
    ScaleInvariant {
        alpha: f64,
        #[serde(default = "default_a0")]
        a0: f64,
    },
    #[serde(skip)]
    Custom(Arc<CustomSpeed>),
}

impl SpeedFamily {
    pub fn custom(speed: CustomSpeed) -> Self {
        SpeedFamily::Custom(Arc::new(speed))
    }

    fn validate(&self) -> Result<()> {
        match self {
            SpeedFamily::Polynomial { ell } => {
                if !ell.is_finite() || *ell <= -1.0 {
                    return Err(KgError::InvalidProfile(format!(
                        "polynomial speed needs ell > -1 (a must not be integrable), got {ell}"
                    )));
                }
            }
            SpeedFamily::Exponential { lambda } => {
                if !lambda.is_finite() || *lambda <= 0.0 {
                    return Err(KgError::InvalidProfile(format!(
                        "exponential speed needs lambda > 0, got {lambda}"
                    )));
                }
            }
            SpeedFamily::ScaleInvariant { alpha, a0 } => {
                if !alpha.is_finite() || *alpha > 1.0 {
                    return Err(KgError::InvalidProfile(format!(
                        "scale-invariant speed needs alpha <= 1 \
                         (alpha > 1 reaches a finite-time blow-up of A), got {alpha}"
                    )));
                }
                if !a0.is_finite() || *a0 <= 0.0 {
                    return Err(KgError::InvalidProfile(format!(
                        "scale-invariant speed needs a0 > 0, got {a0}"
                    )));
                }
            }
            SpeedFamily::Custom(c) => {
                let a0 = (c.a)(0.0);
                if !a0.is_finite() || a0 <= 0.0 {
                    return Err(KgError::InvalidProfile(format!(
                        "custom speed `{}` must be positive at t = 0, got {a0}",
                        c.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            SpeedFamily::Polynomial { ell } => (1.0 + t).powf(*ell),
            SpeedFamily::Exponential { lambda } => (lambda * t).exp(),
            SpeedFamily::ScaleInvariant { alpha, a0 } => {
                if (alpha - 1.0).abs() < 1e-12 {
                    (t / a0).exp()
                } else {
                    let c = (1.0 - alpha) / a0;
                    (1.0 + c * t).powf(alpha / (1.0 - alpha))
                }
            }
            SpeedFamily::Custom(c) => (c.a)(t),
        }
    }

    pub fn deriv1(&self, t: f64) -> f64 {
        match self {
            SpeedFamily::Polynomial { ell } => ell * (1.0 + t).powf(ell - 1.0),
            SpeedFamily::Exponential { lambda } => lambda * (lambda * t).exp(),
            SpeedFamily::ScaleInvariant { alpha, a0 } => {
                if (alpha - 1.0).abs() < 1e-12 {
                    (t / a0).exp() / a0
                } else {
                    let c = (1.0 - alpha) / a0;
                    let g = alpha / (1.0 - alpha);
                    c * g * (1.0 + c * t).powf(g - 1.0)
                }
            }
            SpeedFamily::Custom(c) => match &c.a1 {
                Some(a1) => a1(t),
                None => fd1(&|s| (c.a)(s), t),
            },
        }
    }

    pub fn deriv2(&self, t: f64) -> f64 {
        match self {
            SpeedFamily::Polynomial { ell } => ell * (ell - 1.0) * (1.0 + t).powf(ell - 2.0),
            SpeedFamily::Exponential { lambda } => lambda * lambda * (lambda * t).exp(),
            SpeedFamily::ScaleInvariant { alpha, a0 } => {
                if (alpha - 1.0).abs() < 1e-12 {
                    (t / a0).exp() / (a0 * a0)
                } else {
                    let c = (1.0 - alpha) / a0;
                    let g = alpha / (1.0 - alpha);
                    c * c * g * (g - 1.0) * (1.0 + c * t).powf(g - 2.0)
                }
            }
            SpeedFamily::Custom(c) => match &c.a2 {
                Some(a2) => a2(t),
                None => fd2(&|s| (c.a)(s), t),
            },
        }
    }

    /// `A(t) = 1 + ∫_0^t a`.
    fn primitive(&self, t: f64) -> Result<f64> {
        match self {
            SpeedFamily::Polynomial { ell } => Ok(1.0 + pow_growth(1.0 + t, ell + 1.0)),
            SpeedFamily::Exponential { lambda } => Ok(1.0 + (lambda * t).exp_m1() / lambda),
            SpeedFamily::ScaleInvariant { .. } => {
                // natural primitive shifted so that A(0) = 1
                Ok(self.natural_primitive(t)? + (1.0 - self.natural_primitive(0.0)?))
            }
            SpeedFamily::Custom(c) => c.primitive(t),
        }
    }

    /// The primitive in the family's own normalization: for the
    /// scale-invariant family the one with `A(0) = a0` and `a = const · A^α`
    /// exactly; for every other family the same as [`SpeedFamily::primitive`].
    fn natural_primitive(&self, t: f64) -> Result<f64> {
        match self {
            SpeedFamily::ScaleInvariant { alpha, a0 } => {
                if (alpha - 1.0).abs() < 1e-12 {
                    Ok(a0 * (t / a0).exp())
                } else {
                    let c = (1.0 - alpha) / a0;
                    Ok(a0 * (1.0 + c * t).powf(1.0 / (1.0 - alpha)))
                }
            }
            _ => self.primitive(t),
        }
    }

    fn has_analytic_derivatives(&self) -> bool {
        match self {
            SpeedFamily::Custom(c) => c.a1.is_some() && c.a2.is_some(),
            _ => true,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SpeedFamily::Polynomial { ell } => format!("(1+t)^{ell}"),
            SpeedFamily::Exponential { lambda } => format!("exp({lambda} t)"),
            SpeedFamily::ScaleInvariant { alpha, a0 } => {
                format!("scale-invariant speed (alpha = {alpha}, A(0) = {a0})")
            }
            SpeedFamily::Custom(c) => c.label.clone(),
        }
    }
}

/// Mass-coefficient families.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MassFamily {
    /// `m ≡ 0`: the free wave reference.
    Zero,
    /// `m(t) = mu0 (1+t)^p`.
    Power { mu0: f64, p: f64 },
    /// `m(t) = mu · a(t)/Ã(t)` with `Ã` the speed's natural primitive; the
    /// borderline family whose `μ` is a constant.
    ScaleInvariantMass { mu: f64 },
    /// `m(t) = mu / ((e+t) ln(e+t)^gamma)`: slowly varying masses sitting
    /// between the scattering and scale-invariant regimes.
    LogMass { mu: f64, gamma: f64 },
    #[serde(skip)]
    Custom(Arc<CustomMass>),
}

impl MassFamily {
    pub fn custom(mass: CustomMass) -> Self {
        MassFamily::Custom(Arc::new(mass))
    }

    fn validate(&self) -> Result<()> {
        match self {
            MassFamily::Zero => {}
            MassFamily::Power { mu0, p } => {
                if !mu0.is_finite() || *mu0 <= 0.0 {
                    return Err(KgError::InvalidProfile(format!(
                        "power mass needs mu0 > 0, got {mu0}"
                    )));
                }
                if !p.is_finite() {
                    return Err(KgError::InvalidProfile("power mass exponent must be finite".into()));
                }
            }
            MassFamily::ScaleInvariantMass { mu } => {
                if !mu.is_finite() || *mu <= 0.0 {
                    return Err(KgError::InvalidProfile(format!(
                        "scale-invariant mass needs mu > 0, got {mu}"
                    )));
                }
            }
            MassFamily::LogMass { mu, gamma } => {
                if !mu.is_finite() || *mu <= 0.0 {
                    return Err(KgError::InvalidProfile(format!("log mass needs mu > 0, got {mu}")));
                }
                if !gamma.is_finite() || *gamma <= 0.0 {
                    return Err(KgError::InvalidProfile(format!(
                        "log mass needs gamma > 0, got {gamma}"
                    )));
                }
            }
            MassFamily::Custom(c) => {
                let m0 = (c.m)(0.0);
                if !m0.is_finite() {
                    return Err(KgError::InvalidProfile(format!(
                        "custom mass `{}` is not finite at t = 0",
                        c.label
                    )));
                }
            }
        }
        Ok(())
    }

    fn value(&self, speed: &SpeedFamily, t: f64) -> f64 {
        match self {
            MassFamily::Zero => 0.0,
            MassFamily::Power { mu0, p } => mu0 * (1.0 + t).powf(*p),
            MassFamily::ScaleInvariantMass { mu } => {
                let nat = speed.natural_primitive(t).expect("speed primitive failed");
                mu * speed.value(t) / nat
            }
            MassFamily::LogMass { mu, gamma } => {
                let e = std::f64::consts::E;
                mu / ((e + t) * (e + t).ln().powf(*gamma))
            }
            MassFamily::Custom(c) => (c.m)(t),
        }
    }

    fn deriv1(&self, speed: &SpeedFamily, t: f64) -> f64 {
        match self {
            MassFamily::Zero => 0.0,
            MassFamily::Power { mu0, p } => mu0 * p * (1.0 + t).powf(p - 1.0),
            MassFamily::ScaleInvariantMass { mu } => {
                let nat = speed.natural_primitive(t).expect("speed primitive failed");
                let a = speed.value(t);
                mu * (speed.deriv1(t) / nat - a * a / (nat * nat))
            }
            MassFamily::LogMass { gamma, .. } => {
                let e = std::f64::consts::E;
                let big_l = (e + t).ln();
                -self.value(speed, t) / (e + t) * (1.0 + gamma / big_l)
            }
            MassFamily::Custom(c) => match &c.m1 {
                Some(m1) => m1(t),
                None => fd1(&|s| (c.m)(s), t),
            },
        }
    }

    fn deriv2(&self, speed: &SpeedFamily, t: f64) -> f64 {
        match self {
            MassFamily::Zero => 0.0,
            MassFamily::Power { mu0, p } => mu0 * p * (p - 1.0) * (1.0 + t).powf(p - 2.0),
            MassFamily::ScaleInvariantMass { mu } => {
                let nat = speed.natural_primitive(t).expect("speed primitive failed");
                let a = speed.value(t);
                let a1 = speed.deriv1(t);
                let a2 = speed.deriv2(t);
                mu * (a2 / nat - 3.0 * a * a1 / (nat * nat) + 2.0 * a * a * a / (nat * nat * nat))
            }
            MassFamily::LogMass { gamma, .. } => {
                let e = std::f64::consts::E;
                let big_l = (e + t).ln();
                let g = gamma / big_l;
                self.value(speed, t) / ((e + t) * (e + t))
                    * (2.0 + 3.0 * g + (gamma * gamma + gamma) / (big_l * big_l))
            }
            MassFamily::Custom(c) => match &c.m2 {
                Some(m2) => m2(t),
                None => fd2(&|s| (c.m)(s), t),
            },
        }
    }

    fn has_analytic_derivatives(&self, speed: &SpeedFamily) -> bool {
        match self {
            MassFamily::ScaleInvariantMass { .. } => speed.has_analytic_derivatives(),
            MassFamily::Custom(c) => c.m1.is_some() && c.m2.is_some(),
            _ => true,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            MassFamily::Zero => "0".into(),
            MassFamily::Power { mu0, p } => format!("{mu0} (1+t)^{p}"),
            MassFamily::ScaleInvariantMass { mu } => format!("{mu} a/A"),
            MassFamily::LogMass { mu, gamma } => format!("{mu} / ((e+t) ln(e+t)^{gamma})"),
            MassFamily::Custom(c) => c.label.clone(),
        }
    }
}

/// Serializable recipe for a [`CoefficientProfile`]; what experiment configs
/// store. Custom closures have no serialized form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileSpec {
    #[serde(default)]
    pub label: Option<String>,
    pub speed: SpeedFamily,
    pub mass: MassFamily,
}

impl ProfileSpec {
    pub fn build(self) -> Result<CoefficientProfile> {
        let label = self
            .label
            .unwrap_or_else(|| format!("a = {}, m = {}", self.speed.describe(), self.mass.describe()));
        CoefficientProfile::new(label, self.speed, self.mass)
    }
}

/// A coefficient pair `(a, m)` with its derivatives and derived scales.
///
/// Immutable after construction and safe to share across threads; the only
/// interior state is the custom-speed quadrature memo, which is synchronized
/// and query-order independent.
#[derive(Debug, Clone)]
pub struct CoefficientProfile {
    label: String,
    speed: SpeedFamily,
    mass: MassFamily,
}

impl CoefficientProfile {
    pub fn new(label: impl Into<String>, speed: SpeedFamily, mass: MassFamily) -> Result<Self> {
        speed.validate()?;
        mass.validate()?;
        let profile = CoefficientProfile { label: label.into(), speed, mass };
        // Surface quadrature problems (custom speeds) right away.
        profile.primitive(1.0)?;
        let m0 = profile.m(0.0);
        if m0 < 0.0 {
            return Err(KgError::InvalidProfile(format!(
                "mass must be nonnegative at t = 0, got {m0}"
            )));
        }
        Ok(profile)
    }

    pub fn from_spec(spec: ProfileSpec) -> Result<Self> {
        spec.build()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ProfileSpec =
            toml::from_str(text).map_err(|e| KgError::Config(format!("profile parse: {e}")))?;
        spec.build()
    }

    /// The serializable recipe, when the profile uses named families only.
    pub fn spec(&self) -> ProfileSpec {
        ProfileSpec {
            label: Some(self.label.clone()),
            speed: self.speed.clone(),
            mass: self.mass.clone(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn speed(&self) -> &SpeedFamily {
        &self.speed
    }

    pub fn mass(&self) -> &MassFamily {
        &self.mass
    }

    pub fn a(&self, t: f64) -> f64 {
        self.speed.value(t)
    }

    pub fn a1(&self, t: f64) -> f64 {
        self.speed.deriv1(t)
    }

    pub fn a2(&self, t: f64) -> f64 {
        self.speed.deriv2(t)
    }

    pub fn m(&self, t: f64) -> f64 {
        self.mass.value(&self.speed, t)
    }

    pub fn m1(&self, t: f64) -> f64 {
        self.mass.deriv1(&self.speed, t)
    }

    pub fn m2(&self, t: f64) -> f64 {
        self.mass.deriv2(&self.speed, t)
    }

    /// `A(t) = 1 + ∫_0^t a`, with the quadrature error surfaced.
    pub fn primitive(&self, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Err(KgError::InvalidParameter(format!("primitive needs t >= 0, got {t}")));
        }
        self.speed.primitive(t)
    }

    /// `A(t)`, panicking on quadrature failure (closed-form families never
    /// fail; use [`CoefficientProfile::primitive`] to handle custom speeds
    /// gracefully).
    pub fn big_a(&self, t: f64) -> f64 {
        self.speed.primitive(t).expect("primitive quadrature failed")
    }

    /// The speed primitive in the family's own normalization (`A(0) = a0`
    /// for scale-invariant speeds, identical to `big_a` otherwise).
    pub fn natural_primitive(&self, t: f64) -> f64 {
        self.speed.natural_primitive(t).expect("primitive quadrature failed")
    }

    pub fn eta(&self, t: f64) -> f64 {
        self.a(t) / self.big_a(t)
    }

    /// `μ = m/η = m A / a`.
    pub fn mu(&self, t: f64) -> f64 {
        self.m(t) * self.big_a(t) / self.a(t)
    }

    /// `(η, μ)` with quadrature errors surfaced.
    pub fn eta_mu(&self, t: f64) -> Result<(f64, f64)> {
        let a = self.a(t);
        let big_a = self.primitive(t)?;
        let eta = a / big_a;
        Ok((eta, self.m(t) / eta))
    }

    fn analytic_mu_derivs(&self) -> bool {
        self.speed.has_analytic_derivatives() && self.mass.has_analytic_derivatives(&self.speed)
    }

    pub fn mu1(&self, t: f64) -> f64 {
        if self.analytic_mu_derivs() {
            let (a, a1) = (self.a(t), self.a1(t));
            let big_a = self.big_a(t);
            self.m1(t) * big_a / a + self.m(t) * (1.0 - big_a * a1 / (a * a))
        } else {
            fd1(&|s| self.mu(s), t)
        }
    }

    pub fn mu2(&self, t: f64) -> f64 {
        if self.analytic_mu_derivs() {
            let (a, a1, a2) = (self.a(t), self.a1(t), self.a2(t));
            let big_a = self.big_a(t);
            let q1 = 1.0 - big_a * a1 / (a * a);
            let q2 = (a * a1 + big_a * a2) / (a * a) - 2.0 * big_a * a1 * a1 / (a * a * a);
            self.m2(t) * big_a / a + 2.0 * self.m1(t) * q1 - self.m(t) * q2
        } else {
            fd2(&|s| self.mu(s), t)
        }
    }

    /// `γ(t) = max{a(t), m(t)}`, the energy growth scale of the effective
    /// regime.
    pub fn gamma_max(&self, t: f64) -> f64 {
        self.a(t).max(self.m(t))
    }

    /// `⟨ξ⟩(t) = (|ξ|² a² + m²)^{1/2}`.
    pub fn angular(&self, t: f64, xi: f64) -> f64 {
        (xi * self.a(t)).hypot(self.m(t))
    }

    /// `∂_t ⟨ξ⟩ = (a a' |ξ|² + m m') / ⟨ξ⟩`.
    pub fn angular_dt(&self, t: f64, xi: f64) -> f64 {
        let num = self.a(t) * self.a1(t) * xi * xi + self.m(t) * self.m1(t);
        num / self.angular(t, xi)
    }

    /// `∂_t² ⟨ξ⟩`.
    pub fn angular_dtt(&self, t: f64, xi: f64) -> f64 {
        let omega = self.angular(t, xi);
        let omega1 = self.angular_dt(t, xi);
        let (a, a1, a2) = (self.a(t), self.a1(t), self.a2(t));
        let (m, m1, m2) = (self.m(t), self.m1(t), self.m2(t));
        let num = (a1 * a1 + a * a2) * xi * xi + m1 * m1 + m * m2;
        num / omega - omega1 * omega1 / omega
    }

    pub fn check_hypothesis1(&self, grid: &[f64], opts: &HypothesisOptions) -> Result<HypothesisReport> {
        validate_grid(grid)?;
        let mut report = HypothesisReport::new(self.label.clone(), "speed shape", grid);

        let mut min_a = f64::INFINITY;
        let mut min_t = 0.0;
        let mut c1 = 0.0;
        let mut c1_t = grid[0];
        let mut c2 = 0.0;
        let mut c2_t = grid[0];
        for &t in grid {
            let a = self.a(t);
            if a < min_a {
                min_a = a;
                min_t = t;
            }
            let eta = self.eta(t);
            let r1 = self.a1(t).abs() / (a * eta);
            if r1 > c1 || !r1.is_finite() {
                c1 = r1;
                c1_t = t;
            }
            let r2 = self.a2(t).abs() / (a * eta * eta);
            if r2 > c2 || !r2.is_finite() {
                c2 = r2;
                c2_t = t;
            }
        }

        report.push_hard("a > 0", min_a, 0.0, min_t, min_a > 0.0);
        let cap = opts.constant_cap;
        report.push_hard("|a'| <= C1 a eta", c1, cap, c1_t, c1.is_finite() && c1 <= cap);
        report.push_hard("|a''| <= C2 a eta^2", c2, cap, c2_t, c2.is_finite() && c2 <= cap);

        let t_max = *grid.last().expect("non-empty grid");
        let a_end = self.primitive(t_max)?;
        report.push_soft(
            "A(T) >= threshold (a not integrable, heuristic)",
            a_end,
            opts.primitive_threshold,
            t_max,
            a_end >= opts.primitive_threshold,
        );
        if a_end < opts.primitive_threshold {
            report.notes.push(format!(
                "integrability heuristic: A({t_max}) = {a_end:.3e} stayed below {:.1e}; \
                 a longer horizon would strengthen the check",
                opts.primitive_threshold
            ));
        }
        let a0 = self.a(0.0);
        if (a0 - 1.0).abs() > opts.normalization_tol {
            report.notes.push(format!("speed is not normalized: a(0) = {a0:.6} (expected 1)"));
        }
        report.finish();
        Ok(report)
    }

    pub fn check_hypothesis2(&self, grid: &[f64], opts: &HypothesisOptions) -> Result<HypothesisReport> {
        validate_grid(grid)?;
        let mut report = HypothesisReport::new(self.label.clone(), "mass shape", grid);

        let mut min_m = f64::INFINITY;
        let mut min_t = 0.0;
        for &t in grid {
            let m = self.m(t);
            if m < min_m {
                min_m = m;
                min_t = t;
            }
        }
        report.push_hard("m > 0", min_m, 0.0, min_t, min_m > 0.0);

        if min_m > 0.0 {
            let cap = opts.constant_cap;
            let mut c1 = 0.0;
            let mut c1_t = grid[0];
            let mut c2 = 0.0;
            let mut c2_t = grid[0];
            for &t in grid {
                let mu = self.mu(t);
                let eta = self.eta(t);
                let r1 = self.mu1(t).abs() / (mu * eta);
                if r1 > c1 || !r1.is_finite() {
                    c1 = r1;
                    c1_t = t;
                }
                let r2 = self.mu2(t).abs() / (mu * eta * eta);
                if r2 > c2 || !r2.is_finite() {
                    c2 = r2;
                    c2_t = t;
                }
            }
            report.push_hard("|mu'| <= C1 mu eta", c1, cap, c1_t, c1.is_finite() && c1 <= cap);
            report.push_hard("|mu''| <= C2 mu eta^2", c2, cap, c2_t, c2.is_finite() && c2 <= cap);
        } else {
            report.notes.push("mass vanishes on the grid; mu-ratios skipped".into());
        }

        let m0 = self.m(0.0);
        if (m0 - 1.0).abs() > opts.normalization_tol {
            report.notes.push(format!("mass is not normalized: m(0) = {m0:.6} (expected 1)"));
        }
        report.finish();
        Ok(report)
    }
}

impl fmt::Display for CoefficientProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

pub(crate) fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(KgError::InvalidParameter("probe grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] < 0.0 {
        return Err(KgError::InvalidParameter(
            "probe grid must be sorted, strictly increasing and nonnegative".into(),
        ));
    }
    Ok(())
}

/// Caps and tolerances for the hypothesis probes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisOptions {
    /// A fitted constant above this cap marks the clause unsatisfied.
    pub constant_cap: f64,
    /// `A(T_max)` must exceed this for the non-integrability heuristic.
    pub primitive_threshold: f64,
    /// Tolerance on the `a(0) = m(0) = 1` normalization notes.
    pub normalization_tol: f64,
}

impl Default for HypothesisOptions {
    fn default() -> Self {
        HypothesisOptions { constant_cap: 1e3, primitive_threshold: 1e3, normalization_tol: 1e-6 }
    }
}

/// One inequality (or positivity/threshold) check over the probe grid.
#[derive(Debug, Clone, Serialize)]
pub struct ClauseCheck {
    pub name: String,
    /// Fitted least constant (or extremal value) over the grid.
    pub constant: f64,
    pub cap: f64,
    /// Grid point where the worst ratio was attained.
    pub worst_t: f64,
    pub satisfied: bool,
    /// Soft clauses (heuristics) are reported but never fail the hypothesis.
    pub hard: bool,
}

/// Outcome of probing one structural hypothesis on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub label: String,
    pub hypothesis: String,
    pub satisfied: bool,
    pub clauses: Vec<ClauseCheck>,
    pub notes: Vec<String>,
    pub grid: Vec<f64>,
}

impl HypothesisReport {
    pub(crate) fn new(label: String, hypothesis: &str, grid: &[f64]) -> Self {
        HypothesisReport {
            label,
            hypothesis: hypothesis.into(),
            satisfied: false,
            clauses: Vec::new(),
            notes: Vec::new(),
            grid: grid.to_vec(),
        }
    }

    pub(crate) fn push_hard(&mut self, name: &str, constant: f64, cap: f64, worst_t: f64, satisfied: bool) {
        self.clauses.push(ClauseCheck {
            name: name.into(),
            constant,
            cap,
            worst_t,
            satisfied,
            hard: true,
        });
    }

    pub(crate) fn push_soft(&mut self, name: &str, constant: f64, cap: f64, worst_t: f64, satisfied: bool) {
        self.clauses.push(ClauseCheck {
            name: name.into(),
            constant,
            cap,
            worst_t,
            satisfied,
            hard: false,
        });
    }

    pub(crate) fn finish(&mut self) {
        self.satisfied = self.clauses.iter().filter(|c| c.hard).all(|c| c.satisfied);
    }

    /// Fitted constant of the clause whose name starts with `prefix`.
    pub fn constant(&self, prefix: &str) -> Option<f64> {
        self.clauses.iter().find(|c| c.name.starts_with(prefix)).map(|c| c.constant)
    }
}

/// Deterministic probe grid: a linear backbone on `[0, t_max]` merged with
/// geometric refinement near zero.
pub fn probe_grid(t_max: f64, count: usize) -> Vec<f64> {
    assert!(t_max > 0.0 && count >= 4, "degenerate probe grid request");
    let n_lin = count / 2;
    let n_geo = count - n_lin;
    let mut grid = Vec::with_capacity(count + 1);
    grid.push(0.0);
    for j in 1..=n_lin {
        grid.push(t_max * j as f64 / n_lin as f64);
    }
    for k in 0..n_geo {
        // spans four decades below t_max
        grid.push(t_max * 10f64.powf(-4.0 * (n_geo - k) as f64 / n_geo as f64));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}
