//! Zone geometry on the extended phase space `(t, ξ)` and the refined
//! diagonalizer of the one-mode system.
//!
//! A mode `û_tt + ⟨ξ⟩(t)² û = 0` changes character along the separating
//! curve: at low `A|ξ|` the mass dominates and the system is treated as a
//! perturbed integral equation, at high `A|ξ|` it oscillates and is
//! diagonalized. Two inequalities are in use, depending on which estimate is
//! being run:
//!
//! * effective variant: `⟨ξ⟩(t) η(t)^{-1} = (A²|ξ|² + μ²)^{1/2} ⋛ N`,
//! * wavefront variant: `A(t)|ξ| ⋛ N`.
//!
//! In the oscillatory region the first-order system for
//! `U = (i⟨ξ⟩û, û_t)` is conjugated by the constant matrix `P`, then by the
//! refined diagonalizer `K = I + K₁`, and finally by the phase matrix `D`,
//! leaving a remainder of size `η²/⟨ξ⟩` that is integrable in time against
//! slowly varying data. The remainder returned by [`r2_matrix`] is computed
//! by carrying out the conjugation exactly in matrix arithmetic, so its
//! smallness is a checked property rather than an assumption.

use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientProfile;
use crate::error::{KgError, Result};
use crate::linalg::{C64, Mat2};
use crate::quad;

/// Which inequality splits the phase space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneVariant {
    /// `(A²|ξ|² + μ²)^{1/2} ⋛ N`; the split under which the diagonalizer
    /// estimates hold.
    Effective,
    /// `A|ξ| ⋛ N`; the split used by the low-frequency and scattering
    /// arguments.
    Wavefront,
}

/// Zone constant and variant, plus the search horizon for separating times.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ZoneGeometry {
    pub n: f64,
    pub variant: ZoneVariant,
    /// Separating-time searches give up beyond this time.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn default_horizon() -> f64 {
    1e9
}

impl ZoneGeometry {
    pub fn effective(n: f64) -> Self {
        ZoneGeometry { n, variant: ZoneVariant::Effective, horizon: default_horizon() }
    }

    pub fn wavefront(n: f64) -> Self {
        ZoneGeometry { n, variant: ZoneVariant::Wavefront, horizon: default_horizon() }
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    /// The quantity compared against `N`.
    pub fn boundary_value(&self, profile: &CoefficientProfile, t: f64, xi_norm: f64) -> f64 {
        match self.variant {
            ZoneVariant::Effective => {
                let big_a = profile.big_a(t);
                (big_a * xi_norm).hypot(profile.mu(t))
            }
            ZoneVariant::Wavefront => profile.big_a(t) * xi_norm,
        }
    }

    pub fn in_hyperbolic(&self, profile: &CoefficientProfile, t: f64, xi_norm: f64) -> bool {
        self.boundary_value(profile, t, xi_norm) >= self.n
    }

    /// First time at which the boundary value reaches `N`.
    ///
    /// Returns `0` when the point starts hyperbolic, `+∞` when the boundary
    /// is never reached (`|ξ| = 0` in the wavefront variant, or no crossing
    /// up to the horizon in the effective variant). The root is located by
    /// doubling plus bisection to absolute tolerance `1e-10` in `t`.
    pub fn separating_time(&self, profile: &CoefficientProfile, xi_norm: f64) -> Result<f64> {
        if xi_norm < 0.0 || !xi_norm.is_finite() {
            return Err(KgError::InvalidParameter(format!(
                "separating time needs a finite |xi| >= 0, got {xi_norm}"
            )));
        }
        let g = |t: f64| -> Result<f64> {
            profile.primitive(t)?;
            Ok(self.boundary_value(profile, t, xi_norm) - self.n)
        };
        if g(0.0)? >= 0.0 {
            return Ok(0.0);
        }
        if self.variant == ZoneVariant::Wavefront && xi_norm == 0.0 {
            return Ok(f64::INFINITY);
        }

        let mut lo = 0.0;
        let mut hi = 1.0;
        loop {
            if g(hi)? >= 0.0 {
                break;
            }
            lo = hi;
            hi *= 2.0;
            if lo >= self.horizon {
                return match self.variant {
                    ZoneVariant::Effective => Ok(f64::INFINITY),
                    ZoneVariant::Wavefront => Err(KgError::BracketNotFound(format!(
                        "A|xi| (|xi| = {xi_norm:.3e}) stayed below N = {} up to t = {lo:.3e}",
                        self.n
                    ))),
                };
            }
        }
        while hi - lo > 1e-10 && (hi - lo) > 1e-15 * hi {
            let mid = 0.5 * (lo + hi);
            if g(mid)? >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// The two pointwise symbols entering the mode analysis.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SymbolValues {
    /// `⟨ξ⟩(t) = (|ξ|²a² + m²)^{1/2}`.
    pub xi_bracket: f64,
    /// `h(t,ξ) = (|ξ|²a² + N²η²)^{1/2}`, the free-wave symbol regularized at
    /// small frequencies.
    pub h: f64,
}

pub fn symbols(profile: &CoefficientProfile, n: f64, t: f64, xi_norm: f64) -> SymbolValues {
    let a = profile.a(t);
    SymbolValues {
        xi_bracket: profile.angular(t, xi_norm),
        h: (xi_norm * a).hypot(n * profile.eta(t)),
    }
}

/// Constant diagonalizer of the principal part, `P = (1/√2)[[1,1],[-1,1]]`.
pub fn p_matrix() -> Mat2 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Mat2::from_real(s, s, -s, s)
}

pub fn p_inverse() -> Mat2 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Mat2::from_real(s, -s, s, s)
}

/// `d(t,ξ) = ∂_t⟨ξ⟩ / ⟨ξ⟩²`, the small parameter of the refinement; bounded
/// by `C/N` in the hyperbolic zone.
pub fn refinement_parameter(profile: &CoefficientProfile, t: f64, xi_norm: f64) -> f64 {
    let omega = profile.angular(t, xi_norm);
    profile.angular_dt(t, xi_norm) / (omega * omega)
}

/// `K₁`, the off-diagonal corrector: `K = I + K₁` removes the off-diagonal
/// part of the first remainder.
pub fn k1_matrix(profile: &CoefficientProfile, t: f64, xi_norm: f64) -> Mat2 {
    let d = refinement_parameter(profile, t, xi_norm);
    k1_from_parameter(d)
}

fn k1_from_parameter(d: f64) -> Mat2 {
    // (d/4i) [[0,1],[-1,0]]; the sign is fixed by requiring the commutator
    // with the principal diagonal to cancel the off-diagonal remainder.
    Mat2 {
        a: C64::new(0.0, 0.0),
        b: C64::new(0.0, -0.25 * d),
        c: C64::new(0.0, 0.25 * d),
        d: C64::new(0.0, 0.0),
    }
}

/// Refined diagonalizer `K = I + K₁`, its inverse, and the remainder scale
/// `η²/⟨ξ⟩` at `(t, ξ)`.
///
/// Valid in the hyperbolic zone `⟨ξ⟩/η ≥ N`; outside it the corrector is not
/// small and the call is rejected.
pub fn diagonalizer(
    profile: &CoefficientProfile,
    t: f64,
    xi_norm: f64,
    n: f64,
) -> Result<(Mat2, Mat2, f64)> {
    let omega = profile.angular(t, xi_norm);
    let eta = profile.eta(t);
    if omega / eta < n {
        return Err(KgError::InvalidParameter(format!(
            "({t:.3e}, {xi_norm:.3e}) lies outside the hyperbolic zone for N = {n}"
        )));
    }
    let k1 = k1_matrix(profile, t, xi_norm);
    let k = Mat2::identity() + k1;
    let det = k.det();
    if det.norm() < 0.5 {
        return Err(KgError::DiagonalizerSingular { t, k: k1.b.norm() });
    }
    let k_inv = k.inv().expect("determinant checked above");
    Ok((k, k_inv, eta * eta / omega))
}

/// First remainder after conjugation by `P`:
/// `R₁ = (∂_t⟨ξ⟩/2⟨ξ⟩)[[1,1],[1,1]]`.
pub fn r1_matrix(profile: &CoefficientProfile, t: f64, xi_norm: f64) -> Mat2 {
    let omega = profile.angular(t, xi_norm);
    let s = 0.5 * profile.angular_dt(t, xi_norm) / omega;
    Mat2::from_real(s, s, s, s)
}

/// Remainder after the refined step, of size `O(η²/⟨ξ⟩)`.
///
/// Computed exactly: with `M_V = i⟨ξ⟩ diag(-1,1) + R₁` the conjugated
/// system matrix is `M_W = K⁻¹(M_V K - ∂_t K)`, and
/// `R₂ = M_W - i⟨ξ⟩ diag(-1,1) - (∂_t⟨ξ⟩/2⟨ξ⟩) I`. No asymptotic identity
/// is assumed, so a wrong sign anywhere would show up immediately as a
/// first-order (not second-order) remainder.
pub fn r2_matrix(profile: &CoefficientProfile, t: f64, xi_norm: f64) -> Result<Mat2> {
    let omega = profile.angular(t, xi_norm);
    let omega1 = profile.angular_dt(t, xi_norm);
    let omega2 = profile.angular_dtt(t, xi_norm);
    let d = omega1 / (omega * omega);
    let d_dot = omega2 / (omega * omega) - 2.0 * omega1 * omega1 / (omega * omega * omega);

    let k1 = k1_from_parameter(d);
    let k = Mat2::identity() + k1;
    if k.det().norm() < 0.5 {
        return Err(KgError::DiagonalizerSingular { t, k: k1.b.norm() });
    }
    let k_inv = k.inv().expect("determinant checked above");
    let k_dot = k1_from_parameter(d_dot);

    let lam = Mat2::diag(C64::new(0.0, -omega), C64::new(0.0, omega));
    let half = 0.5 * omega1 / omega;
    let r1 = Mat2::from_real(half, half, half, half);
    let m_v = lam + r1;
    let m_w = k_inv * (m_v * k - k_dot);
    Ok(m_w - lam - Mat2::from_real(half, 0.0, 0.0, half))
}

/// Oscillatory phase transfer `D(t,s,ξ) = diag(e^{-iθ}, e^{iθ})` with
/// `θ = ∫_s^t ⟨ξ⟩ dτ`.
pub fn phase_matrix(
    profile: &CoefficientProfile,
    s: f64,
    t: f64,
    xi_norm: f64,
) -> Result<Mat2> {
    let theta = phase_integral(profile, s, t, xi_norm)?;
    Ok(phase_from_angle(theta))
}

/// `∫_s^t ⟨ξ⟩ dτ` by adaptive quadrature.
pub fn phase_integral(profile: &CoefficientProfile, s: f64, t: f64, xi_norm: f64) -> Result<f64> {
    Ok(quad::integrate(|tau| profile.angular(tau, xi_norm), s, t, 1e-12, 1e-14)?.value)
}

pub fn phase_from_angle(theta: f64) -> Mat2 {
    Mat2::diag(C64::from_polar(1.0, -theta), C64::from_polar(1.0, theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{MassFamily, SpeedFamily};
    use approx::assert_relative_eq;

    fn profile(speed: SpeedFamily, mass: MassFamily) -> CoefficientProfile {
        CoefficientProfile::new("test", speed, mass).unwrap()
    }

    fn unit_speed() -> CoefficientProfile {
        profile(SpeedFamily::Polynomial { ell: 0.0 }, MassFamily::Zero)
    }

    #[test]
    fn wavefront_separating_time_for_unit_speed() {
        let p = unit_speed();
        let geom = ZoneGeometry::wavefront(1.0);
        // A = 1+t, so A|xi| = 1 at |xi| = 1/4 when t = 3.
        let theta = geom.separating_time(&p, 0.25).unwrap();
        assert_relative_eq!(theta, 3.0, epsilon = 1e-9);
        assert_eq!(geom.separating_time(&p, 1.0).unwrap(), 0.0);
        assert_eq!(geom.separating_time(&p, 2.5).unwrap(), 0.0);
        assert!(geom.separating_time(&p, 0.0).unwrap().is_infinite());
    }

    #[test]
    fn wavefront_separating_time_for_exponential_speed() {
        let p = profile(SpeedFamily::Exponential { lambda: 1.0 }, MassFamily::Zero);
        let geom = ZoneGeometry::wavefront(10.0);
        // A = e^t exactly, so the crossing sits at ln 10.
        let theta = geom.separating_time(&p, 1.0).unwrap();
        assert_relative_eq!(theta, 10f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn effective_separating_time_follows_mu() {
        // a = m = 1+t: mu = A grows, so even |xi| = 0 leaves the
        // pseudo-differential zone.
        let p = profile(
            SpeedFamily::Polynomial { ell: 1.0 },
            MassFamily::Power { mu0: 1.0, p: 1.0 },
        );
        let geom = ZoneGeometry::effective(10.0);
        let theta = geom.separating_time(&p, 1e-6).unwrap();
        // A(t) = 10/sqrt(1+1e-12) up to the tiny xi contribution.
        assert_relative_eq!(theta, 19f64.sqrt() - 1.0, epsilon = 1e-6);
        assert!(geom.separating_time(&p, 0.0).unwrap().is_finite());
    }

    #[test]
    fn effective_zone_never_exited_for_small_constant_mu() {
        let p = profile(
            SpeedFamily::Exponential { lambda: 1.0 },
            MassFamily::ScaleInvariantMass { mu: 1.0 },
        );
        let geom = ZoneGeometry::effective(10.0).with_horizon(1e6);
        assert!(geom.separating_time(&p, 0.0).unwrap().is_infinite());
        // but any positive frequency leaves through the A|xi| part
        assert!(geom.separating_time(&p, 1e-3).unwrap().is_finite());
    }

    #[test]
    fn symbol_values_dominate_their_parts() {
        let p = profile(
            SpeedFamily::Polynomial { ell: 1.0 },
            MassFamily::Power { mu0: 1.0, p: 0.0 },
        );
        for &(t, xi) in &[(0.0, 0.5), (3.0, 2.0), (10.0, 1e-3)] {
            let s = symbols(&p, 10.0, t, xi);
            assert!(s.xi_bracket >= xi * p.a(t));
            assert!(s.xi_bracket >= p.m(t));
            assert!(s.h >= 10.0 * p.eta(t));
        }
    }

    #[test]
    fn constant_coefficients_need_no_refinement() {
        let p = profile(
            SpeedFamily::Polynomial { ell: 0.0 },
            MassFamily::Power { mu0: 1.0, p: 0.0 },
        );
        let (k, k_inv, _) = diagonalizer(&p, 4.0, 20.0, 10.0).unwrap();
        assert!((k - Mat2::identity()).frobenius_norm() < 1e-15);
        assert!((k_inv - Mat2::identity()).frobenius_norm() < 1e-15);
    }

    #[test]
    fn k1_matches_finite_difference_symbol_derivative() {
        let p = profile(
            SpeedFamily::Polynomial { ell: 2.0 },
            MassFamily::ScaleInvariantMass { mu: 1.0 },
        );
        let (t, xi) = (0.0, 1.0);
        let h = 1e-6;
        let fd = (p.angular(t + h, xi) - p.angular(t, xi)) / h;
        let omega = p.angular(t, xi);
        let expected = 0.25 * fd / (omega * omega);
        let k1 = k1_matrix(&p, t, xi);
        assert_relative_eq!(k1.b.im, -expected, max_relative = 1e-5);
        assert_relative_eq!(k1.c.im, expected, max_relative = 1e-5);
    }

    #[test]
    fn diagonalizer_inverse_is_exact() {
        let p = profile(
            SpeedFamily::Exponential { lambda: 1.0 },
            MassFamily::ScaleInvariantMass { mu: 2.0 },
        );
        for &(t, xi) in &[(3.0, 1.0), (5.0, 0.3), (8.0, 2.0)] {
            let (k, k_inv, _) = diagonalizer(&p, t, xi, 10.0).unwrap();
            assert!((k * k_inv - Mat2::identity()).frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn diagonalizer_rejects_pseudo_zone_points() {
        let p = profile(
            SpeedFamily::Polynomial { ell: 0.0 },
            MassFamily::ScaleInvariantMass { mu: 0.5 },
        );
        // at t = 0: omega/eta = sqrt(xi^2 + 0.25), far below N = 10
        assert!(diagonalizer(&p, 0.0, 0.1, 10.0).is_err());
    }

    #[test]
    fn refined_remainder_is_second_order_small() {
        // For a = e^t with constant mass the remainder should stay a bounded
        // multiple of eta^2/omega, while the unrefined remainder R1 is only
        // O(eta). Checks both the smallness and the sign conventions: a sign
        // slip anywhere turns R2 first-order and the ratio blows up.
        let p = profile(
            SpeedFamily::Exponential { lambda: 1.0 },
            MassFamily::ScaleInvariantMass { mu: 1.0 },
        );
        let xi = 1.0;
        let mut worst_ratio: f64 = 0.0;
        for k in 0..=40 {
            let t = 3.0 + 7.0 * k as f64 / 40.0;
            let r2 = r2_matrix(&p, t, xi).unwrap();
            let scale = p.eta(t) * p.eta(t) / p.angular(t, xi);
            worst_ratio = worst_ratio.max(r2.op_norm() / scale);
        }
        assert!(worst_ratio < 1.0, "R2 exceeded its promised scale: {worst_ratio}");

        let t = 6.0;
        let r1 = r1_matrix(&p, t, xi).op_norm();
        let r2 = r2_matrix(&p, t, xi).unwrap().op_norm();
        assert!(r2 < 1e-2 * r1);
    }

    #[test]
    fn phase_matrix_basics() {
        let p = unit_speed();
        let id = phase_matrix(&p, 2.0, 2.0, 1.0).unwrap();
        assert!((id - Mat2::identity()).frobenius_norm() < 1e-14);

        // a = 1, m = 0, xi = 1: theta = pi over [0, pi], so D = -I.
        let d = phase_matrix(&p, 0.0, std::f64::consts::PI, 1.0).unwrap();
        assert!((d - Mat2::identity().scale(C64::new(-1.0, 0.0))).frobenius_norm() < 1e-12);
    }

    #[test]
    fn phase_integral_matches_closed_form() {
        let p = profile(
            SpeedFamily::Exponential { lambda: 1.0 },
            MassFamily::Power { mu0: 1.0, p: 0.0 },
        );
        // ∫ sqrt(1+e^{2t}) dt = sqrt(1+e^{2t}) - asinh(e^{-t})
        let anti = |t: f64| (1.0 + (2.0 * t).exp()).sqrt() - (-t).exp().asinh();
        let exact = anti(1.0) - anti(0.0);
        let theta = phase_integral(&p, 0.0, 1.0, 1.0).unwrap();
        assert_relative_eq!(theta, exact, max_relative = 1e-12);
    }

    #[test]
    fn phase_entries_have_unit_modulus() {
        let p = profile(
            SpeedFamily::Polynomial { ell: 1.5 },
            MassFamily::Power { mu0: 0.7, p: -1.0 },
        );
        let d = phase_matrix(&p, 0.3, 17.0, 2.4).unwrap();
        assert_relative_eq!(d.a.norm(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(d.d.norm(), 1.0, max_relative = 1e-12);
        assert!(d.det().norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn p_conjugation_diagonalizes_principal_part() {
        // P^{-1} [[0,1],[1,0]] P = diag(-1, 1)
        let swap = Mat2::from_real(0.0, 1.0, 1.0, 0.0);
        let diag = p_inverse() * swap * p_matrix();
        assert!((diag - Mat2::from_real(-1.0, 0.0, 0.0, 1.0)).frobenius_norm() < 1e-15);
        assert!((p_matrix() * p_inverse() - Mat2::identity()).frobenius_norm() < 1e-15);
    }
}
