//! Long-horizon integration of single Fourier modes and the energy
//! bookkeeping built on top of it.
//!
//! Each mode solves `û_tt + ⟨ξ⟩(t)² û = 0`. Resolving the oscillation
//! directly costs one step per period, which is hopeless over exponentially
//! long horizons, so the march is hybrid: the mode is integrated directly
//! until it enters the hyperbolic zone `⟨ξ⟩/η ≥ N`, then handed to the
//! slow variable `Z` obtained from the exact conjugation chain
//! `U = P K √(⟨ξ⟩(t)/⟨ξ⟩(s)) D(φ) Z` with `∂_t Z = D⁻¹R₂D Z`. Since `R₂`
//! decays like `η²/⟨ξ⟩`, the `Z` march takes steps bounded by the slow scale
//! `1/η` instead of the period `2π/⟨ξ⟩`. Both representations are evaluated
//! just past the switch and their mismatch is recorded as a diagnostic.
//!
//! Low frequencies never reach the zone and stay on the direct march, which
//! is cheap there because `⟨ξ⟩` stays small. The pseudodifferential-zone
//! micro-energy `V = (ψηû, ψû_t − ψ′û)` has its own fundamental solution,
//! integrated as a real 2×2 system.

use std::cell::RefCell;
use std::f64::consts::TAU;

use crate::classify::PsiProfile;
use crate::coeffs::CoefficientProfile;
use crate::error::{KgError, Result};
use crate::linalg::{C64, Mat2};
use crate::ode::{self, OdeOptions};
use crate::zones::{self, ZoneGeometry};

/// Knobs for a mode integration.
#[derive(Debug, Clone, Copy)]
pub struct ModeOptions {
    /// Local error tolerance of the adaptive stepper.
    pub tol: f64,
    /// Zone constant `N` separating pseudodifferential from hyperbolic.
    pub zone_n: f64,
    /// Step cap on the direct march, as a fraction of the local period.
    pub cap_fraction: f64,
    /// Disable the hybrid switch and resolve every oscillation.
    pub force_direct: bool,
    /// Continue the direct march a few periods past the switch and record
    /// the relative mismatch of the two representations.
    pub overlap_check: bool,
}

impl Default for ModeOptions {
    fn default() -> Self {
        ModeOptions {
            tol: 1e-10,
            zone_n: 10.0,
            cap_fraction: 0.25,
            force_direct: false,
            overlap_check: true,
        }
    }
}

/// One integrated mode, sampled at the requested times.
#[derive(Debug, Clone)]
pub struct ModeTrajectory {
    pub xi_norm: f64,
    pub times: Vec<f64>,
    pub u_hat: Vec<C64>,
    pub u_hat_t: Vec<C64>,
    /// Micro-energy vector `U = (i⟨ξ⟩û, û_t)` at each sample.
    pub u_micro: Vec<[C64; 2]>,
    /// Time at which the march switched to the slow variable, if it did.
    pub switch_time: Option<f64>,
    /// Relative disagreement of the direct and slow representations a few
    /// periods past the switch.
    pub overlap_mismatch: Option<f64>,
}

impl ModeTrajectory {
    pub fn micro_vector(&self, i: usize) -> [C64; 2] {
        self.u_micro[i]
    }

    /// `|U|² = ⟨ξ⟩²|û|² + |û_t|²` at sample `i`.
    pub fn micro_norm_sqr(&self, i: usize) -> f64 {
        let [u1, u2] = self.u_micro[i];
        u1.norm_sqr() + u2.norm_sqr()
    }

    /// Index of the sample at time `t`, within rounding slack.
    pub fn sample_index(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * (1.0 + t.abs());
        let i = self.times.partition_point(|&s| s < t - tol);
        (i < self.times.len() && (self.times[i] - t).abs() <= tol).then_some(i)
    }
}

/// Refined corrector `K = I + K₁` and its inverse at `(t, ξ)`.
fn corrector(profile: &CoefficientProfile, t: f64, xi_norm: f64) -> Result<(Mat2, Mat2)> {
    let k1 = zones::k1_matrix(profile, t, xi_norm);
    let k = Mat2::identity() + k1;
    if k.det().norm() < 0.5 {
        return Err(KgError::DiagonalizerSingular { t, k: k1.b.norm() });
    }
    let k_inv = k.inv().expect("determinant checked above");
    Ok((k, k_inv))
}

/// Rebuild `(û, û_t, U)` from the slow state `[Re z₁, Im z₁, Re z₂, Im z₂, φ]`.
fn reconstruct(
    profile: &CoefficientProfile,
    xi_norm: f64,
    omega_switch: f64,
    t: f64,
    z: &[f64; 5],
) -> Result<(C64, C64, [C64; 2])> {
    let omega = profile.angular(t, xi_norm);
    let scale = (omega / omega_switch).sqrt();
    let (k, _) = corrector(profile, t, xi_norm)?;
    let phase = zones::phase_from_angle(z[4]);
    let zv = [C64::new(z[0], z[1]), C64::new(z[2], z[3])];
    let w = phase.mul_vec(&zv);
    let w = [scale * w[0], scale * w[1]];
    let u = zones::p_matrix().mul_vec(&k.mul_vec(&w));
    let u_hat = u[0] / (C64::i() * omega);
    Ok((u_hat, u[1], u))
}

fn note_error(slot: &RefCell<Option<KgError>>, e: KgError) {
    let mut s = slot.borrow_mut();
    if s.is_none() {
        *s = Some(e);
    }
}

/// The switch is only taken when the whole remaining interval stays inside
/// the hyperbolic zone; a dip back out would invalidate the slow march.
fn zone_holds(
    profile: &CoefficientProfile,
    geom: &ZoneGeometry,
    xi_norm: f64,
    lo: f64,
    hi: f64,
) -> bool {
    (1..=128).all(|j| {
        let t = lo + (hi - lo) * j as f64 / 128.0;
        geom.in_hyperbolic(profile, t, xi_norm)
    })
}

/// Integrate one mode from rest data `(û(0), û_t(0))` up to `t_end`,
/// recording the state at each requested sample time.
///
/// The direct march caps its step at a fraction of the local period; once
/// the mode enters the hyperbolic zone for good, the slow variable takes
/// over and the step is bounded by `1/η` instead. Sample times must be
/// strictly increasing inside `[0, t_end]`.
pub fn integrate_mode(
    profile: &CoefficientProfile,
    xi_norm: f64,
    data: (C64, C64),
    t_end: f64,
    samples: &[f64],
    opts: &ModeOptions,
) -> Result<ModeTrajectory> {
    if !xi_norm.is_finite() || xi_norm < 0.0 {
        return Err(KgError::InvalidParameter(format!("|xi| must be finite and >= 0, got {xi_norm}")));
    }
    if !t_end.is_finite() || t_end <= 0.0 {
        return Err(KgError::InvalidParameter(format!("t_end must be finite and > 0, got {t_end}")));
    }
    if !(opts.tol > 0.0) || !(opts.cap_fraction > 0.0) {
        return Err(KgError::InvalidParameter(
            "tolerance and step-cap fraction must be positive".into(),
        ));
    }
    if samples.windows(2).any(|w| w[1] <= w[0]) {
        return Err(KgError::InvalidParameter("sample times must be strictly increasing".into()));
    }
    if samples.first().is_some_and(|&s| s < 0.0) || samples.last().is_some_and(|&s| s > t_end) {
        return Err(KgError::InvalidParameter(format!(
            "sample times must lie in [0, {t_end}]"
        )));
    }

    let mut times = Vec::with_capacity(samples.len());
    let mut u_hat = Vec::with_capacity(samples.len());
    let mut u_hat_t = Vec::with_capacity(samples.len());
    let mut u_micro = Vec::with_capacity(samples.len());
    let mut record = |t: f64, u: C64, ut: C64| {
        let omega = profile.angular(t, xi_norm);
        times.push(t);
        u_hat.push(u);
        u_hat_t.push(ut);
        u_micro.push([C64::i() * omega * u, ut]);
    };

    let amp = (data.0.norm_sqr() + data.1.norm_sqr()).sqrt();
    if amp == 0.0 {
        for &t in samples {
            record(t, C64::new(0.0, 0.0), C64::new(0.0, 0.0));
        }
        return Ok(ModeTrajectory {
            xi_norm,
            times,
            u_hat,
            u_hat_t,
            u_micro,
            switch_time: None,
            overlap_mismatch: None,
        });
    }

    let switch = if opts.force_direct {
        None
    } else {
        let geom = ZoneGeometry::effective(opts.zone_n).with_horizon(t_end);
        match geom.separating_time(profile, xi_norm) {
            Ok(theta) if theta < t_end && zone_holds(profile, &geom, xi_norm, theta, t_end) => {
                Some(theta)
            }
            Ok(_) => None,
            Err(KgError::BracketNotFound(_)) => None,
            Err(e) => return Err(e),
        }
    };

    let ode_opts = OdeOptions {
        rel_tol: opts.tol,
        abs_tol: 1e-2 * opts.tol * amp,
        h_init: None,
        max_steps: 50_000_000,
    };
    let direct_rhs = |t: f64, y: &[f64; 4], dy: &mut [f64; 4]| {
        let omega = profile.angular(t, xi_norm);
        let w2 = omega * omega;
        dy[0] = y[2];
        dy[1] = y[3];
        dy[2] = -w2 * y[0];
        dy[3] = -w2 * y[1];
    };
    let direct_cap = |t: f64, _y: &[f64; 4]| {
        let omega = profile.angular(t, xi_norm);
        if omega > 0.0 { opts.cap_fraction * TAU / omega } else { f64::INFINITY }
    };

    if samples.first() == Some(&0.0) {
        record(0.0, data.0, data.1);
    }

    let t_direct = switch.unwrap_or(t_end);
    let mut y = [data.0.re, data.0.im, data.1.re, data.1.im];
    if t_direct > 0.0 {
        let direct_samples: Vec<f64> =
            samples.iter().copied().filter(|&s| s > 0.0 && s <= t_direct).collect();
        y = ode::integrate(
            direct_rhs,
            0.0,
            t_direct,
            y,
            &ode_opts,
            direct_cap,
            &direct_samples,
            |t, y| record(t, C64::new(y[0], y[1]), C64::new(y[2], y[3])),
        )?;
    }

    let mut overlap_mismatch = None;
    if let Some(theta) = switch {
        let omega_switch = profile.angular(theta, xi_norm);
        let u_sw = [
            C64::i() * omega_switch * C64::new(y[0], y[1]),
            C64::new(y[2], y[3]),
        ];
        let (_, k_inv) = corrector(profile, theta, xi_norm)?;
        let w_sw = k_inv.mul_vec(&zones::p_inverse().mul_vec(&u_sw));
        let z0 = [w_sw[0].re, w_sw[0].im, w_sw[1].re, w_sw[1].im, 0.0];
        let z_amp = (w_sw[0].norm_sqr() + w_sw[1].norm_sqr()).sqrt();
        let z_opts = OdeOptions {
            rel_tol: opts.tol,
            abs_tol: 1e-2 * opts.tol * z_amp.max(f64::MIN_POSITIVE),
            h_init: None,
            max_steps: 50_000_000,
        };

        let slow_err: RefCell<Option<KgError>> = RefCell::new(None);
        let slow_rhs = |t: f64, y: &[f64; 5], dy: &mut [f64; 5]| {
            let r2 = match zones::r2_matrix(profile, t, xi_norm) {
                Ok(r) => r,
                Err(e) => {
                    note_error(&slow_err, e);
                    Mat2::from_real(0.0, 0.0, 0.0, 0.0)
                }
            };
            let rot = C64::from_polar(1.0, 2.0 * y[4]);
            let z1 = C64::new(y[0], y[1]);
            let z2 = C64::new(y[2], y[3]);
            let dz1 = r2.a * z1 + r2.b * rot * z2;
            let dz2 = r2.c * rot.conj() * z1 + r2.d * z2;
            dy[0] = dz1.re;
            dy[1] = dz1.im;
            dy[2] = dz2.re;
            dy[3] = dz2.im;
            dy[4] = profile.angular(t, xi_norm);
        };
        let slow_cap = |t: f64, _y: &[f64; 5]| 0.25 / profile.eta(t);

        let slow_samples: Vec<f64> = samples.iter().copied().filter(|&s| s > theta).collect();
        ode::integrate(
            slow_rhs,
            theta,
            t_end,
            z0,
            &z_opts,
            slow_cap,
            &slow_samples,
            |t, z| match reconstruct(profile, xi_norm, omega_switch, t, z) {
                Ok((u, ut, _)) => record(t, u, ut),
                Err(e) => note_error(&slow_err, e),
            },
        )?;
        if let Some(e) = slow_err.borrow_mut().take() {
            return Err(e);
        }

        if opts.overlap_check {
            let t_overlap = (theta + 5.0 * TAU / omega_switch).min(t_end);
            if t_overlap > theta + 1e-12 * (1.0 + theta) {
                let yd = ode::integrate(
                    direct_rhs,
                    theta,
                    t_overlap,
                    y,
                    &ode_opts,
                    direct_cap,
                    &[],
                    |_, _| {},
                )?;
                let zo = ode::integrate(
                    slow_rhs,
                    theta,
                    t_overlap,
                    z0,
                    &z_opts,
                    slow_cap,
                    &[],
                    |_, _| {},
                )?;
                if let Some(e) = slow_err.borrow_mut().take() {
                    return Err(e);
                }
                let omega_o = profile.angular(t_overlap, xi_norm);
                let u_direct = [
                    C64::i() * omega_o * C64::new(yd[0], yd[1]),
                    C64::new(yd[2], yd[3]),
                ];
                let (_, _, u_slow) = reconstruct(profile, xi_norm, omega_switch, t_overlap, &zo)?;
                let diff = ((u_direct[0] - u_slow[0]).norm_sqr()
                    + (u_direct[1] - u_slow[1]).norm_sqr())
                .sqrt();
                let base = (u_direct[0].norm_sqr() + u_direct[1].norm_sqr()).sqrt();
                overlap_mismatch = Some(if base > 0.0 { diff / base } else { diff });
            } else {
                overlap_mismatch = Some(0.0);
            }
        }
    }

    Ok(ModeTrajectory {
        xi_norm,
        times,
        u_hat,
        u_hat_t,
        u_micro,
        switch_time: switch,
        overlap_mismatch,
    })
}

/// Two-sided energy ratio `r = |U(t)|² ⟨ξ⟩(s) / (|U(s)|² ⟨ξ⟩(t))` between two
/// sampled times of a trajectory.
///
/// On hyperbolic-zone segments `r` stays inside a frequency-independent
/// interval `[C₁, C₂]`; callers are responsible for choosing `s, t` there.
pub fn two_sided_check(
    traj: &ModeTrajectory,
    s: f64,
    t: f64,
    profile: &CoefficientProfile,
) -> Result<f64> {
    let is = traj
        .sample_index(s)
        .ok_or_else(|| KgError::InvalidParameter(format!("s = {s} is not a sample time")))?;
    let it = traj
        .sample_index(t)
        .ok_or_else(|| KgError::InvalidParameter(format!("t = {t} is not a sample time")))?;
    let ref_sqr = traj.micro_norm_sqr(is);
    if ref_sqr == 0.0 {
        return Err(KgError::DegenerateData(format!(
            "|U({s})| = 0, the energy ratio is undefined"
        )));
    }
    let omega_s = profile.angular(s, traj.xi_norm);
    let omega_t = profile.angular(t, traj.xi_norm);
    Ok(traj.micro_norm_sqr(it) * omega_s / (ref_sqr * omega_t))
}

/// Micro-energy state in the pseudodifferential zone.
#[derive(Debug, Clone)]
pub struct PseudoZoneState {
    /// `V = (ψηû, ψû_t − ψ′û)` transported to the requested time.
    pub v: [C64; 2],
    /// Fundamental solution `E(t, 0, ξ)` of the first-order system for `V`,
    /// columns indexed by the starting direction.
    pub e_matrix: [[f64; 2]; 2],
}

impl PseudoZoneState {
    pub fn e_op_norm(&self) -> f64 {
        let [[a, b], [c, d]] = self.e_matrix;
        let m = Mat2::from_real(a, b, c, d);
        m.op_norm()
    }
}

/// Fundamental solution of the `V`-system
/// `∂_t V = [[η′/η + 2ψ′/ψ, η], [−(ψ″/ψ + ⟨ξ⟩²)/η, 0]] V` on `[0, t]`,
/// together with the transported data.
///
/// Valid below the separating time of the wavefront variant; beyond it the
/// call is a zone violation. The uniform bound `‖E‖ ≤ C` on `[0, θ_{|ξ|}]`
/// is the estimate under test, not an assumption.
pub fn pseudo_zone_fundamental(
    profile: &CoefficientProfile,
    psi: &PsiProfile,
    xi_norm: f64,
    t: f64,
    data: (C64, C64),
    opts: &ModeOptions,
) -> Result<PseudoZoneState> {
    if !xi_norm.is_finite() || xi_norm < 0.0 {
        return Err(KgError::InvalidParameter(format!("|xi| must be finite and >= 0, got {xi_norm}")));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(KgError::InvalidParameter(format!("t must be finite and >= 0, got {t}")));
    }
    let geom = ZoneGeometry::wavefront(opts.zone_n).with_horizon(1e9_f64.max(2.0 * t));
    let theta = match geom.separating_time(profile, xi_norm) {
        Ok(th) => th,
        Err(KgError::BracketNotFound(_)) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    if t > theta {
        return Err(KgError::ZoneViolation { t, theta, xi: xi_norm });
    }

    let system = |tau: f64, y: &[f64; 4], dy: &mut [f64; 4]| {
        let eta = profile.eta(tau);
        let a11 = profile.a1(tau) / profile.a(tau) - eta + 2.0 * psi.log_derivative(tau);
        let omega = profile.angular(tau, xi_norm);
        let a21 = -(psi.psi2(tau) / psi.psi(tau) + omega * omega) / eta;
        dy[0] = a11 * y[0] + eta * y[1];
        dy[1] = a21 * y[0];
        dy[2] = a11 * y[2] + eta * y[3];
        dy[3] = a21 * y[2];
    };
    let y0 = [1.0, 0.0, 0.0, 1.0];
    let y = if t > 0.0 {
        let ode_opts = OdeOptions {
            rel_tol: opts.tol,
            abs_tol: 1e-2 * opts.tol,
            h_init: None,
            max_steps: 50_000_000,
        };
        ode::integrate(system, 0.0, t, y0, &ode_opts, |_, _| f64::INFINITY, &[], |_, _| {})?
    } else {
        y0
    };
    let e_matrix = [[y[0], y[2]], [y[1], y[3]]];

    let v0 = [
        psi.psi(0.0) * profile.eta(0.0) * data.0,
        psi.psi(0.0) * data.1 - psi.psi1(0.0) * data.0,
    ];
    let v = [
        e_matrix[0][0] * v0[0] + e_matrix[0][1] * v0[1],
        e_matrix[1][0] * v0[0] + e_matrix[1][1] * v0[1],
    ];
    Ok(PseudoZoneState { v, e_matrix })
}

/// Energy time series assembled over a radial frequency grid.
#[derive(Debug, Clone)]
pub struct EnergySeries {
    pub times: Vec<f64>,
    /// `E_{a,m} = ½(‖u_t‖² + a²‖∇u‖² + m²‖u‖²)`.
    pub e_am: Vec<f64>,
    /// `E = ½(‖u_t‖² + a²‖∇u‖² + mγ‖u‖²)` with `γ = max{a, m}`.
    pub e_eff: Vec<f64>,
    /// `E_p = ½(‖u_t‖² + a²‖∇u‖² + p²‖u‖²)`, `p = ηψ√q`, `q = max{a, ψ⁻²}`;
    /// present only when a weight `ψ` was supplied.
    pub e_p: Option<Vec<f64>>,
    /// `‖u‖²`.
    pub l2: Vec<f64>,
    /// Kinetic plus elastic part `½(‖u_t‖² + a²‖∇u‖²)`.
    pub kinetic_elastic: Vec<f64>,
}

/// Weighted sum of per-mode energy densities over a shared time grid.
///
/// `weights` is a finite radial quadrature (one nonnegative weight per
/// mode); the reduction order is fixed, so results are independent of any
/// parallel scheduling upstream.
pub fn assemble_energies(
    trajectories: &[ModeTrajectory],
    profile: &CoefficientProfile,
    psi: Option<&PsiProfile>,
    weights: &[f64],
) -> Result<EnergySeries> {
    if trajectories.is_empty() {
        return Err(KgError::InvalidParameter("no trajectories to assemble".into()));
    }
    if weights.len() != trajectories.len() {
        return Err(KgError::InvalidParameter(format!(
            "{} weights for {} trajectories",
            weights.len(),
            trajectories.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(KgError::InvalidParameter("weights must be finite and >= 0".into()));
    }
    let times = &trajectories[0].times;
    for traj in &trajectories[1..] {
        let same = traj.times.len() == times.len()
            && traj
                .times
                .iter()
                .zip(times)
                .all(|(&s, &t)| (s - t).abs() <= 1e-9 * (1.0 + t.abs()));
        if !same {
            return Err(KgError::GridMismatch(format!(
                "mode |xi| = {} is sampled on a different time grid",
                traj.xi_norm
            )));
        }
    }

    let n = times.len();
    let mut e_am = vec![0.0; n];
    let mut e_eff = vec![0.0; n];
    let mut e_p = psi.map(|_| vec![0.0; n]);
    let mut l2 = vec![0.0; n];
    let mut kinetic_elastic = vec![0.0; n];

    for (i, &t) in times.iter().enumerate() {
        let a = profile.a(t);
        let m = profile.m(t);
        let gamma = a.max(m);
        let p_sqr = psi.map(|w| {
            let psi_t = w.psi(t);
            let q = a.max(psi_t.powi(-2));
            (profile.eta(t) * psi_t).powi(2) * q
        });
        for (traj, &w) in trajectories.iter().zip(weights) {
            let u_sqr = traj.u_hat[i].norm_sqr();
            let ut_sqr = traj.u_hat_t[i].norm_sqr();
            let elastic = (a * traj.xi_norm).powi(2) * u_sqr;
            e_am[i] += w * 0.5 * (ut_sqr + elastic + m * m * u_sqr);
            e_eff[i] += w * 0.5 * (ut_sqr + elastic + m * gamma * u_sqr);
            if let (Some(ep), Some(p2)) = (e_p.as_mut(), p_sqr) {
                ep[i] += w * 0.5 * (ut_sqr + elastic + p2 * u_sqr);
            }
            l2[i] += w * u_sqr;
            kinetic_elastic[i] += w * 0.5 * (ut_sqr + elastic);
        }
    }

    Ok(EnergySeries { times: times.clone(), e_am, e_eff, e_p, l2, kinetic_elastic })
}
