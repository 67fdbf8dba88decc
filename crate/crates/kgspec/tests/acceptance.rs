//! Acceptance gate: one test per criterion, one printed pass/fail line each.
//!
//! The tests serialize on a global lock so the per-criterion runtime budgets
//! measure the criterion itself rather than scheduler contention; each test
//! still uses all cores internally.

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use kgspec::classify::{build_psi, classify, ClassKind};
use kgspec::coeffs::{CoefficientProfile, MassFamily, SpeedFamily};
use kgspec::lab::{fit_rate, run_experiment, ExperimentConfig, ExperimentKind, FitModel, RatesSection};
use kgspec::linalg::{C64, Mat2};
use kgspec::modes::{
    assemble_energies, integrate_mode, pseudo_zone_fundamental, two_sided_check, EnergySeries,
    ModeOptions, ModeTrajectory,
};
use kgspec::scaleinv::{predict_rates, verify_rates, ScaleInvariantModel, SimConfig};
use kgspec::scatter::{
    asymptotic_equivalence, free_wave_fundamental, peano_baker, wave_operator, ScatterOptions,
};
use kgspec::semilinear::{
    check_propadd, solve_semilinear, SemilinearOptions, SpectralField,
};
use kgspec::zones::ZoneGeometry;

static GATE: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {criterion:>2} — {name}: {detail}");
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn geomspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let r = (hi / lo).powf(1.0 / (count - 1) as f64);
    let mut out: Vec<f64> = (0..count).map(|i| lo * r.powi(i as i32)).collect();
    out[count - 1] = hi;
    out
}

fn profile(label: &str, speed: SpeedFamily, mass: MassFamily) -> CoefficientProfile {
    CoefficientProfile::new(label, speed, mass).expect("valid test profile")
}

fn poly(ell: f64) -> SpeedFamily {
    SpeedFamily::Polynomial { ell }
}

fn radial_weights(xis: &[f64], dim: i32) -> Vec<f64> {
    let n = xis.len();
    let mut w = vec![0.0; n];
    for i in 0..n {
        let left = if i > 0 { xis[i] - xis[i - 1] } else { 0.0 };
        let right = if i + 1 < n { xis[i + 1] - xis[i] } else { 0.0 };
        w[i] = 0.5 * (left + right) * xis[i].powi(dim - 1);
    }
    w
}

fn march_grid(
    profile: &CoefficientProfile,
    xis: &[f64],
    samples: &[f64],
    t_end: f64,
    opts: &ModeOptions,
) -> Vec<ModeTrajectory> {
    use rayon::prelude::*;
    let data = (C64::new(1.0, 0.0), C64::new(0.0, 1.0) * profile.m(0.0));
    xis.par_iter()
        .map(|&xi| integrate_mode(profile, xi, data, t_end, samples, opts).expect("mode march"))
        .collect()
}

fn loglog_slope(times: &[f64], values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > 0.0)
        .map(|(&t, &v)| ((1.0 + t).ln(), v.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    sxy / sxx
}

#[test]
fn criterion_01_constant_coefficient_energy_is_conserved() {
    let _g = serial();
    let clock = Instant::now();
    let p = profile("flat-kg", poly(0.0), MassFamily::Power { mu0: 1.0, p: 0.0 });
    let xis = geomspace(0.1, 10.0, 32);
    let mut samples = vec![0.0];
    samples.extend(geomspace(0.01, 100.0, 64));
    let trajectories = march_grid(&p, &xis, &samples, 100.0, &ModeOptions::default());
    let weights = radial_weights(&xis, 3);
    let energies = assemble_energies(&trajectories, &p, None, &weights).unwrap();
    let e0 = energies.e_am[0];
    let drift = energies
        .e_am
        .iter()
        .map(|e| (e - e0).abs() / e0)
        .fold(0.0f64, f64::max);
    let dt = clock.elapsed().as_secs_f64();
    report(
        1,
        "constant-coefficient energy conservation",
        drift <= 1e-7 && dt <= 10.0,
        &format!("relative drift {drift:.3e} over t in [0, 100], 32 modes, {dt:.1} s"),
    );
}

#[test]
fn criterion_02_classifier_names_the_canonical_families() {
    let _g = serial();
    let clock = Instant::now();
    let table: Vec<(CoefficientProfile, ClassKind)> = vec![
        (
            profile("decaying-mass", poly(0.0), MassFamily::Power { mu0: 1.0, p: -2.0 }),
            ClassKind::Scattering,
        ),
        (
            profile("slow-log-mass", poly(0.0), MassFamily::LogMass { mu: 0.8, gamma: 0.5 }),
            ClassKind::NonEffective,
        ),
        (
            profile("linear-speed-mass", poly(1.0), MassFamily::Power { mu0: 1.0, p: 1.0 }),
            ClassKind::Effective,
        ),
        (
            profile(
                "exp-speed-poly-mass",
                SpeedFamily::Exponential { lambda: 1.0 },
                MassFamily::Power { mu0: 1.0, p: 2.0 },
            ),
            ClassKind::Effective,
        ),
        (
            profile(
                "exp-speed-const-mass",
                SpeedFamily::Exponential { lambda: 1.0 },
                MassFamily::Power { mu0: 0.5, p: 0.0 },
            ),
            ClassKind::GreyZone,
        ),
    ];
    let mut got = Vec::new();
    let mut all_ok = true;
    for (p, expected) in &table {
        let c = classify(p, 1e6, 0.05).unwrap();
        got.push(format!("{} -> {}", p.label(), c.kind));
        all_ok &= c.kind == *expected && c.confidence.all();
    }
    let dt = clock.elapsed().as_secs_f64();
    report(
        2,
        "classifier table on the canonical families",
        all_ok && dt <= 5.0,
        &format!("{} ({dt:.2} s)", got.join("; ")),
    );
}

struct EffectiveRun {
    energies: EnergySeries,
    m_exponent: f64,
}

fn effective_run() -> &'static EffectiveRun {
    static RUN: OnceLock<EffectiveRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let p = profile("linear-speed-mass", poly(1.0), MassFamily::Power { mu0: 1.0, p: 1.0 });
        let xis = geomspace(0.05, 5.0, 64);
        let mut samples = vec![0.0];
        samples.extend(geomspace(0.01, 1e3, 160));
        let trajectories = march_grid(&p, &xis, &samples, 1e3, &ModeOptions::default());
        let weights = radial_weights(&xis, 3);
        let energies = assemble_energies(&trajectories, &p, None, &weights).unwrap();
        let m_series: Vec<(f64, f64)> =
            energies.times.iter().map(|&t| (t, p.m(t))).collect();
        let m_exponent =
            fit_rate(&m_series, FitModel::PowerIn1PlusT, None, 0.05).unwrap().exponent;
        EffectiveRun { energies, m_exponent }
    })
}

#[test]
fn criterion_03_effective_energy_tracks_the_gauge() {
    let _g = serial();
    let clock = Instant::now();
    let run = effective_run();
    let series: Vec<(f64, f64)> = run
        .energies
        .times
        .iter()
        .copied()
        .zip(run.energies.e_am.iter().copied())
        .collect();
    let fit = fit_rate(&series, FitModel::PowerIn1PlusT, None, 0.05).unwrap();
    // gauge gamma(t) = max{a, m} = 1 + t for this profile
    let mut ratio_max = f64::NEG_INFINITY;
    let mut ratio_min = f64::INFINITY;
    for (i, &t) in run.energies.times.iter().enumerate() {
        if t >= 100.0 {
            let r = run.energies.e_am[i] / (1.0 + t);
            ratio_max = ratio_max.max(r);
            ratio_min = ratio_min.min(r);
        }
    }
    let spread = ratio_max / ratio_min;
    let dt = clock.elapsed().as_secs_f64();
    report(
        3,
        "effective energy growth bounded by the gauge",
        fit.exponent <= 1.05 && spread <= 10.0 && dt <= 120.0,
        &format!(
            "energy exponent {:.3} (<= 1.05), E/gamma spread {spread:.2} over the final decade, {dt:.1} s",
            fit.exponent
        ),
    );
}

#[test]
fn criterion_04_effective_potential_energy_decays_like_inverse_mass() {
    let _g = serial();
    let run = effective_run();
    let series: Vec<(f64, f64)> = run
        .energies
        .times
        .iter()
        .copied()
        .zip(run.energies.l2.iter().copied())
        .collect();
    let fit = fit_rate(&series, FitModel::PowerIn1PlusT, None, 0.05).unwrap();
    let gate = -run.m_exponent + 0.05;
    report(
        4,
        "squared amplitude decays at least like 1/m",
        fit.exponent <= gate,
        &format!(
            "||u||^2 exponent {:.3} <= -(m exponent {:.3}) + 0.05 = {gate:.3}",
            fit.exponent, run.m_exponent
        ),
    );
}

#[test]
fn criterion_05_borderline_mass_rates_match_the_sharp_exponents() {
    let _g = serial();
    let clock = Instant::now();
    let model = ScaleInvariantModel::from_poly(0.0, 0.3).unwrap();
    let prediction = predict_rates(&model, 2.0, 0.0, 3).unwrap();
    let mut sim = SimConfig::new(1e3);
    sim.staircase_modes = 44;
    sim.deep_modes = 20;
    sim.tolerance = 0.05;
    let rep = verify_rates(&model, &prediction, &sim).unwrap();
    let kin_gap = (rep.kinetic.fitted - rep.kinetic.predicted).abs();
    let dt = clock.elapsed().as_secs_f64();
    report(
        5,
        "borderline-mass growth and kinetic exponents",
        rep.potential.ok && rep.kinetic.ok && (prediction.potential.exponent - 1.8).abs() < 1e-12,
        &format!(
            "||u||^2 exponent {:.3} vs 1.8 +- 0.05; kinetic {:.3} vs {:.3} (gap {kin_gap:.3}), 64 modes, {dt:.1} s",
            rep.potential.fitted, rep.kinetic.fitted, rep.kinetic.predicted
        ),
    );
    assert!(dt <= 120.0, "runtime {dt:.1} s exceeded the 2 min budget");
}

#[test]
fn criterion_06_two_sided_energy_ratio_is_pinched_and_stable() {
    let _g = serial();
    let families: Vec<CoefficientProfile> = vec![
        profile("decaying-mass", poly(0.0), MassFamily::Power { mu0: 1.0, p: -2.0 }),
        profile("slow-log-mass", poly(0.0), MassFamily::LogMass { mu: 0.8, gamma: 0.5 }),
        profile("linear-speed-mass", poly(1.0), MassFamily::Power { mu0: 1.0, p: 1.0 }),
        profile(
            "exp-speed-poly-mass",
            SpeedFamily::Exponential { lambda: 1.0 },
            MassFamily::Power { mu0: 1.0, p: 2.0 },
        ),
        profile(
            "exp-speed-const-mass",
            SpeedFamily::Exponential { lambda: 1.0 },
            MassFamily::Power { mu0: 0.5, p: 0.0 },
        ),
    ];
    let xis = geomspace(2.0, 50.0, 20);
    let sample_times = [5.0, 6.0, 8.0, 10.0, 13.0, 17.0, 22.0, 28.0, 36.0, 46.0, 60.0];
    let pairs = [
        (5.0, 6.0),
        (5.0, 10.0),
        (5.0, 60.0),
        (6.0, 8.0),
        (8.0, 13.0),
        (10.0, 22.0),
        (13.0, 36.0),
        (17.0, 46.0),
        (22.0, 60.0),
        (36.0, 60.0),
    ];
    let envelope = |p: &CoefficientProfile, tol: f64| -> (f64, f64) {
        let opts = ModeOptions { tol, ..ModeOptions::default() };
        let mut samples = vec![0.0];
        samples.extend(sample_times);
        let trajectories = march_grid(p, &xis, &samples, 60.0, &opts);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for traj in &trajectories {
            for &(s, t) in &pairs {
                let r = two_sided_check(traj, s, t, p).unwrap();
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        (lo, hi)
    };
    let mut details = Vec::new();
    let mut ok = true;
    for p in &families {
        let (lo, hi) = envelope(p, 1e-10);
        let (lo_h, hi_h) = envelope(p, 5e-11);
        let spread = hi / lo;
        let stable = (lo_h / lo - 1.0).abs() <= 0.1 && (hi_h / hi - 1.0).abs() <= 0.1;
        ok &= spread <= 100.0 && stable && lo > 0.0;
        details.push(format!("{}: r in [{lo:.3}, {hi:.3}]", p.label()));
    }
    report(
        6,
        "two-sided high-frequency energy ratio",
        ok,
        &format!("20 frequencies x 10 pairs per family; {}", details.join("; ")),
    );
}

#[test]
fn criterion_07_low_frequency_propagator_is_uniformly_bounded() {
    let _g = serial();
    let p = profile("slow-log-mass", poly(0.0), MassFamily::LogMass { mu: 0.8, gamma: 0.5 });
    let psi = build_psi(&p, None).unwrap();
    let opts = ModeOptions::default();
    let geom = ZoneGeometry::wavefront(opts.zone_n);
    let data = (C64::new(1.0, 0.0), C64::new(0.0, 0.3));
    let mut sups = Vec::new();
    for &xi in &[1e-1, 1e-2, 1e-3] {
        let theta = geom.separating_time(&p, xi).unwrap();
        let mut sup = 0.0f64;
        for k in 1..=12 {
            let t = theta * (k as f64 / 12.0) * 0.999;
            let state = pseudo_zone_fundamental(&p, &psi, xi, t, data, &opts).unwrap();
            sup = sup.max(state.e_op_norm());
        }
        sups.push(sup);
    }
    let spread = sups.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        / sups.iter().cloned().fold(f64::INFINITY, f64::min);
    report(
        7,
        "low-frequency propagator bounded up to the separating time",
        spread <= 3.0 && sups.iter().all(|s| s.is_finite()),
        &format!(
            "sup ||E|| = {:.3} / {:.3} / {:.3} for |xi| = 1e-1/1e-2/1e-3, spread {spread:.2}",
            sups[0], sups[1], sups[2]
        ),
    );
}

#[test]
fn criterion_08_scattering_residual_bound_and_equivalence_slopes() {
    let _g = serial();
    let clock = Instant::now();
    let p = profile("decaying-mass", poly(0.0), MassFamily::Power { mu0: 1.0, p: -2.0 });
    let opts = ScatterOptions { flat_speed_test: true, ..ScatterOptions::default() };
    let sample = wave_operator(&p, 1.0, 0.5, 1e-10, &opts).unwrap();
    let (bound_slope, bound_rms) = sample.bound_slope().expect("bound curve fit");

    let xi_grid = geomspace(1.0, 4.0, 8);
    let data: Vec<(C64, C64)> =
        xi_grid.iter().map(|_| (C64::new(1.0, 0.0), C64::new(0.0, 0.5))).collect();
    let ladder = [10.0, 20.0, 40.0, 80.0, 160.0, 320.0];
    let curve = asymptotic_equivalence(&p, &data, &xi_grid, &ladder, 1e-10, &opts).unwrap();
    let equiv_slope = loglog_slope(&curve.times, &curve.discrepancy);

    let dt = clock.elapsed().as_secs_f64();
    let pass = (bound_slope + 2.0).abs() <= 0.1
        && (equiv_slope - bound_slope).abs() <= 0.2
        && dt <= 60.0;
    report(
        8,
        "scattering convergence bound and free-wave equivalence",
        pass,
        &format!(
            "bound slope {bound_slope:.3} (rms {bound_rms:.2e}), equivalence slope {equiv_slope:.3}, {dt:.1} s"
        ),
    );
}

#[test]
fn criterion_09_phase_propagator_determinant_follows_the_speed_ratio() {
    let _g = serial();
    let p = profile("exp-speed-free", SpeedFamily::Exponential { lambda: 1.0 }, MassFamily::Zero);
    let opts = ScatterOptions::default();
    let mut worst = 0.0f64;
    let mut count = 0;
    'outer: for &s in &[2.5, 3.2] {
        for &xi in &[1.0, 3.0, 10.0] {
            for &dt in &[0.7, 1.5] {
                let t = s + dt;
                let sol = free_wave_fundamental(&p, s, t, xi, &opts).unwrap();
                let det = sol.final_matrix().det().norm();
                let ratio = det / (p.a(t) / p.a(s));
                worst = worst.max((ratio - 1.0).abs());
                count += 1;
                if count == 10 {
                    break 'outer;
                }
            }
        }
    }
    report(
        9,
        "propagator determinant equals the speed ratio",
        worst <= 1e-6 && count == 10,
        &format!("max |det/(a(t)/a(s)) - 1| = {worst:.2e} over a 10-point lattice, a = e^t"),
    );
}

#[test]
fn criterion_10_iterated_integral_series_matches_scalar_oracles() {
    let _g = serial();
    let mut details = Vec::new();
    let mut ok = true;

    let series = peano_baker(|_| Mat2::from_real(0.25, 0.0, 0.0, 0.25), 0.0, 1.0, 8, 1e-10).unwrap();
    let exact = C64::new(0.0, 0.25).exp();
    let err = (series.solution.final_matrix().a - exact).norm();
    ok &= err <= 1e-10 && series.error_bound >= err;
    details.push(format!("constant: err {err:.2e}, bound {:.2e}", series.error_bound));

    let f = |t: f64| 0.3 * (2.0 * t).cos();
    let series =
        peano_baker(move |t| Mat2::from_real(f(t), 0.0, 0.0, f(t)), 0.0, 2.0, 8, 1e-8).unwrap();
    let exact = C64::new(0.0, 0.15 * 4.0f64.sin()).exp();
    let err = (series.solution.final_matrix().a - exact).norm();
    ok &= err <= 1e-10 && series.error_bound >= err;
    details.push(format!("oscillating: err {err:.2e}, bound {:.2e}", series.error_bound));

    report(
        10,
        "truncated series against closed-form exponentials at K = 8",
        ok,
        &details.join("; "),
    );
}

#[test]
fn criterion_11_kernel_estimate_constants_and_the_sqrt_factor() {
    let _g = serial();
    let s_grid = [0.0, 1.5, 3.0];
    let t_grid = [0.0, 1.0, 2.0, 3.5, 5.0];

    let run = |m_points: usize| {
        let opts = SemilinearOptions { m_points, length: 16.0, ..SemilinearOptions::default() };
        check_propadd(1.0, &s_grid, &t_grid, 1.0, 2, &opts).unwrap()
    };
    let coarse = run(32);
    let fine = run(64);
    let d_stable = (fine.derivative_ratio / coarse.derivative_ratio - 1.0).abs() <= 0.1;
    let p_stable = (fine.potential_ratio / coarse.potential_ratio - 1.0).abs() <= 0.1;
    let finite = coarse.derivative_ratio.is_finite() && coarse.potential_ratio.is_finite();

    // One dimension on a long box: the unweighted amplitude ratio keeps
    // growing across widening time gaps, the sqrt(t-s)-weighted one stays
    // put. Gap growth saturates once the lowest grid mode crosses the mass
    // shell, near ln(m L / 2pi) ~ 6 here, and modes below the shell add a
    // coherent sin^2 wiggle on top of the linear-in-gap law, so the bands
    // are compared through three-gap means rather than single pairs.
    let opts = SemilinearOptions { m_points: 4096, length: 2560.0, ..SemilinearOptions::default() };
    let line = check_propadd(1.0, &[0.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 1.0, 1, &opts).unwrap();
    let band = |gaps: [f64; 3], weighted: bool| -> f64 {
        gaps.iter()
            .map(|&g| {
                let s = line
                    .samples
                    .iter()
                    .find(|s| (s.t - s.s - g).abs() < 1e-12)
                    .expect("sample at requested gap");
                if weighted { s.potential_ratio } else { s.potential_unweighted }
            })
            .sum::<f64>()
            / 3.0
    };
    let unweighted_growth = band([4.0, 5.0, 6.0], false) / band([1.0, 2.0, 3.0], false);
    let weighted_drift = band([4.0, 5.0, 6.0], true) / band([1.0, 2.0, 3.0], true);
    let sqrt_ok = line.sqrt_branch && unweighted_growth >= 1.3 && weighted_drift <= 1.05;

    report(
        11,
        "kernel estimate constants: plane stability and line sqrt factor",
        finite && d_stable && p_stable && sqrt_ok,
        &format!(
            "plane sup ratios {:.3}/{:.3} (relative shift {:.3}/{:.3} under doubled resolution); \
             line late/early gap bands x{unweighted_growth:.2} unweighted vs x{weighted_drift:.2} weighted",
            fine.derivative_ratio,
            fine.potential_ratio,
            (fine.derivative_ratio / coarse.derivative_ratio - 1.0).abs(),
            (fine.potential_ratio / coarse.potential_ratio - 1.0).abs()
        ),
    );
}

#[test]
fn criterion_12_small_data_semilinear_decay_at_full_resolution() {
    let _g = serial();
    let clock = Instant::now();
    let opts = SemilinearOptions {
        m_points: 256,
        k_cut: 64,
        length: 16.0,
        step: 0.02,
        ..SemilinearOptions::default()
    };
    let data = SpectralField::gaussian(2, 256, 16.0, 1.5, 0.5)
        .unwrap()
        .scaled_to_d1(1e-3)
        .unwrap();
    let sol = solve_semilinear(&data, 2.0, 1.0, 8.0, 1e-6, &opts).unwrap();

    let series: Vec<(f64, f64)> =
        sol.times.iter().copied().zip(sol.l2.iter().copied()).collect();
    let fit = fit_rate(&series, FitModel::ExpInT, Some(-0.5), 0.05).unwrap();
    let at1 = sol
        .ledger
        .times
        .iter()
        .position(|&t| t >= 1.0)
        .map(|i| sol.ledger.sup_so_far[i])
        .unwrap();
    let ledger_ok = sol.ledger.sup() <= 10.0 * at1;
    let dt = clock.elapsed().as_secs_f64();
    let pass = (fit.exponent + 0.5).abs() <= 0.05
        && ledger_ok
        && sol.picard_residual <= 1e-6
        && dt <= 600.0;
    report(
        12,
        "small-data nonlinear decay at M = 256",
        pass,
        &format!(
            "decay exponent {:.4} vs -0.5 +- 0.05; ledger sup {:.3e} <= 10 x {:.3e}; \
             fixed-point residual {:.2e}; {dt:.0} s",
            fit.exponent,
            sol.ledger.sup(),
            at1,
            sol.picard_residual
        ),
    );
}

#[test]
fn criterion_13_property_suites_stand_alone() {
    let _g = serial();
    let mut details = Vec::new();
    let mut ok = true;

    // Wronskian of the oscillator basis stays at one.
    let pair = kgspec::semilinear::linear_kernels(1.0, 0.4, 2.7, 1.3).unwrap();
    let wronskian = pair.k0 * pair.k1_t - pair.k1 * pair.k0_t;
    ok &= (wronskian - 1.0).abs() < 1e-9;
    details.push(format!("wronskian gap {:.1e}", (wronskian - 1.0).abs()));

    // Energy identity along a marched mode.
    let p = profile("ramp", poly(1.0), MassFamily::Power { mu0: 0.5, p: -0.5 });
    let xi = 2.0;
    let samples: Vec<f64> = (0..=600).map(|i| i as f64 * 3.0 / 600.0).collect();
    let data = (C64::new(1.0, 0.0), C64::new(0.0, 0.5));
    let traj = integrate_mode(&p, xi, data, 3.0, &samples, &ModeOptions::default()).unwrap();
    let energy = |i: usize| {
        let om = p.angular(traj.times[i], xi);
        0.5 * (traj.u_hat_t[i].norm_sqr() + om * om * traj.u_hat[i].norm_sqr())
    };
    let mut flux = 0.0;
    for i in 1..traj.times.len() {
        let g = |j: usize| {
            let t = traj.times[j];
            (p.a(t) * p.a1(t) * xi * xi + p.m(t) * p.m1(t)) * traj.u_hat[j].norm_sqr()
        };
        flux += 0.5 * (g(i) + g(i - 1)) * (traj.times[i] - traj.times[i - 1]);
    }
    let identity_gap =
        ((energy(traj.times.len() - 1) - energy(0)) - flux).abs() / energy(0).max(1e-300);
    ok &= identity_gap < 1e-4;
    details.push(format!("energy identity gap {identity_gap:.1e}"));

    // Micro-energies are quadratic under data scaling.
    let double = (data.0 * 2.0, data.1 * 2.0);
    let traj2 = integrate_mode(&p, xi, double, 3.0, &samples, &ModeOptions::default()).unwrap();
    let homog = (traj2.micro_norm_sqr(600) / traj.micro_norm_sqr(600) - 4.0).abs();
    ok &= homog < 1e-9;
    details.push(format!("homogeneity gap {homog:.1e}"));

    // Model parameterizations round-trip.
    let m = ScaleInvariantModel::from_alpha(0.5, 0.2, 0.5).unwrap();
    let (ell, mu_tilde) = m.equiv_poly.unwrap();
    let back = ScaleInvariantModel::from_poly(ell, mu_tilde).unwrap();
    ok &= (back.alpha - 0.5).abs() < 1e-12 && (back.mu - 0.2).abs() < 1e-12;
    details.push("parameter round-trip exact".to_string());

    // Parseval on the spectral grid.
    let field = SpectralField::gaussian(2, 64, 16.0, 1.5, 0.5).unwrap();
    ok &= field.parseval_gap() < 1e-10;
    details.push(format!("parseval gap {:.1e}", field.parseval_gap()));

    // Byte-identical summaries on rerun.
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::skeleton(ExperimentKind::Rates);
    cfg.rates = Some(RatesSection {
        alpha: None,
        mu: None,
        ell: Some(1.0),
        mu_tilde: Some(0.3),
        a0: 1.0,
        q: 2.0,
        kappa: 0.0,
        n: 2,
        verify: false,
        tolerance: 0.05,
    });
    cfg.out_dir = Some(tmp.path().to_path_buf());
    let first = run_experiment(&cfg).unwrap();
    let a = std::fs::read(first.dir.join("summary.json")).unwrap();
    let second = run_experiment(&cfg).unwrap();
    let b = std::fs::read(second.dir.join("summary.json")).unwrap();
    ok &= a == b;
    details.push("summaries byte-identical".to_string());

    report(13, "property suite spot checks", ok, &details.join("; "));
}
