//! Experiment orchestration: configuration ingestion, run persistence,
//! rate fitting, and deterministic machine-readable summaries.
//!
//! A run is one directory holding a copy of the config, CSV series, and a
//! JSON summary. Reruns with an identical config produce byte-identical
//! summaries: run directories are named by a content hash of the config,
//! all reductions are fixed-order, and no timestamps enter the artifacts.

use std::collections::BTreeMap;
use std::f64::consts::LN_10;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::classify::{self, build_psi};
use crate::coeffs::{CoefficientProfile, ProfileSpec};
use crate::error::{KgError, Result};
use crate::linalg::C64;
use crate::modes::{assemble_energies, integrate_mode, ModeOptions, ModeTrajectory};
use crate::scaleinv::{predict_rates, verify_rates, ScaleInvariantModel, SimConfig};
use crate::scatter::{scattering_frame, wave_operator, ScatterOptions};
use crate::semilinear::{solve_semilinear, SemilinearOptions, SpectralField};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "KGSPEC_OUT";

fn geomspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let r = (hi / lo).powf(1.0 / (count - 1) as f64);
    let mut out: Vec<f64> = (0..count).map(|i| lo * r.powi(i as i32)).collect();
    out[count - 1] = hi;
    out
}

/// Geometric frequency grid specification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XiGridSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl XiGridSpec {
    pub fn build(&self) -> Result<Vec<f64>> {
        if !(self.lo > 0.0) || !self.lo.is_finite() || !self.hi.is_finite() || self.hi < self.lo {
            return Err(KgError::Config(format!(
                "frequency grid needs 0 < lo <= hi finite, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.count == 0 {
            return Err(KgError::Config("frequency grid needs count >= 1".into()));
        }
        Ok(geomspace(self.lo, self.hi, self.count))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Classify,
    Simulate,
    Rates,
    Scatter,
    Semilinear,
    Verify,
}

impl ExperimentKind {
    fn name(self) -> &'static str {
        match self {
            ExperimentKind::Classify => "classify",
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Rates => "rates",
            ExperimentKind::Scatter => "scatter",
            ExperimentKind::Semilinear => "semilinear",
            ExperimentKind::Verify => "verify",
        }
    }
}

/// Scale-invariant model parameters plus the rate-verification knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesSection {
    /// Exponential-family exponent; paired with `mu`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub mu: Option<f64>,
    /// Polynomial-family exponent; paired with `mu_tilde`.
    #[serde(default)]
    pub ell: Option<f64>,
    #[serde(default)]
    pub mu_tilde: Option<f64>,
    #[serde(default = "one")]
    pub a0: f64,
    #[serde(default = "two")]
    pub q: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "two_u32")]
    pub n: u32,
    /// Also simulate modes and fit the decay laws.
    #[serde(default)]
    pub verify: bool,
    /// Acceptance band around predicted exponents.
    #[serde(default = "band")]
    pub tolerance: f64,
}

/// Semilinear run parameters: Gaussian data on a periodic box.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemilinearSection {
    #[serde(default = "two_usize")]
    pub n: usize,
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default = "one")]
    pub m: f64,
    /// Data norm the Gaussian pair is scaled to.
    #[serde(default = "small_eps")]
    pub eps: f64,
    #[serde(default = "eight")]
    pub horizon: f64,
    #[serde(default = "sigma_default")]
    pub sigma: f64,
    #[serde(default = "half")]
    pub u1_factor: f64,
    #[serde(default = "m64")]
    pub m_points: usize,
    #[serde(default = "l16")]
    pub length: f64,
    #[serde(default = "k16")]
    pub k_cut: usize,
    #[serde(default = "step_default")]
    pub step: f64,
    #[serde(default = "solver_tol_default")]
    pub solver_tol: f64,
    /// Expected decay exponent of `‖u‖_{L²}` in the `e^t` scale; fitted and
    /// asserted when present.
    #[serde(default = "expected_default")]
    pub expected_exponent: Option<f64>,
    #[serde(default = "band")]
    pub exponent_tol: f64,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn two_u32() -> u32 {
    2
}
fn two_usize() -> usize {
    2
}
fn band() -> f64 {
    0.05
}
fn small_eps() -> f64 {
    1e-3
}
fn eight() -> f64 {
    8.0
}
fn sigma_default() -> f64 {
    1.5
}
fn half() -> f64 {
    0.5
}
fn m64() -> usize {
    64
}
fn l16() -> f64 {
    16.0
}
fn k16() -> usize {
    16
}
fn step_default() -> f64 {
    0.02
}
fn solver_tol_default() -> f64 {
    1e-6
}
fn expected_default() -> Option<f64> {
    Some(-0.5)
}
fn zone_n_default() -> f64 {
    10.0
}
fn t_max_default() -> f64 {
    100.0
}
fn tol_default() -> f64 {
    1e-10
}
fn samples_default() -> usize {
    129
}
fn dim_default() -> usize {
    3
}

/// One experiment: which pipeline to run and with what inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub profile: Option<ProfileSpec>,
    /// Zone constant separating the pseudodifferential and hyperbolic
    /// regions.
    #[serde(default = "zone_n_default")]
    pub zone_n: f64,
    #[serde(default)]
    pub xi_grid: Option<XiGridSpec>,
    #[serde(default = "t_max_default")]
    pub t_max: f64,
    /// Solver tolerance (ODE marches, series truncation).
    #[serde(default = "tol_default")]
    pub tol: f64,
    /// RMS gate for log-space fits (classifier tails, rate fits).
    #[serde(default = "band")]
    pub fit_gate: f64,
    /// Spatial dimension for radial quadrature weights.
    #[serde(default = "dim_default")]
    pub dimension: usize,
    /// Time samples per trajectory.
    #[serde(default = "samples_default")]
    pub samples: usize,
    /// Frequency cutoff for the truncated wave operator.
    #[serde(default)]
    pub eps_cutoff: Option<f64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Seed recorded for randomized property suites; pipelines are
    /// deterministic and ignore it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rates: Option<RatesSection>,
    #[serde(default)]
    pub semilinear: Option<SemilinearSection>,
}

impl ExperimentConfig {
    pub fn skeleton(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            label: None,
            profile: None,
            zone_n: zone_n_default(),
            xi_grid: None,
            t_max: t_max_default(),
            tol: tol_default(),
            fit_gate: band(),
            dimension: dim_default(),
            samples: samples_default(),
            eps_cutoff: None,
            out_dir: None,
            seed: 0,
            rates: None,
            semilinear: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| KgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| KgError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tol", self.tol), ("fit_gate", self.fit_gate), ("zone_n", self.zone_n)]
        {
            if !(v > 0.0) || !v.is_finite() {
                return Err(KgError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(KgError::Config(format!("t_max must be positive, got {}", self.t_max)));
        }
        if let Some(g) = &self.xi_grid {
            g.build()?;
        }
        if let Some(e) = self.eps_cutoff {
            if !(e > 0.0) || !e.is_finite() {
                return Err(KgError::Config(format!("eps_cutoff must be positive, got {e}")));
            }
        }
        match self.kind {
            ExperimentKind::Classify => {
                if self.profile.is_none() {
                    return Err(KgError::Config("classify needs a [profile] section".into()));
                }
            }
            ExperimentKind::Simulate | ExperimentKind::Scatter => {
                if self.profile.is_none() {
                    return Err(KgError::Config(format!(
                        "{} needs a [profile] section",
                        self.kind.name()
                    )));
                }
                if self.xi_grid.is_none() {
                    return Err(KgError::Config(format!(
                        "{} needs an [xi_grid] section",
                        self.kind.name()
                    )));
                }
            }
            ExperimentKind::Rates | ExperimentKind::Verify => {
                let r = self.rates.as_ref().ok_or_else(|| {
                    KgError::Config(format!("{} needs a [rates] section", self.kind.name()))
                })?;
                let exp_pair = r.alpha.is_some() && r.mu.is_some();
                let poly_pair = r.ell.is_some() && r.mu_tilde.is_some();
                if exp_pair == poly_pair {
                    return Err(KgError::Config(
                        "rates needs exactly one of (alpha, mu) or (ell, mu_tilde)".into(),
                    ));
                }
                if !(r.tolerance > 0.0) {
                    return Err(KgError::Config(format!(
                        "rates tolerance must be positive, got {}",
                        r.tolerance
                    )));
                }
            }
            ExperimentKind::Semilinear => {
                let s = self.semilinear.as_ref().ok_or_else(|| {
                    KgError::Config("semilinear needs a [semilinear] section".into())
                })?;
                if !(1..=4).contains(&s.n) {
                    return Err(KgError::Config(format!(
                        "semilinear dimension must lie in 1..=4, got {}",
                        s.n
                    )));
                }
                for (name, v) in [
                    ("eps", s.eps),
                    ("horizon", s.horizon),
                    ("solver_tol", s.solver_tol),
                    ("step", s.step),
                    ("exponent_tol", s.exponent_tol),
                ] {
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(KgError::Config(format!(
                            "semilinear {name} must be positive, got {v}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Models `fit_rate` can regress in log coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    /// `v ≈ C (1+t)^p`; abscissa `ln(1+t)`.
    PowerIn1PlusT,
    /// `v ≈ C e^{p t}`; abscissa `t`.
    ExpInT,
    /// `v ≈ C (1+t)^p ln(e+t)^r`; two regressors.
    PowerWithLog,
}

/// Outcome of a log-space least-squares fit over the final decade.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateFit {
    pub model: FitModel,
    pub exponent: f64,
    /// Secondary log-power exponent, for the log-corrected model.
    pub log_exponent: Option<f64>,
    /// RMS residual in log scale.
    pub residual: f64,
    /// Fit window in `t`.
    pub window: (f64, f64),
    pub predicted: Option<f64>,
    pub tolerance: f64,
    /// Within the band of the prediction (when given) and under the
    /// residual gate.
    pub pass: bool,
}

/// Residual gate for rate fits: RMS in log scale.
pub const FIT_RMS_GATE: f64 = 0.02;

/// Least-squares fit of `series` in the model's log coordinates over the
/// final decade of the abscissa. Needs at least 20 samples spanning a full
/// decade there; anything less is inconclusive.
pub fn fit_rate(
    series: &[(f64, f64)],
    model: FitModel,
    predicted: Option<f64>,
    tolerance: f64,
) -> Result<RateFit> {
    if !(tolerance > 0.0) {
        return Err(KgError::InvalidParameter(format!(
            "tolerance must be positive, got {tolerance}"
        )));
    }
    let xs: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, v)| t.is_finite() && v.is_finite() && *v > 0.0)
        .map(|&(t, v)| {
            let x = match model {
                FitModel::ExpInT => t,
                _ => (1.0 + t).ln(),
            };
            (x, v)
        })
        .collect();
    if xs.is_empty() {
        return Err(KgError::Inconclusive("no positive finite samples to fit".into()));
    }
    let x_max = xs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let x_min = xs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    // Fit over the final decade of the abscissa. The exponential model gets
    // at least half the series on top of that: a decade of the ordinate is
    // only ~2.3 time units at unit slope, too short to average out slow
    // multiplicative modulations.
    let width = match model {
        FitModel::ExpInT => LN_10.max(0.5 * (x_max - x_min)),
        _ => LN_10,
    };
    let lo = x_max - width;
    let window: Vec<(f64, f64)> = xs.iter().copied().filter(|p| p.0 >= lo - 1e-12).collect();
    let wspan = window.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max)
        - window.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    if window.len() < 20 || x_max - x_min < LN_10 * (1.0 - 1e-9) || wspan < 0.5 * LN_10 {
        return Err(KgError::Inconclusive(format!(
            "need >= 20 samples and a decade of abscissa; window holds {} over {wspan:.3}, \
             series spans {:.3}",
            window.len(),
            x_max - x_min
        )));
    }

    let t_at = |x: f64| match model {
        FitModel::ExpInT => x,
        _ => x.exp() - 1.0,
    };
    let ys: Vec<f64> = window.iter().map(|p| p.1.ln()).collect();
    let (exponent, log_exponent, residual) = match model {
        FitModel::PowerWithLog => {
            let zs: Vec<f64> = window
                .iter()
                .map(|p| (std::f64::consts::E + t_at(p.0)).ln().ln())
                .collect();
            let (p_exp, r_exp, rms) = two_regressor_fit(&window, &zs, &ys);
            (p_exp, Some(r_exp), rms)
        }
        _ => {
            let (slope, rms) = one_regressor_fit(&window, &ys);
            (slope, None, rms)
        }
    };

    let within = predicted.map(|p| (exponent - p).abs() <= tolerance).unwrap_or(true);
    Ok(RateFit {
        model,
        exponent,
        log_exponent,
        residual,
        window: (t_at(window[0].0.max(lo)), t_at(x_max)),
        predicted,
        tolerance,
        pass: within && residual <= FIT_RMS_GATE,
    })
}

fn one_regressor_fit(pts: &[(f64, f64)], ys: &[f64]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (p, y) in pts.iter().zip(ys) {
        sxx += (p.0 - mx) * (p.0 - mx);
        sxy += (p.0 - mx) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let mut rss = 0.0;
    for (p, y) in pts.iter().zip(ys) {
        let r = y - my - slope * (p.0 - mx);
        rss += r * r;
    }
    (slope, (rss / n).sqrt())
}

fn two_regressor_fit(pts: &[(f64, f64)], zs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mz = zs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxz, mut szz, mut sxy, mut szy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..pts.len() {
        let dx = pts[i].0 - mx;
        let dz = zs[i] - mz;
        let dy = ys[i] - my;
        sxx += dx * dx;
        sxz += dx * dz;
        szz += dz * dz;
        sxy += dx * dy;
        szy += dz * dy;
    }
    let det = sxx * szz - sxz * sxz;
    let (p, r) = if det.abs() > 1e-14 * sxx.max(szz).max(1.0) {
        ((szz * sxy - sxz * szy) / det, (sxx * szy - sxz * sxy) / det)
    } else {
        (if sxx > 0.0 { sxy / sxx } else { 0.0 }, 0.0)
    };
    let mut rss = 0.0;
    for i in 0..pts.len() {
        let e = ys[i] - my - p * (pts[i].0 - mx) - r * (zs[i] - mz);
        rss += e * e;
    }
    (p, r, (rss / n).sqrt())
}

/// One asserted check of a run.
#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Machine-readable result of a run; serialized as `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub kind: ExperimentKind,
    pub label: String,
    pub version: String,
    /// "ok" or "error".
    pub status: String,
    pub error: Option<String>,
    pub checks: Vec<CheckLine>,
    pub payload: serde_json::Value,
}

/// Where a run landed and what it concluded.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

impl RunArtifacts {
    /// True when the pipeline ran without error and every check passed.
    pub fn passed(&self) -> bool {
        self.summary.status == "ok" && self.summary.checks.iter().all(|c| c.pass)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn fmt_row(vals: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v:.12e}");
    }
    s.push('\n');
    s
}

fn csv_series(header: &str, rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut out = String::new();
    out.push_str("# ");
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(&row));
    }
    out
}

/// Execute the configured pipeline, persisting inputs, outputs, and a
/// deterministic summary under a content-addressed run directory. Module
/// errors are recorded in the summary rather than propagated; partial
/// artifacts written before the failure are retained.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let config_text = config.to_toml_string()?;
    let root = config
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let label = config.label.clone().unwrap_or_else(|| config.kind.name().to_string());
    let dir = root.join(format!("{label}-{:016x}", fnv1a(config_text.as_bytes())));
    fs::create_dir_all(&dir)?;
    write_text(&dir.join("config.toml"), &config_text)?;

    let outcome = match config.kind {
        ExperimentKind::Classify => classify_pipeline(config, &dir),
        ExperimentKind::Simulate => simulate_pipeline(config, &dir),
        ExperimentKind::Rates => rates_pipeline(config, &dir, false),
        ExperimentKind::Verify => rates_pipeline(config, &dir, true),
        ExperimentKind::Scatter => scatter_pipeline(config, &dir),
        ExperimentKind::Semilinear => semilinear_pipeline(config, &dir),
    };
    let (status, error, checks, payload) = match outcome {
        Ok((checks, payload)) => ("ok".to_string(), None, checks, payload),
        Err(e) => ("error".to_string(), Some(e.to_string()), Vec::new(), json!({})),
    };
    let summary = RunSummary {
        kind: config.kind,
        label,
        version: env!("CARGO_PKG_VERSION").to_string(),
        status,
        error,
        checks,
        payload,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_text(&dir.join("summary.json"), &text)?;
    Ok(RunArtifacts { dir, summary })
}

type PipelineOutcome = Result<(Vec<CheckLine>, serde_json::Value)>;

fn build_profile(config: &ExperimentConfig) -> Result<CoefficientProfile> {
    config
        .profile
        .clone()
        .ok_or_else(|| KgError::Config("missing [profile] section".into()))?
        .build()
}

fn classify_pipeline(config: &ExperimentConfig, dir: &Path) -> PipelineOutcome {
    let profile = build_profile(config)?;
    let report = classify::classify(&profile, config.t_max.max(1.0 + 1e-6), config.fit_gate)?;
    let payload = json!({
        "profile": profile.label(),
        "classification": report,
    });
    write_text(&dir.join("classify.json"), &format!("{:#}\n", payload))?;
    let checks = vec![CheckLine {
        name: "classification-confident".into(),
        pass: report.confidence.all(),
        detail: format!("{} (probed to t = {:.3e})", report.kind, report.t_probe),
    }];
    Ok((checks, payload))
}

fn radial_weights(xis: &[f64], dim: usize) -> Vec<f64> {
    // Trapezoid in the radial coordinate against the measure ξ^{n-1} dξ.
    let n = xis.len();
    let mut w = vec![0.0; n];
    if n == 1 {
        w[0] = 1.0;
        return w;
    }
    for i in 0..n {
        let left = if i > 0 { xis[i] - xis[i - 1] } else { 0.0 };
        let right = if i + 1 < n { xis[i + 1] - xis[i] } else { 0.0 };
        w[i] = 0.5 * (left + right) * xis[i].powi(dim as i32 - 1);
    }
    w
}

fn simulate_pipeline(config: &ExperimentConfig, dir: &Path) -> PipelineOutcome {
    let profile = build_profile(config)?;
    let xis = config.xi_grid.as_ref().expect("validated").build()?;
    let t_lo = (1e-4 * config.t_max).min(0.01);
    let mut samples = vec![0.0];
    samples.extend(geomspace(t_lo, config.t_max, config.samples.max(16) - 1));
    let opts = ModeOptions {
        tol: config.tol,
        zone_n: config.zone_n,
        ..ModeOptions::default()
    };
    let data = (C64::new(1.0, 0.0), C64::new(0.0, 1.0) * profile.m(0.0));

    let trajectories: Vec<ModeTrajectory> = xis
        .par_iter()
        .map(|&xi| integrate_mode(&profile, xi, data, config.t_max, &samples, &opts))
        .collect::<Result<Vec<_>>>()?;

    let psi = if config.t_max > 1.0 { build_psi(&profile, None).ok() } else { None };
    let weights = radial_weights(&xis, config.dimension);
    let energies = assemble_energies(&trajectories, &profile, psi.as_ref(), &weights)?;

    let mut rows = Vec::with_capacity(energies.times.len());
    for i in 0..energies.times.len() {
        let mut row = vec![
            energies.times[i],
            energies.e_am[i],
            energies.e_eff[i],
            energies.l2[i],
            energies.kinetic_elastic[i],
        ];
        if let Some(ep) = &energies.e_p {
            row.push(ep[i]);
        }
        rows.push(row);
    }
    let header = if energies.e_p.is_some() {
        "t,e_am,e_eff,l2,kinetic_elastic,e_p"
    } else {
        "t,e_am,e_eff,l2,kinetic_elastic"
    };
    write_text(&dir.join("energies.csv"), &csv_series(header, rows.into_iter()))?;

    let mut traj_rows = Vec::new();
    for traj in &trajectories {
        for i in 0..traj.times.len() {
            traj_rows.push(vec![
                traj.xi_norm,
                traj.times[i],
                traj.u_hat[i].re,
                traj.u_hat[i].im,
                traj.u_hat_t[i].re,
                traj.u_hat_t[i].im,
            ]);
        }
    }
    write_text(
        &dir.join("trajectories.csv"),
        &csv_series("xi,t,re_u,im_u,re_ut,im_ut", traj_rows.into_iter()),
    )?;

    let mut checks = Vec::new();
    let probes = [0.0, 0.37 * config.t_max, config.t_max];
    let constant = probes
        .iter()
        .all(|&t| (profile.a(t) - profile.a(0.0)).abs() <= 1e-12 && (profile.m(t) - profile.m(0.0)).abs() <= 1e-12);
    let mut payload_extra = BTreeMap::new();
    if constant {
        let e0 = energies.e_am[0];
        let drift = energies
            .e_am
            .iter()
            .map(|e| (e - e0).abs() / e0.max(1e-300))
            .fold(0.0f64, f64::max);
        payload_extra.insert("conservation_drift".to_string(), drift);
        checks.push(CheckLine {
            name: "energy-conserved".into(),
            pass: drift <= 1e-7,
            detail: format!("relative drift {drift:.3e} over [0, {:.1}]", config.t_max),
        });
    }
    let payload = json!({
        "profile": profile.label(),
        "modes": xis.len(),
        "weighted_dimension": config.dimension,
        "psi_weight": psi.is_some(),
        "extra": payload_extra,
    });
    Ok((checks, payload))
}

fn rates_pipeline(config: &ExperimentConfig, dir: &Path, force_verify: bool) -> PipelineOutcome {
    let section = config.rates.as_ref().expect("validated");
    let model = if let (Some(alpha), Some(mu)) = (section.alpha, section.mu) {
        ScaleInvariantModel::from_alpha(alpha, mu, section.a0)?
    } else {
        ScaleInvariantModel::from_poly(
            section.ell.expect("validated"),
            section.mu_tilde.expect("validated"),
        )?
    };
    let prediction = predict_rates(&model, section.q, section.kappa, section.n)?;
    let payload_pred = json!({
        "model": {
            "alpha": section.alpha,
            "mu": section.mu,
            "ell": section.ell,
            "mu_tilde": section.mu_tilde,
        },
        "prediction": prediction,
    });
    write_text(&dir.join("rates.json"), &format!("{:#}\n", payload_pred))?;

    let mut checks = Vec::new();
    let mut payload = payload_pred;
    if force_verify || section.verify {
        let mut sim = SimConfig::new(config.t_max);
        sim.tol = config.tol.max(1e-12);
        sim.tolerance = section.tolerance;
        sim.rms_gate = config.fit_gate.max(FIT_RMS_GATE);
        let report = verify_rates(&model, &prediction, &sim)?;
        let mut csv = String::from("# series,fitted,predicted,residual_rms,conclusive,ok\n");
        for (name, fit) in [("potential", &report.potential), ("kinetic", &report.kinetic)] {
            let _ = writeln!(
                csv,
                "{name},{:.12e},{:.12e},{:.12e},{},{}",
                fit.fitted, fit.predicted, fit.residual_rms, fit.conclusive, fit.ok
            );
            checks.push(CheckLine {
                name: format!("rate-{name}"),
                pass: fit.ok,
                detail: format!(
                    "fitted {:.4} vs predicted {:.4} (rms {:.3e}, conclusive {})",
                    fit.fitted, fit.predicted, fit.residual_rms, fit.conclusive
                ),
            });
        }
        write_text(&dir.join("fits.csv"), &csv)?;
        payload = json!({
            "model": payload["model"],
            "prediction": payload["prediction"],
            "verification": report,
        });
    }
    Ok((checks, payload))
}

fn scatter_pipeline(config: &ExperimentConfig, dir: &Path) -> PipelineOutcome {
    let profile = build_profile(config)?;
    let eps = config.eps_cutoff.unwrap_or(1e-2);
    let xis: Vec<f64> = config
        .xi_grid
        .as_ref()
        .expect("validated")
        .build()?
        .into_iter()
        .filter(|&xi| xi >= eps)
        .collect();
    if xis.is_empty() {
        return Err(KgError::Config(format!(
            "no grid frequencies at or above the cutoff {eps}"
        )));
    }
    let opts = ScatterOptions {
        tol: config.tol,
        zone_n: config.zone_n,
        ..ScatterOptions::default()
    };
    let frame = scattering_frame(&profile, &opts)?;

    let samples = xis
        .par_iter()
        .map(|&xi| wave_operator(&profile, xi, eps, config.tol, &opts))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for s in &samples {
        for i in 0..s.times.len() {
            rows.push(vec![s.xi_norm, s.times[i], s.residual[i], s.bound[i]]);
        }
    }
    write_text(&dir.join("residuals.csv"), &csv_series("xi,t,residual,bound", rows.into_iter()))?;

    let mut json_samples = Vec::new();
    for s in &samples {
        let q = s.q_limit;
        json_samples.push(json!({
            "xi": s.xi_norm,
            "theta": s.theta,
            "q_limit": [
                [[q.a.re, q.a.im], [q.b.re, q.b.im]],
                [[q.c.re, q.c.im], [q.d.re, q.d.im]],
            ],
            "residual_slope": s.residual_slope(),
            "bound_slope": s.bound_slope(),
            "p_integral": s.p_integral.last(),
            "condition_constant": s.condition_constant,
        }));
    }
    write_text(
        &dir.join("samples.json"),
        &format!("{:#}\n", serde_json::Value::Array(json_samples.clone())),
    )?;

    let all_finite = samples.iter().all(|s| {
        [s.q_limit.a, s.q_limit.b, s.q_limit.c, s.q_limit.d]
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())
    });
    let checks = vec![
        CheckLine {
            name: "scattering-class".into(),
            pass: true,
            detail: format!(
                "condition constant {:.3e}, trend {:.3e}",
                frame.condition_constant, frame.condition_trend
            ),
        },
        CheckLine {
            name: "wave-operator-finite".into(),
            pass: all_finite,
            detail: format!("{} frequencies at cutoff {eps:.1e}", samples.len()),
        },
    ];
    let payload = json!({
        "profile": profile.label(),
        "frame": frame,
        "samples": json_samples,
    });
    Ok((checks, payload))
}

fn semilinear_pipeline(config: &ExperimentConfig, dir: &Path) -> PipelineOutcome {
    let s = config.semilinear.as_ref().expect("validated");
    let data = SpectralField::gaussian(s.n, s.m_points, s.length, s.sigma, s.u1_factor)?
        .scaled_to_d1(s.eps)?;
    let opts = SemilinearOptions {
        m_points: s.m_points,
        length: s.length,
        k_cut: s.k_cut,
        step: s.step,
        ..SemilinearOptions::default()
    };
    let sol = solve_semilinear(&data, s.p, s.m, s.horizon, s.solver_tol, &opts)?;

    let mut rows = Vec::with_capacity(sol.times.len());
    for i in 0..sol.times.len() {
        rows.push(vec![
            sol.times[i],
            sol.l2[i],
            sol.grad_l2[i],
            sol.ut_l2[i],
            sol.ledger.samples[i],
            sol.ledger.sup_so_far[i],
        ]);
    }
    write_text(
        &dir.join("ledger.csv"),
        &csv_series("t,l2,grad_l2,ut_l2,x_sample,x_sup", rows.into_iter()),
    )?;

    let mut checks = vec![CheckLine {
        name: "picard-residual".into(),
        pass: sol.picard_residual <= s.solver_tol,
        detail: format!("{:.3e} against tol {:.1e}", sol.picard_residual, s.solver_tol),
    }];
    if s.horizon >= 2.0 {
        let at1 = sol
            .ledger
            .times
            .iter()
            .position(|&t| t >= 1.0)
            .map(|i| sol.ledger.sup_so_far[i])
            .unwrap_or(0.0);
        checks.push(CheckLine {
            name: "ledger-flattened".into(),
            pass: sol.ledger.sup() <= 10.0 * at1,
            detail: format!("sup {:.3e} vs {:.3e} at t = 1", sol.ledger.sup(), at1),
        });
    }
    let mut fit_value = None;
    if let Some(expected) = s.expected_exponent {
        let series: Vec<(f64, f64)> = sol.times.iter().copied().zip(sol.l2.iter().copied()).collect();
        let fit = fit_rate(&series, FitModel::ExpInT, Some(expected), s.exponent_tol)?;
        checks.push(CheckLine {
            name: "decay-exponent".into(),
            pass: (fit.exponent - expected).abs() <= s.exponent_tol,
            detail: format!("fitted {:.4} vs expected {expected:.4}", fit.exponent),
        });
        fit_value = Some(fit);
    }
    let payload = json!({
        "data_d1": sol.data_d1,
        "picard_residual": sol.picard_residual,
        "kinetic_factor": sol.kinetic_factor,
        "potential_factor": sol.potential_factor,
        "ledger_sup": sol.ledger.sup(),
        "fit": fit_value,
    });
    Ok((checks, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{MassFamily, SpeedFamily};

    fn scattering_config(dir: &Path) -> ExperimentConfig {
        let profile = CoefficientProfile::new(
            "power-mass",
            SpeedFamily::Polynomial { ell: 0.0 },
            MassFamily::Power { mu0: 1.0, p: -2.0 },
        )
        .unwrap();
        let mut cfg = ExperimentConfig::skeleton(ExperimentKind::Classify);
        cfg.profile = Some(profile.spec());
        cfg.t_max = 1e6;
        cfg.out_dir = Some(dir.to_path_buf());
        cfg
    }

    #[test]
    fn fit_rate_recovers_an_exact_power() {
        let ts = geomspace(1.0, 1000.0, 120);
        let series: Vec<(f64, f64)> = ts.iter().map(|&t| (t, (1.0 + t).powf(1.8))).collect();
        let fit = fit_rate(&series, FitModel::PowerIn1PlusT, Some(1.8), 0.05).unwrap();
        assert!((fit.exponent - 1.8).abs() < 1e-6, "exponent {}", fit.exponent);
        assert!(fit.residual < 1e-9);
        assert!(fit.pass);
    }

    #[test]
    fn fit_rate_handles_multiplicative_wiggle_in_the_exp_model() {
        let series: Vec<(f64, f64)> = (0..=400)
            .map(|i| {
                let t = i as f64 * 0.05;
                (t, t.exp() * (1.0 + 0.1 * t.sin()))
            })
            .collect();
        let fit = fit_rate(&series, FitModel::ExpInT, Some(1.0), 0.02).unwrap();
        assert!((fit.exponent - 1.0).abs() < 0.02, "slope {}", fit.exponent);
    }

    #[test]
    fn fit_rate_sees_a_constant_as_exponent_zero() {
        let ts = geomspace(1.0, 400.0, 60);
        let series: Vec<(f64, f64)> = ts.iter().map(|&t| (t, 7.5)).collect();
        let fit = fit_rate(&series, FitModel::PowerIn1PlusT, None, 0.05).unwrap();
        assert!(fit.exponent.abs() < 1e-12, "exponent {}", fit.exponent);
        assert!(fit.pass);
    }

    #[test]
    fn fit_rate_refuses_a_short_window() {
        let series: Vec<(f64, f64)> = (0..30).map(|i| (1.0 + i as f64 * 0.01, 2.0)).collect();
        assert!(matches!(
            fit_rate(&series, FitModel::PowerIn1PlusT, None, 0.05),
            Err(KgError::Inconclusive(_))
        ));
    }

    #[test]
    fn fit_rate_separates_the_log_correction() {
        let ts = geomspace(5.0, 5000.0, 200);
        let series: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| {
                let v = (1.0 + t).powi(2) * (std::f64::consts::E + t).ln();
                (t, v)
            })
            .collect();
        let fit = fit_rate(&series, FitModel::PowerWithLog, Some(2.0), 0.05).unwrap();
        assert!((fit.exponent - 2.0).abs() < 0.05, "power {}", fit.exponent);
        let r = fit.log_exponent.unwrap();
        assert!((r - 1.0).abs() < 0.3, "log power {r}");
    }

    #[test]
    fn malformed_config_fails_validation_before_compute() {
        let mut cfg = ExperimentConfig::skeleton(ExperimentKind::Classify);
        cfg.tol = -1.0;
        assert!(matches!(cfg.validate(), Err(KgError::Config(_))));
        assert!(matches!(run_experiment(&cfg), Err(KgError::Config(_))));

        let text = "kind = \"rates\"\n";
        assert!(matches!(ExperimentConfig::from_toml_str(text), Err(KgError::Config(_))));
    }

    #[test]
    fn classify_run_is_deterministic_and_names_the_class() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = scattering_config(tmp.path());
        let first = run_experiment(&cfg).unwrap();
        assert_eq!(first.summary.status, "ok");
        assert!(first.passed());
        assert_eq!(
            first.summary.payload["classification"]["kind"],
            serde_json::json!("scattering")
        );
        let bytes_a = std::fs::read(first.dir.join("summary.json")).unwrap();
        let second = run_experiment(&cfg).unwrap();
        let bytes_b = std::fs::read(second.dir.join("summary.json")).unwrap();
        assert_eq!(first.dir, second.dir);
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = scattering_config(tmp.path());
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn rates_pipeline_emits_a_prediction() {
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
        let run = run_experiment(&cfg).unwrap();
        assert_eq!(run.summary.status, "ok");
        assert!(run.dir.join("rates.json").exists());
        assert!(run.summary.payload["prediction"]["potential"]["exponent"].is_number());
    }

    #[test]
    fn module_errors_land_in_the_summary() {
        let tmp = tempfile::tempdir().unwrap();
        let profile = CoefficientProfile::new(
            "flat",
            SpeedFamily::Polynomial { ell: 0.0 },
            MassFamily::Power { mu0: 1.0, p: 0.0 },
        )
        .unwrap();
        let mut cfg = ExperimentConfig::skeleton(ExperimentKind::Scatter);
        cfg.profile = Some(profile.spec());
        cfg.xi_grid = Some(XiGridSpec { lo: 0.1, hi: 1.0, count: 3 });
        cfg.eps_cutoff = Some(0.1);
        cfg.out_dir = Some(tmp.path().to_path_buf());
        let run = run_experiment(&cfg).unwrap();
        assert_eq!(run.summary.status, "error");
        assert!(!run.passed());
        let msg = run.summary.error.as_deref().unwrap();
        assert!(msg.contains("scattering"), "unexpected error: {msg}");
        // The config copy is retained even though the pipeline failed.
        assert!(run.dir.join("config.toml").exists());
    }
}
