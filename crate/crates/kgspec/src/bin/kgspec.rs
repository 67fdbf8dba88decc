//! Command-line driver for the experiment pipelines.
//!
//! Every subcommand accepts `--config <TOML>` and per-field flag overrides;
//! flags win. Runs land under `--out`, the `KGSPEC_OUT` environment
//! variable, or `./runs`, in that order. Exit status is zero exactly when
//! the run completed and every recorded check passed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kgspec::coeffs::ProfileSpec;
use kgspec::lab::{
    run_experiment, ExperimentConfig, ExperimentKind, RatesSection, SemilinearSection, XiGridSpec,
};
use kgspec::{KgError, Result};

#[derive(Parser)]
#[command(
    name = "kgspec",
    version,
    about = "Wave equations with time-dependent speed and mass: \
             classification, mode simulation, decay rates, scattering, and \
             a semilinear solver."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decide the asymptotic regime of a coefficient profile.
    Classify(ClassifyArgs),
    /// Integrate a frequency grid and assemble energy series.
    Simulate(SimulateArgs),
    /// Predict sharp decay/growth exponents for a scale-invariant model.
    Rates(RatesArgs),
    /// Compute truncated wave operators and their convergence residuals.
    Scatter(ScatterArgs),
    /// Run the semilinear solver on small periodic data.
    Semilinear(SemilinearArgs),
    /// Predict rates and verify them against simulated modes.
    Verify(RatesArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config in TOML; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Coefficient profile spec in TOML.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Output root for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run label used in the directory name.
    #[arg(long)]
    label: Option<String>,
    /// Solver tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Classification probe horizon.
    #[arg(long)]
    tmax: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Geometric frequency grid, "lo:hi:count".
    #[arg(long, value_parser = parse_grid)]
    xi_grid: Option<XiGridSpec>,
    /// Integration horizon.
    #[arg(long)]
    tmax: Option<f64>,
    /// Radial weight dimension.
    #[arg(long)]
    dimension: Option<usize>,
}

#[derive(Args)]
struct RatesArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Exponential-family exponent (pair with --mu).
    #[arg(long)]
    alpha: Option<f64>,
    /// Mass constant for the exponential family.
    #[arg(long)]
    mu: Option<f64>,
    /// Polynomial-family exponent (pair with --mutilde).
    #[arg(long)]
    ell: Option<f64>,
    /// Mass constant for the polynomial family.
    #[arg(long)]
    mutilde: Option<f64>,
    /// Lebesgue exponent of the data space, in [1, 2].
    #[arg(long)]
    q: Option<f64>,
    /// Interpolation parameter, in [0, 1].
    #[arg(long)]
    kappa: Option<f64>,
    /// Spatial dimension.
    #[arg(long)]
    n: Option<u32>,
    /// Also simulate modes and fit the predicted laws.
    #[arg(long)]
    verify: bool,
    /// Simulation horizon for verification.
    #[arg(long)]
    tmax: Option<f64>,
}

#[derive(Args)]
struct ScatterArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Geometric frequency grid, "lo:hi:count".
    #[arg(long, value_parser = parse_grid)]
    xi_grid: Option<XiGridSpec>,
    /// Low-frequency cutoff of the truncated wave operator.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args)]
struct SemilinearArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Spatial dimension, 1 to 4.
    #[arg(long)]
    n: Option<usize>,
    /// Nonlinearity power.
    #[arg(long)]
    p: Option<f64>,
    /// Mass constant.
    #[arg(long)]
    m: Option<f64>,
    /// Data size the Gaussian pair is scaled to.
    #[arg(long)]
    eps: Option<f64>,
    /// Integration horizon.
    #[arg(long)]
    horizon: Option<f64>,
    /// Grid points per axis.
    #[arg(long)]
    m_points: Option<usize>,
    /// Retained frequency cutoff per axis.
    #[arg(long)]
    k_cut: Option<usize>,
}

fn parse_grid(text: &str) -> std::result::Result<XiGridSpec, String> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err("expected lo:hi:count".into());
    }
    let lo: f64 = parts[0].parse().map_err(|e| format!("lo: {e}"))?;
    let hi: f64 = parts[1].parse().map_err(|e| format!("hi: {e}"))?;
    let count: usize = parts[2].parse().map_err(|e| format!("count: {e}"))?;
    let spec = XiGridSpec { lo, hi, count };
    spec.build().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn load_config(common: &CommonArgs, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            if cfg.kind != kind {
                return Err(KgError::Config(format!(
                    "config declares kind \"{:?}\" but the subcommand wants \"{:?}\"",
                    cfg.kind, kind
                )));
            }
            cfg
        }
        None => ExperimentConfig::skeleton(kind),
    };
    if let Some(path) = &common.profile {
        let text = std::fs::read_to_string(path)?;
        let spec: ProfileSpec = toml::from_str(&text).map_err(|e| KgError::Config(e.to_string()))?;
        cfg.profile = Some(spec);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(label) = &common.label {
        cfg.label = Some(label.clone());
    }
    if let Some(tol) = common.tol {
        cfg.tol = tol;
    }
    Ok(cfg)
}

fn build(cli: Command) -> Result<ExperimentConfig> {
    match cli {
        Command::Classify(args) => {
            let mut cfg = load_config(&args.common, ExperimentKind::Classify)?;
            if let Some(t) = args.tmax {
                cfg.t_max = t;
            }
            Ok(cfg)
        }
        Command::Simulate(args) => {
            let mut cfg = load_config(&args.common, ExperimentKind::Simulate)?;
            if let Some(g) = args.xi_grid {
                cfg.xi_grid = Some(g);
            }
            if let Some(t) = args.tmax {
                cfg.t_max = t;
            }
            if let Some(d) = args.dimension {
                cfg.dimension = d;
            }
            Ok(cfg)
        }
        Command::Rates(args) => build_rates(args, ExperimentKind::Rates),
        Command::Verify(args) => build_rates(args, ExperimentKind::Verify),
        Command::Scatter(args) => {
            let mut cfg = load_config(&args.common, ExperimentKind::Scatter)?;
            if let Some(g) = args.xi_grid {
                cfg.xi_grid = Some(g);
            }
            if let Some(e) = args.eps {
                cfg.eps_cutoff = Some(e);
            }
            Ok(cfg)
        }
        Command::Semilinear(args) => {
            let mut cfg = load_config(&args.common, ExperimentKind::Semilinear)?;
            let mut s = cfg.semilinear.take().unwrap_or_else(default_semilinear);
            if let Some(v) = args.n {
                s.n = v;
            }
            if let Some(v) = args.p {
                s.p = v;
            }
            if let Some(v) = args.m {
                s.m = v;
            }
            if let Some(v) = args.eps {
                s.eps = v;
            }
            if let Some(v) = args.horizon {
                s.horizon = v;
            }
            if let Some(v) = args.m_points {
                s.m_points = v;
            }
            if let Some(v) = args.k_cut {
                s.k_cut = v;
            }
            cfg.semilinear = Some(s);
            Ok(cfg)
        }
    }
}

fn build_rates(args: RatesArgs, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&args.common, kind)?;
    let mut r = cfg.rates.take().unwrap_or_else(default_rates);
    if let Some(v) = args.alpha {
        r.alpha = Some(v);
    }
    if let Some(v) = args.mu {
        r.mu = Some(v);
    }
    if let Some(v) = args.ell {
        r.ell = Some(v);
    }
    if let Some(v) = args.mutilde {
        r.mu_tilde = Some(v);
    }
    if let Some(v) = args.q {
        r.q = v;
    }
    if let Some(v) = args.kappa {
        r.kappa = v;
    }
    if let Some(v) = args.n {
        r.n = v;
    }
    if args.verify {
        r.verify = true;
    }
    if let Some(t) = args.tmax {
        cfg.t_max = t;
    }
    cfg.rates = Some(r);
    Ok(cfg)
}

fn default_rates() -> RatesSection {
    RatesSection {
        alpha: None,
        mu: None,
        ell: None,
        mu_tilde: None,
        a0: 1.0,
        q: 2.0,
        kappa: 0.0,
        n: 2,
        verify: false,
        tolerance: 0.05,
    }
}

fn default_semilinear() -> SemilinearSection {
    SemilinearSection {
        n: 2,
        p: 2.0,
        m: 1.0,
        eps: 1e-3,
        horizon: 8.0,
        sigma: 1.5,
        u1_factor: 0.5,
        m_points: 64,
        length: 16.0,
        k_cut: 16,
        step: 0.02,
        solver_tol: 1e-6,
        expected_exponent: Some(-0.5),
        exponent_tol: 0.05,
    }
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    let cfg = build(cli.command)?;
    let artifacts = run_experiment(&cfg)?;
    for check in &artifacts.summary.checks {
        let tag = if check.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", check.name, check.detail);
    }
    if let Some(err) = &artifacts.summary.error {
        eprintln!("error: {err}");
    }
    println!("run: {}", artifacts.dir.display());
    Ok(artifacts.passed())
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
