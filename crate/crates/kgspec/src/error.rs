//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "quadrature did not converge on [{lo:.6e}, {hi:.6e}]: \
         estimated error {err:.3e} exceeds tolerance {tol:.3e}"
    )]
    QuadratureNoConvergence { lo: f64, hi: f64, err: f64, tol: f64 },

    #[error("derivative unavailable: {0}")]
    DerivativeUnavailable(String),

    #[error("no sign change found while bracketing a root: {0}")]
    BracketNotFound(String),

    #[error("ODE step size underflow at t = {t:.6e} (h = {h:.3e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("solution became non-finite at t = {t:.6e} (|xi| = {xi:.6e})")]
    NonFinite { t: f64, xi: f64 },

    #[error(
        "diagonalizer nearly singular at t = {t:.6e} (|k| = {k:.3e}); \
         increase the zone constant N"
    )]
    DiagonalizerSingular { t: f64, k: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("t = {t:.6e} lies beyond the separating time {theta:.6e} for |xi| = {xi:.6e}")]
    ZoneViolation { t: f64, theta: f64, xi: f64 },

    #[error("mismatched grids: {0}")]
    GridMismatch(String),

    #[error("no weight recipe for this mass family: {0}")]
    PsiUnavailable(String),

    #[error("inconclusive: {0}")]
    Inconclusive(String),

    #[error("fit rejected: {0}")]
    FitRejected(String),

    #[error(
        "truncated series error bound {bound:.3e} exceeds the requested tolerance \
         {tol:.3e} at K = {k}; raise the term count or integrate the system directly"
    )]
    SeriesTruncation { bound: f64, tol: f64, k: usize },

    #[error("mass perturbation is not integrable in the hyperbolic zone: {0}")]
    ScatteringConditionViolated(String),

    #[error("fixed-point smallness violated: {0}")]
    SmallnessViolated(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KgError>;
