//! Numerical toolkit for linear and semilinear wave equations whose propagation
//! speed `a(t)` and mass `m(t)` depend on time,
//!
//! ```text
//!     u_tt - a(t)^2 Δu + m(t)^2 u = 0        on R^n,
//! ```
//!
//! studied mode by mode through the symbol `⟨ξ⟩(t) = (|ξ|^2 a^2 + m^2)^(1/2)`.
//!
//! The crate is organised around the life cycle of such a problem:
//!
//! * [`coeffs`] — coefficient profiles, the primitive `A(t) = 1 + ∫_0^t a`,
//!   the derived quantities `η = a/A`, `μ = m/η`, and structural checks on
//!   the admissible coefficient classes.
//! * [`classify`] — decides which asymptotic regime a profile belongs to
//!   (scattering, non-effective, effective, grey zone) and constructs the
//!   auxiliary weight `ψ` used by the low-frequency analysis.
//! * [`zones`] — pseudodifferential/hyperbolic zone geometry, separating
//!   times, and the refined diagonalizer of the one-mode system.
//! * [`modes`] — long-horizon integration of single Fourier modes with a
//!   slow-variable formulation inside the hyperbolic zone, two-sided energy
//!   checks and energy assembly over radial frequency grids.
//! * [`scatter`] — free-wave fundamental solutions, the perturbation series
//!   for the mass term, Møller wave operators and asymptotic equivalence.
//! * [`scaleinv`] — scale-invariant models `m = μ a/A`, their dissipative
//!   transformation and sharp growth/decay rate predictions.
//! * [`semilinear`] — a pseudospectral solver for `u_tt - e^{2t} Δu + m^2 u =
//!   |u|^p` on a torus, with kernel tables, a weighted fixed-point ledger and
//!   dispersive-decay checks.
//! * [`lab`] — reproducible experiment driver: config parsing, CSV series,
//!   JSON summaries and decay-rate fitting.
//!
//! Shared numerical kernels live in [`quad`] (adaptive Gauss–Kronrod
//! quadrature), [`ode`] (embedded Runge–Kutta with oscillation-aware step
//! caps) and [`linalg`] (complex 2×2 matrices).

pub mod classify;
pub mod coeffs;
pub mod error;
pub mod lab;
pub mod linalg;
pub mod modes;
pub mod ode;
pub mod quad;
pub mod scaleinv;
pub mod scatter;
pub mod semilinear;
pub mod zones;

pub use error::{KgError, Result};
