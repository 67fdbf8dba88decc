//! C interface to the kgspec toolkit.
//!
//! Every entry point returns a [`kg_status`]; results travel through out
//! pointers. Strings handed back through `char **` are heap allocated and
//! must be released with [`kg_string_free`]; profile handles with
//! [`kg_profile_free`]. After a non-zero status, [`kg_last_error`] holds a
//! message describing the failure for the calling thread.
//!
//! All entry points catch panics and convert them to `KG_PANIC` so that
//! unwinding never crosses the FFI boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use kgspec::classify::classify;
use kgspec::coeffs::{CoefficientProfile, ProfileSpec};
use kgspec::error::KgError;
use kgspec::linalg::C64;
use kgspec::modes::{integrate_mode, ModeOptions};
use kgspec::scaleinv::{predict_rates, ScaleInvariantModel};
use kgspec::zones::ZoneGeometry;

/// Result code shared by every entry point.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum kg_status {
    KG_OK = 0,
    KG_NULL_POINTER = 1,
    KG_INVALID_ARGUMENT = 2,
    KG_PARSE_ERROR = 3,
    KG_NUMERICAL_ERROR = 4,
    KG_INCONCLUSIVE = 5,
    KG_PANIC = 6,
}

/// Opaque handle for a coefficient pair.
#[allow(non_camel_case_types)]
pub struct kg_profile {
    inner: CoefficientProfile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let text = CString::new(msg).unwrap_or_else(|_| CString::new("error text held NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_of(err: &KgError) -> kg_status {
    match err {
        KgError::InvalidProfile(_)
        | KgError::InvalidParameter(_)
        | KgError::Config(_)
        | KgError::DegenerateData(_)
        | KgError::GridMismatch(_) => kg_status::KG_INVALID_ARGUMENT,
        KgError::Inconclusive(_) | KgError::FitRejected(_) => kg_status::KG_INCONCLUSIVE,
        KgError::Io(_) | KgError::Json(_) => kg_status::KG_PARSE_ERROR,
        _ => kg_status::KG_NUMERICAL_ERROR,
    }
}

fn fail(err: KgError) -> kg_status {
    let code = status_of(&err);
    set_error(err.to_string());
    code
}

fn guard(f: impl FnOnce() -> kg_status) -> kg_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic; see stderr for details");
            kg_status::KG_PANIC
        }
    }
}

macro_rules! require {
    ($ptr:expr, $name:literal) => {
        if $ptr.is_null() {
            set_error(concat!($name, " must not be null"));
            return kg_status::KG_NULL_POINTER;
        }
    };
}

fn emit_json<T: serde::Serialize>(value: &T, out: *mut *mut c_char) -> kg_status {
    let text = match serde_json::to_string_pretty(value) {
        Ok(t) => t,
        Err(e) => return fail(e.into()),
    };
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            kg_status::KG_OK
        }
        Err(_) => {
            set_error("serialized JSON held a NUL byte");
            kg_status::KG_NUMERICAL_ERROR
        }
    }
}

/// Parse a profile from TOML text.
///
/// The text uses the same layout as CLI profile files: a `[speed]` table
/// and a `[mass]` table, each with a `family` tag and its parameters, plus
/// an optional top-level `label`. On success `*out` owns the new handle.
#[no_mangle]
pub unsafe extern "C" fn kg_profile_from_toml(
    text: *const c_char,
    out: *mut *mut kg_profile,
) -> kg_status {
    guard(|| {
        require!(text, "text");
        require!(out, "out");
        clear_error();
        let raw = unsafe { CStr::from_ptr(text) };
        let Ok(source) = raw.to_str() else {
            set_error("profile text is not valid UTF-8");
            return kg_status::KG_PARSE_ERROR;
        };
        let spec: ProfileSpec = match toml::from_str(source) {
            Ok(spec) => spec,
            Err(e) => {
                set_error(format!("toml: {e}"));
                return kg_status::KG_PARSE_ERROR;
            }
        };
        match spec.build() {
            Ok(profile) => {
                let handle = Box::new(kg_profile { inner: profile });
                unsafe { *out = Box::into_raw(handle) };
                kg_status::KG_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a profile handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn kg_profile_free(profile: *mut kg_profile) {
    if !profile.is_null() {
        drop(unsafe { Box::from_raw(profile) });
    }
}

/// Evaluate the speed `a`, mass `m`, and speed primitive `A` at time `t`.
///
/// Out pointers may individually be null when a value is not wanted.
#[no_mangle]
pub unsafe extern "C" fn kg_profile_eval(
    profile: *const kg_profile,
    t: f64,
    a: *mut f64,
    m: *mut f64,
    big_a: *mut f64,
) -> kg_status {
    guard(|| {
        require!(profile, "profile");
        clear_error();
        let p = unsafe { &(*profile).inner };
        if !t.is_finite() || t < 0.0 {
            set_error(format!("time must be finite and nonnegative, got {t}"));
            return kg_status::KG_INVALID_ARGUMENT;
        }
        if !big_a.is_null() {
            match p.primitive(t) {
                Ok(v) => unsafe { *big_a = v },
                Err(e) => return fail(e),
            }
        }
        if !a.is_null() {
            unsafe { *a = p.a(t) };
        }
        if !m.is_null() {
            unsafe { *m = p.m(t) };
        }
        kg_status::KG_OK
    })
}

/// Classify the profile over `[0, t_max]`; the report arrives as JSON.
#[no_mangle]
pub unsafe extern "C" fn kg_classify_json(
    profile: *const kg_profile,
    t_max: f64,
    tol: f64,
    out: *mut *mut c_char,
) -> kg_status {
    guard(|| {
        require!(profile, "profile");
        require!(out, "out");
        clear_error();
        match classify(unsafe { &(*profile).inner }, t_max, tol) {
            Ok(report) => emit_json(&report, out),
            Err(e) => fail(e),
        }
    })
}

/// First time at which `A(t) |xi|` reaches the zone constant.
///
/// Writes `+inf` when the boundary is never reached (`|xi| = 0`).
#[no_mangle]
pub unsafe extern "C" fn kg_separating_time(
    profile: *const kg_profile,
    zone_n: f64,
    xi_norm: f64,
    out: *mut f64,
) -> kg_status {
    guard(|| {
        require!(profile, "profile");
        require!(out, "out");
        clear_error();
        if !zone_n.is_finite() || zone_n <= 0.0 {
            set_error(format!("zone constant must be positive and finite, got {zone_n}"));
            return kg_status::KG_INVALID_ARGUMENT;
        }
        let geometry = ZoneGeometry::wavefront(zone_n);
        match geometry.separating_time(unsafe { &(*profile).inner }, xi_norm) {
            Ok(theta) => {
                unsafe { *out = theta };
                kg_status::KG_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Decay-rate prediction for the scale-invariant model, as JSON.
///
/// `alpha` is the speed exponent (< 1), `mu` the mass constant, `a0` the
/// initial primitive value in `(0, 1]`. Rates are measured in `L^q` with
/// interpolation weight `kappa` in `n` space dimensions. The JSON carries
/// the derived model (including its polynomial twin when one exists) and
/// the predicted laws.
#[no_mangle]
pub unsafe extern "C" fn kg_rates_json(
    alpha: f64,
    mu: f64,
    a0: f64,
    q: f64,
    kappa: f64,
    n: u32,
    out: *mut *mut c_char,
) -> kg_status {
    guard(|| {
        require!(out, "out");
        clear_error();
        let model = match ScaleInvariantModel::from_alpha(alpha, mu, a0) {
            Ok(model) => model,
            Err(e) => return fail(e),
        };
        let prediction = match predict_rates(&model, q, kappa, n) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        emit_json(&serde_json::json!({ "model": model, "prediction": prediction }), out)
    })
}

/// March one Fourier mode and sample its squared micro-energy norm.
///
/// `(u0_re, u0_im)` and `(u1_re, u1_im)` are the complex initial value and
/// velocity of the mode. `times` must be strictly increasing, nonnegative,
/// and hold `n_times` entries; `out_energy` receives one value per entry.
/// Pass `tol <= 0` for the default integration tolerance.
#[no_mangle]
pub unsafe extern "C" fn kg_mode_energy_samples(
    profile: *const kg_profile,
    xi_norm: f64,
    u0_re: f64,
    u0_im: f64,
    u1_re: f64,
    u1_im: f64,
    times: *const f64,
    n_times: usize,
    tol: f64,
    out_energy: *mut f64,
) -> kg_status {
    guard(|| {
        require!(profile, "profile");
        require!(times, "times");
        require!(out_energy, "out_energy");
        clear_error();
        if n_times == 0 {
            set_error("n_times must be positive");
            return kg_status::KG_INVALID_ARGUMENT;
        }
        let samples = unsafe { std::slice::from_raw_parts(times, n_times) };
        let mut opts = ModeOptions::default();
        if tol > 0.0 {
            opts.tol = tol;
        }
        let data = (C64::new(u0_re, u0_im), C64::new(u1_re, u1_im));
        let t_end = samples[n_times - 1];
        match integrate_mode(unsafe { &(*profile).inner }, xi_norm, data, t_end, samples, &opts) {
            Ok(traj) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_energy, n_times) };
                for (i, slot) in out.iter_mut().enumerate() {
                    *slot = traj.micro_norm_sqr(i);
                }
                kg_status::KG_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a string returned by this library. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn kg_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(unsafe { CString::from_raw(text) });
    }
}

/// Message for the most recent failure on the calling thread, or null when
/// the last call succeeded. The pointer stays valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn kg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |text| text.as_ptr())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kg_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}
