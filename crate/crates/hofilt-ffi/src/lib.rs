//! C ABI for the filtering library: opaque model handles, integer status
//! codes, and flat output structs.
//!
//! Conventions: every fallible call returns a [`HofiltStatus`]; on failure a
//! thread-local message is retrievable with [`hofilt_last_error`]. Pointers
//! are only written on `Ok`. Handles from `hofilt_model_from_json` must be
//! released with `hofilt_model_free`.

use hofilt::expr;
use hofilt::filter::{self, FilterError, OrderSpec};
use hofilt::likelihood::{self, LikelihoodError};
use hofilt::model::{model_from_json, PosysModel};
use hofilt::partition::Partition;
use hofilt::simulate::{generate, FineGrid, Measure};
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

/// Status codes mirroring the CLI exit codes, plus FFI-specific ones.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HofiltStatus {
    Ok = 0,
    /// Bad input: model text, formula, dimensions, order.
    Config = 2,
    /// Partition mesh not admissible for the requested order.
    Mesh = 3,
    /// Numerical diagnostic: overflow or degenerate weights.
    Numeric = 4,
    /// A required pointer was null.
    NullArgument = 5,
    /// A string argument was not valid UTF-8.
    Utf8 = 6,
    /// Internal panic; details in the last-error message.
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of_likelihood(e: &LikelihoodError) -> HofiltStatus {
    match e {
        LikelihoodError::InadmissibleMesh { .. } => HofiltStatus::Mesh,
        LikelihoodError::XiOverflow { .. } => HofiltStatus::Numeric,
        _ => HofiltStatus::Config,
    }
}

fn status_of_filter(e: &FilterError) -> HofiltStatus {
    match e {
        FilterError::Likelihood(inner) => status_of_likelihood(inner),
        FilterError::DegenerateWeights { .. } => HofiltStatus::Numeric,
        _ => HofiltStatus::Config,
    }
}

fn fail(status: HofiltStatus, msg: impl Into<String>) -> HofiltStatus {
    set_error(msg);
    status
}

fn guarded(body: impl FnOnce() -> HofiltStatus) -> HofiltStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(HofiltStatus::Panic, msg)
        }
    }
}

unsafe fn str_arg<'a>(ptr: *const c_char) -> Result<&'a str, HofiltStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(HofiltStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        HofiltStatus::Utf8
    })
}

/// Opaque model handle.
pub struct HofiltModel {
    inner: PosysModel,
}

/// Ensemble estimate record; field meanings match the library's estimator.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HofiltEstimate {
    pub rho_phi: f64,
    pub rho_one: f64,
    pub pi_phi: f64,
    pub se_rho_phi: f64,
    pub se_rho_one: f64,
    pub se_pi_phi: f64,
}

/// Copy the last error message for this thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn hofilt_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Parse a model definition (the same JSON document the CLI accepts) into a
/// handle. On success writes the handle through `out`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hofilt_model_from_json(
    json: *const c_char,
    out: *mut *mut HofiltModel,
) -> HofiltStatus {
    guarded(|| {
        if out.is_null() {
            return fail(HofiltStatus::NullArgument, "null output pointer");
        }
        let text = match str_arg(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match model_from_json(text, "ffi") {
            Ok(model) => {
                *out = Box::into_raw(Box::new(HofiltModel { inner: model }));
                HofiltStatus::Ok
            }
            Err(e) => fail(HofiltStatus::Config, e.to_string()),
        }
    })
}

/// Release a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be a handle from `hofilt_model_from_json`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hofilt_model_free(model: *mut HofiltModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model dimensions; any output pointer may be null to skip it.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hofilt_model_dims(
    model: *const HofiltModel,
    d_x: *mut usize,
    d_v: *mut usize,
    d_y: *mut usize,
) -> HofiltStatus {
    if model.is_null() {
        return fail(HofiltStatus::NullArgument, "null model handle");
    }
    let m = &(*model).inner;
    if !d_x.is_null() {
        *d_x = m.d_x;
    }
    if !d_v.is_null() {
        *d_v = m.d_v;
    }
    if !d_y.is_null() {
        *d_y = m.d_y;
    }
    HofiltStatus::Ok
}

/// Mesh admissibility threshold for orders >= 2 (infinity when the sensor
/// is flat).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hofilt_model_delta0(model: *const HofiltModel) -> f64 {
    if model.is_null() {
        return f64::NAN;
    }
    (*model).inner.delta0()
}

/// Truncation `Gamma_{q,delta}(z)`; `|result| <= delta`.
#[no_mangle]
pub extern "C" fn hofilt_gamma(q: f64, delta: f64, z: f64) -> f64 {
    likelihood::gamma(q, delta, z)
}

/// Taming error `Gamma_{q,delta}(z) - z`.
#[no_mangle]
pub extern "C" fn hofilt_epsilon(q: f64, delta: f64, z: f64) -> f64 {
    likelihood::epsilon(q, delta, z)
}

#[allow(clippy::too_many_arguments)]
unsafe fn run_estimate(
    model: *const HofiltModel,
    phi: *const c_char,
    order: i32,
    n: usize,
    paths: usize,
    refinement: usize,
    t: f64,
    x_seed: u64,
    y_seed: u64,
    allow_inadmissible: bool,
) -> Result<filter::FilterEstimate, HofiltStatus> {
    if model.is_null() {
        set_error("null model handle");
        return Err(HofiltStatus::NullArgument);
    }
    let model = &(*model).inner;
    let phi_text = str_arg(phi)?;
    let phi = expr::parse(phi_text, model.d_x).map_err(|e| {
        set_error(format!("phi: {e}"));
        HofiltStatus::Config
    })?;
    let order = if order < 0 {
        OrderSpec::Reference
    } else {
        OrderSpec::Order(order as usize)
    };
    if n == 0 || paths < 2 || t <= 0.0 {
        set_error("need n >= 1, paths >= 2, t > 0");
        return Err(HofiltStatus::Config);
    }
    let partition = Partition::uniform(n, t);
    let grid = FineGrid::new(partition.clone(), refinement).map_err(|e| {
        set_error(e.to_string());
        HofiltStatus::Config
    })?;
    let y_path = generate(model, Arc::new(grid), y_seed, 0, Measure::PTilde);
    filter::estimate(
        model,
        &phi,
        &y_path,
        &partition,
        order,
        paths,
        x_seed,
        y_seed,
        allow_inadmissible,
    )
    .map_err(|e| {
        let status = status_of_filter(&e);
        set_error(e.to_string());
        status
    })
}

/// Ensemble estimate on a fresh reference-measure observation path.
/// `order < 0` selects the fine-grid reference weight.
///
/// # Safety
/// `model` must be a live handle, `phi` a NUL-terminated string, `out` a
/// valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn hofilt_estimate(
    model: *const HofiltModel,
    phi: *const c_char,
    order: i32,
    n: usize,
    paths: usize,
    refinement: usize,
    t: f64,
    x_seed: u64,
    y_seed: u64,
    allow_inadmissible: bool,
    out: *mut HofiltEstimate,
) -> HofiltStatus {
    guarded(|| {
        if out.is_null() {
            return fail(HofiltStatus::NullArgument, "null output pointer");
        }
        match run_estimate(
            model,
            phi,
            order,
            n,
            paths,
            refinement,
            t,
            x_seed,
            y_seed,
            allow_inadmissible,
        ) {
            Ok(est) => {
                *out = HofiltEstimate {
                    rho_phi: est.rho_phi,
                    rho_one: est.rho_one,
                    pi_phi: est.pi_phi,
                    se_rho_phi: est.se_rho_phi,
                    se_rho_one: est.se_rho_one,
                    se_pi_phi: est.se_pi_phi,
                };
                HofiltStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Common-random-numbers estimate of `rho(phi) - rho^{tau,m}(phi)` on a
/// fresh reference-measure observation path.
///
/// # Safety
/// `model` must be a live handle, `phi` a NUL-terminated string; `out_value`
/// and `out_se` must be valid pointers.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn hofilt_paired_error(
    model: *const HofiltModel,
    phi: *const c_char,
    order: usize,
    n: usize,
    paths: usize,
    refinement: usize,
    t: f64,
    x_seed: u64,
    y_seed: u64,
    out_value: *mut f64,
    out_se: *mut f64,
) -> HofiltStatus {
    guarded(|| {
        if out_value.is_null() || out_se.is_null() {
            return fail(HofiltStatus::NullArgument, "null output pointer");
        }
        if model.is_null() {
            return fail(HofiltStatus::NullArgument, "null model handle");
        }
        let model = &(*model).inner;
        let phi_text = match str_arg(phi) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let phi = match expr::parse(phi_text, model.d_x) {
            Ok(p) => p,
            Err(e) => return fail(HofiltStatus::Config, format!("phi: {e}")),
        };
        if n == 0 || paths < 2 || t <= 0.0 {
            return fail(HofiltStatus::Config, "need n >= 1, paths >= 2, t > 0");
        }
        let partition = Partition::uniform(n, t);
        let grid = match FineGrid::new(partition.clone(), refinement) {
            Ok(g) => g,
            Err(e) => return fail(HofiltStatus::Config, e.to_string()),
        };
        let y_path = generate(model, Arc::new(grid), y_seed, 0, Measure::PTilde);
        match filter::paired_error(model, &phi, &y_path, &partition, order, paths, x_seed) {
            Ok(pe) => {
                *out_value = pe.value;
                *out_se = pe.se;
                HofiltStatus::Ok
            }
            Err(e) => {
                let status = status_of_filter(&e);
                fail(status, e.to_string())
            }
        }
    })
}

/// Kalman-Bucy oracle for a linear-Gaussian model on a fresh
/// reference-measure observation path. Writes the conditional mean (length
/// `d_x`), covariance (row-major `d_x * d_x`) and log-evidence; any output
/// pointer may be null to skip it.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must have the stated
/// capacities.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn hofilt_kalman(
    model: *const HofiltModel,
    n: usize,
    refinement: usize,
    t: f64,
    y_seed: u64,
    out_mean: *mut f64,
    out_covariance: *mut f64,
    out_log_evidence: *mut f64,
) -> HofiltStatus {
    guarded(|| {
        if model.is_null() {
            return fail(HofiltStatus::NullArgument, "null model handle");
        }
        let model = &(*model).inner;
        if n == 0 || t <= 0.0 {
            return fail(HofiltStatus::Config, "need n >= 1, t > 0");
        }
        let coeffs = match filter::certify_linear(model) {
            Ok(c) => c,
            Err(e) => return fail(HofiltStatus::Config, e.to_string()),
        };
        let grid = match FineGrid::new(Partition::uniform(n, t), refinement) {
            Ok(g) => g,
            Err(e) => return fail(HofiltStatus::Config, e.to_string()),
        };
        let y_path = generate(model, Arc::new(grid), y_seed, 0, Measure::PTilde);
        let state = filter::kalman_bucy(&coeffs, &y_path);
        let d_x = model.d_x;
        if !out_mean.is_null() {
            for i in 0..d_x {
                *out_mean.add(i) = state.mean[i];
            }
        }
        if !out_covariance.is_null() {
            for i in 0..d_x {
                for j in 0..d_x {
                    *out_covariance.add(i * d_x + j) = state.covariance[(i, j)];
                }
            }
        }
        if !out_log_evidence.is_null() {
            *out_log_evidence = state.log_evidence;
        }
        HofiltStatus::Ok
    })
}
