//! C ABI over the smcinfer engine.
//!
//! Updaters are opaque handles created by [`smc_updater_new`] and released
//! with [`smc_updater_free`]. Every fallible call returns an [`SmcStatus`];
//! on failure the message is available from [`smc_last_error_message`] on
//! the same thread. Models, priors and experiments cross the boundary as
//! UTF-8 JSON strings using the same records as the command-line
//! configuration, e.g. `["binomial", {"n_meas": 25}, "precession"]`,
//! `{"kind": "uniform", "bounds": [[0, 1]]}` and `{"t": 1.5, "n_meas": 25}`.
//!
//! Handles are not thread-safe: callers must not use one handle from two
//! threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use smcinfer::design::complete_experiment;
use smcinfer::estimate::{simple_est_prec, simple_est_rb, DataRecord, EstimateSummary};
use smcinfer::models::ModelSpec;
use smcinfer::resample::ResamplerConfig;
use smcinfer::{stream_from_seed, Distribution, Error, Experiment, Updater};

/// Result codes. The non-zero engine codes match the command-line exit
/// codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmcStatus {
    Ok = 0,
    /// Bad configuration, unsupported request or invalid state.
    Config = 2,
    /// Malformed data or I/O failure.
    Ingestion = 3,
    /// Numerical degeneracy: zero evidence, singular information, etc.
    Numeric = 4,
    /// An iterative algorithm did not converge.
    Convergence = 5,
    /// A required pointer argument was null.
    NullPointer = 10,
    /// An argument was malformed (bad UTF-8, bad JSON, short buffer).
    InvalidArgument = 11,
    /// The engine panicked; the handle involved must not be reused.
    Panic = 12,
}

impl From<&Error> for SmcStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            3 => SmcStatus::Ingestion,
            4 => SmcStatus::Numeric,
            5 => SmcStatus::Convergence,
            _ => SmcStatus::Config,
        }
    }
}

/// Opaque updater handle.
pub struct SmcUpdater {
    inner: Updater,
    default_n_meas: Option<u64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SmcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SmcStatus::from(&e), e.to_string())
    }
}

type Call<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> Call<()>) -> SmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SmcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SmcStatus::Panic
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SmcStatus::InvalidArgument, msg.into())
}

fn non_null<T>(p: *const T, name: &str) -> Call<()> {
    if p.is_null() {
        Err(Failure(SmcStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn json_arg(p: *const c_char, name: &str) -> Call<serde_json::Value> {
    non_null(p, name)?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("`{name}` is not UTF-8")))?;
    serde_json::from_str(s).map_err(|e| invalid(format!("`{name}`: {e}")))
}

/// # Safety
/// `u` must be null or a live handle.
unsafe fn handle<'a>(u: *const SmcUpdater) -> Call<&'a SmcUpdater> {
    non_null(u, "updater")?;
    Ok(&*u)
}

/// # Safety
/// `out` must be null or valid for `len` writes.
unsafe fn write_slice(out: *mut f64, len: usize, values: &[f64], name: &str) -> Call<()> {
    non_null(out, name)?;
    if len < values.len() {
        return Err(invalid(format!("`{name}` holds {len} values, {} needed", values.len())));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

/// The most recent error message on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn smc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn smc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an updater with `n_particles` particles drawn from `prior_json`
/// using the default Liu–West resampler. On success `*out` receives the
/// handle.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smc_updater_new(
    model_json: *const c_char,
    prior_json: *const c_char,
    n_particles: usize,
    seed: u64,
    out: *mut *mut SmcUpdater,
) -> SmcStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let spec = ModelSpec::from_value(&json_arg(model_json, "model_json")?)?;
        let model = spec.build()?;
        let prior: Distribution =
            serde_json::from_value(json_arg(prior_json, "prior_json")?).map_err(|e| invalid(format!("prior_json: {e}")))?;
        let inner = Updater::new(model, n_particles, &prior, ResamplerConfig::default(), stream_from_seed(seed))?;
        *out = Box::into_raw(Box::new(SmcUpdater { inner, default_n_meas: spec.default_n_meas() }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `u` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smc_updater_free(u: *mut SmcUpdater) {
    if !u.is_null() {
        drop(Box::from_raw(u));
    }
}

/// Incorporates one datum. A missing `n_meas` falls back to the model
/// chain's default. On error the updater is unchanged.
///
/// # Safety
/// `u` must be a live handle; `experiment_json` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn smc_updater_update(u: *mut SmcUpdater, outcome: u64, experiment_json: *const c_char) -> SmcStatus {
    guard(|| {
        non_null(u, "updater")?;
        let e: Experiment = serde_json::from_value(json_arg(experiment_json, "experiment_json")?)
            .map_err(|e| invalid(format!("experiment_json: {e}")))?;
        let h = &mut *u;
        let e = complete_experiment(h.inner.model().as_ref(), e, h.default_n_meas);
        h.inner.update(outcome as usize, &e)?;
        Ok(())
    })
}

/// Number of model parameters `d`.
///
/// # Safety
/// `u` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smc_updater_n_params(u: *const SmcUpdater, out: *mut usize) -> SmcStatus {
    guard(|| {
        let h = handle(u)?;
        non_null(out, "out")?;
        *out = h.inner.filter().n_modelparams();
        Ok(())
    })
}

/// Posterior mean into `out[0..d]`.
///
/// # Safety
/// `u` must be a live handle; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn smc_updater_est_mean(u: *const SmcUpdater, out: *mut f64, len: usize) -> SmcStatus {
    guard(|| write_slice(out, len, &handle(u)?.inner.est_mean(), "out"))
}

/// Posterior covariance, row-major, into `out[0..d*d]`.
///
/// # Safety
/// `u` must be a live handle; `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn smc_updater_est_covariance(u: *const SmcUpdater, out: *mut f64, len: usize) -> SmcStatus {
    guard(|| {
        let c = handle(u)?.inner.est_covariance();
        let rows: Vec<f64> = c.transpose().iter().copied().collect();
        write_slice(out, len, &rows, "out")
    })
}

/// Effective sample size of the current weights.
///
/// # Safety
/// `u` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smc_updater_ess(u: *const SmcUpdater, out: *mut f64) -> SmcStatus {
    guard(|| {
        let h = handle(u)?;
        non_null(out, "out")?;
        *out = h.inner.ess();
        Ok(())
    })
}

/// Log model evidence of the data seen so far (0 before any data).
///
/// # Safety
/// `u` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smc_updater_log_evidence(u: *const SmcUpdater, out: *mut f64) -> SmcStatus {
    guard(|| {
        let h = handle(u)?;
        non_null(out, "out")?;
        *out = h.inner.log_evidence();
        Ok(())
    })
}

/// # Safety
/// Each pointer must be valid for `n_rows` reads.
unsafe fn record(counts: *const u64, xs: *const f64, n_shots: *const u64, n_rows: usize) -> Call<DataRecord> {
    if n_rows == 0 {
        return Ok(DataRecord::default());
    }
    non_null(counts, "counts")?;
    non_null(xs, "xs")?;
    non_null(n_shots, "n_shots")?;
    Ok(DataRecord::from_columns(
        std::slice::from_raw_parts(counts, n_rows),
        std::slice::from_raw_parts(xs, n_rows),
        std::slice::from_raw_parts(n_shots, n_rows),
    )?)
}

/// # Safety
/// `mean_out` valid for `d` writes, `cov_out` for `d*d`.
unsafe fn write_summary(s: &EstimateSummary, mean_out: *mut f64, cov_out: *mut f64) -> Call<()> {
    let d = s.mean.len();
    write_slice(mean_out, d, &s.mean, "mean_out")?;
    let flat: Vec<f64> = s.covariance.iter().flatten().copied().collect();
    write_slice(cov_out, d * d, &flat, "cov_out")
}

/// Randomized-benchmarking estimate from rows `(counts, m, n_shots)`.
/// Writes `(p, A, B)` to `mean_out[0..3]` and the row-major covariance to
/// `cov_out[0..9]`.
///
/// # Safety
/// Column pointers valid for `n_rows` reads; `mean_out` for 3 writes and
/// `cov_out` for 9.
#[no_mangle]
pub unsafe extern "C" fn smc_simple_est_rb(
    counts: *const u64,
    ms: *const f64,
    n_shots: *const u64,
    n_rows: usize,
    n_particles: usize,
    p_min: f64,
    p_max: f64,
    seed: u64,
    mean_out: *mut f64,
    cov_out: *mut f64,
) -> SmcStatus {
    guard(|| {
        let data = record(counts, ms, n_shots, n_rows)?;
        let s = simple_est_rb(&data, n_particles, p_min, p_max, seed)?;
        write_summary(&s, mean_out, cov_out)
    })
}

/// Frequency estimate from rows `(counts, t, n_shots)` with a uniform prior
/// on `[omega_min, omega_max]`. Writes the mean and variance of ω.
///
/// # Safety
/// Column pointers valid for `n_rows` reads; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn smc_simple_est_prec(
    counts: *const u64,
    ts: *const f64,
    n_shots: *const u64,
    n_rows: usize,
    n_particles: usize,
    omega_min: f64,
    omega_max: f64,
    seed: u64,
    mean_out: *mut f64,
    var_out: *mut f64,
) -> SmcStatus {
    guard(|| {
        let data = record(counts, ts, n_shots, n_rows)?;
        let s = simple_est_prec(&data, n_particles, [omega_min, omega_max], seed)?;
        write_summary(&s, mean_out, var_out)
    })
}
