//! C ABI over `ecgi`.
//!
//! Every function returns an [`EcgiStatus`]; results go through out-pointers.
//! On failure the message is kept per thread and can be fetched with
//! [`ecgi_last_error_message`]. Strings handed out by this library must be
//! released with [`ecgi_string_free`], handles with their own `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ecgi::experiment::{run_experiment, ExperimentConfig, SweepSummary};
use ecgi::pipeline::Method;
use ecgi::sparseprior;
use ecgi::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcgiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    NumericFailure = 4,
    ConvergenceFailure = 5,
    UndefinedMetric = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcgiMethod {
    Proposed = 0,
    Baseline = 1,
}

/// Opaque experiment configuration.
pub struct EcgiConfig {
    inner: ExperimentConfig,
}

/// Opaque result of a scar sweep.
pub struct EcgiSummary {
    inner: SweepSummary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EcgiStatus {
    match e.root() {
        Error::InvalidArgument(_) => EcgiStatus::InvalidArgument,
        Error::Config(_) | Error::Json(_) => EcgiStatus::Config,
        Error::NumericFailure(_) | Error::Instability(_) => EcgiStatus::NumericFailure,
        Error::ConvergenceFailure { .. } => EcgiStatus::ConvergenceFailure,
        Error::UndefinedMetric(_) => EcgiStatus::UndefinedMetric,
        Error::Io(_) | Error::Csv(_) => EcgiStatus::Io,
        Error::AtStep { .. } => unreachable!("root() strips step wrappers"),
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EcgiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EcgiStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            EcgiStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            EcgiStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or(Failure::Null(what))
}

unsafe fn text<'a>(ptr: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| Failure::Lib(Error::InvalidArgument(format!("{what} is not UTF-8: {e}"))))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failed call on this thread, or NULL. Free with
/// `ecgi_string_free`.
#[no_mangle]
pub extern "C" fn ecgi_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ecgi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Log density of `n` i.i.d. generalized Gaussian components.
///
/// # Safety
/// `x` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecgi_gg_log_density(
    x: *const f64,
    n: usize,
    p: f64,
    alpha: f64,
    out: *mut f64,
) -> EcgiStatus {
    guard(|| {
        let x = slice(x, n, "x")?;
        let o = self::out(out, "out")?;
        *o = sparseprior::gg_log_density(x, p, alpha)?;
        Ok(())
    })
}

/// Log of the Gaussian lower bound with precisions `lambda`.
///
/// # Safety
/// `x` and `lambda` must each point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecgi_bound_log_density(
    x: *const f64,
    lambda: *const f64,
    n: usize,
    p: f64,
    alpha: f64,
    out: *mut f64,
) -> EcgiStatus {
    guard(|| {
        let x = slice(x, n, "x")?;
        let lambda = slice(lambda, n, "lambda")?;
        let o = self::out(out, "out")?;
        *o = sparseprior::bound_log_density(x, p, alpha, lambda)?;
        Ok(())
    })
}

/// Variational parameter making the bound tight at second moment `x_sq`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecgi_optimal_tau(
    x_sq: f64,
    p: f64,
    alpha: f64,
    tau_min: f64,
    out: *mut f64,
) -> EcgiStatus {
    guard(|| {
        if !(p > 0.0 && p < 2.0) || !(alpha > 0.0) || !(tau_min > 0.0) || x_sq < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "need 0 < p < 2, alpha > 0, tau_min > 0, x_sq >= 0 (got p={p}, alpha={alpha}, tau_min={tau_min}, x_sq={x_sq})"
            ))
            .into());
        }
        *self::out(out, "out")? = sparseprior::optimal_tau(x_sq, p, alpha, tau_min);
        Ok(())
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecgi_config_default(out: *mut *mut EcgiConfig) -> EcgiStatus {
    guard(|| {
        *self::out(out, "out")? = Box::into_raw(Box::new(EcgiConfig {
            inner: ExperimentConfig::default(),
        }));
        Ok(())
    })
}

/// Parses and validates a JSON experiment config; absent fields take their
/// defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecgi_config_from_json(json: *const c_char, out: *mut *mut EcgiConfig) -> EcgiStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(text(json, "json")?)?;
        cfg.validate()?;
        *self::out(out, "out")? = Box::into_raw(Box::new(EcgiConfig { inner: cfg }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle; `out` must be writable. Free the result with
/// `ecgi_string_free`.
#[no_mangle]
pub unsafe extern "C" fn ecgi_config_to_json(cfg: *const EcgiConfig, out: *mut *mut c_char) -> EcgiStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or(Failure::Null("cfg"))?;
        let json = serde_json::to_string_pretty(&cfg.inner).map_err(Error::from)?;
        *self::out(out, "out")? = to_c_string(json);
        Ok(())
    })
}

/// Replaces the scar segments of the sweep.
///
/// # Safety
/// `cfg` must be a live handle; `segments` must point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn ecgi_config_set_segments(cfg: *mut EcgiConfig, segments: *const usize, n: usize) -> EcgiStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or(Failure::Null("cfg"))?;
        let segs = if n == 0 {
            Vec::new()
        } else if segments.is_null() {
            return Err(Failure::Null("segments"));
        } else {
            std::slice::from_raw_parts(segments, n).to_vec()
        };
        let mut next = cfg.inner.clone();
        next.scar_segments = segs;
        next.validate()?;
        cfg.inner = next;
        Ok(())
    })
}

/// Sets the master seed, re-deriving every stream.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ecgi_config_set_seed(cfg: *mut EcgiConfig, seed: u64) -> EcgiStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or(Failure::Null("cfg"))?;
        cfg.inner = cfg.inner.clone().with_master_seed(seed);
        Ok(())
    })
}

/// Directory for per-trial exports; NULL disables file output.
///
/// # Safety
/// `cfg` must be a live handle; `dir` NULL or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ecgi_config_set_output_dir(cfg: *mut EcgiConfig, dir: *const c_char) -> EcgiStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or(Failure::Null("cfg"))?;
        cfg.inner.output_dir = if dir.is_null() {
            None
        } else {
            Some(PathBuf::from(text(dir, "dir")?))
        };
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ecgi_config_free(cfg: *mut EcgiConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs both methods over every configured scar segment. Per-trial failures
/// are recorded in the summary, not returned.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecgi_run_sweep(cfg: *const EcgiConfig, out: *mut *mut EcgiSummary) -> EcgiStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or(Failure::Null("cfg"))?;
        let o = self::out(out, "out")?;
        let summary = run_experiment(&cfg.inner)?;
        *o = Box::into_raw(Box::new(EcgiSummary { inner: summary }));
        Ok(())
    })
}

/// Trial counts: completed, skipped and failed.
///
/// # Safety
/// `summary` must be a live handle; out-pointers may be NULL to skip.
#[no_mangle]
pub unsafe extern "C" fn ecgi_summary_counts(
    summary: *const EcgiSummary,
    completed: *mut usize,
    skipped: *mut usize,
    failed: *mut usize,
) -> EcgiStatus {
    guard(|| {
        let s = &summary.as_ref().ok_or(Failure::Null("summary"))?.inner;
        for (ptr, v) in [(completed, s.completed), (skipped, s.skipped), (failed, s.failed)] {
            if let Some(p) = ptr.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Mean dice of one method; UNDEFINED_METRIC when no trial completed.
///
/// # Safety
/// `summary` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecgi_summary_mean_dice(
    summary: *const EcgiSummary,
    method: EcgiMethod,
    out: *mut f64,
) -> EcgiStatus {
    guard(|| {
        let s = &summary.as_ref().ok_or(Failure::Null("summary"))?.inner;
        let o = self::out(out, "out")?;
        let m = match method {
            EcgiMethod::Proposed => &s.proposed,
            EcgiMethod::Baseline => &s.baseline,
        };
        let name = match method {
            EcgiMethod::Proposed => Method::Proposed,
            EcgiMethod::Baseline => Method::Baseline,
        };
        *o = m
            .dice
            .as_ref()
            .ok_or_else(|| Error::UndefinedMetric(format!("no completed {} trials", name.as_str())))?
            .mean;
        Ok(())
    })
}

/// Welch t statistic and two-sided p of proposed against baseline dice.
///
/// # Safety
/// `summary` must be a live handle; `t` and `p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ecgi_summary_welch(summary: *const EcgiSummary, t: *mut f64, p: *mut f64) -> EcgiStatus {
    guard(|| {
        let s = &summary.as_ref().ok_or(Failure::Null("summary"))?.inner;
        let (t, p) = (self::out(t, "t")?, self::out(p, "p")?);
        let w = s
            .dice_welch
            .as_ref()
            .ok_or_else(|| Error::UndefinedMetric("Welch test needs two varying groups".into()))?;
        *t = w.t;
        *p = w.p;
        Ok(())
    })
}

/// # Safety
/// `summary` must be a live handle; `out` must be writable. Free the result
/// with `ecgi_string_free`.
#[no_mangle]
pub unsafe extern "C" fn ecgi_summary_to_json(summary: *const EcgiSummary, out: *mut *mut c_char) -> EcgiStatus {
    guard(|| {
        let s = summary.as_ref().ok_or(Failure::Null("summary"))?;
        let json = serde_json::to_string_pretty(&s.inner).map_err(Error::from)?;
        *self::out(out, "out")? = to_c_string(json);
        Ok(())
    })
}

/// # Safety
/// `summary` must be NULL or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ecgi_summary_free(summary: *mut EcgiSummary) {
    if !summary.is_null() {
        drop(Box::from_raw(summary));
    }
}
