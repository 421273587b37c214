//! C ABI over the `xanat` library.
//!
//! Objects cross the boundary as opaque handles (`XanatCohort`,
//! `XanatParams`) owned by the caller and released with the matching
//! `*_free`. Every fallible call returns a `XanatStatus`; on failure the
//! message is available from `xanat_last_error` on the same thread. Strings
//! returned through `char **` out-parameters are heap-allocated and must be
//! released with `xanat_string_free`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use xanat::model::{ModelParams, Pooling};
use xanat::synth::{Cohort, CohortConfig};
use xanat::trainer::TrainConfig;
use xanat::Error;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XanatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Parse = 5,
    Io = 6,
    Numerical = 7,
    Degenerate = 8,
    Panic = 9,
}

/// Opaque cohort handle.
pub struct XanatCohort(Cohort);

/// Opaque model-parameter handle.
pub struct XanatParams(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> XanatStatus {
    match e {
        Error::Config(_) => XanatStatus::Config,
        Error::Shape(_) => XanatStatus::Shape,
        Error::Parse { .. } | Error::Version { .. } | Error::Checksum { .. } | Error::Json(_) => XanatStatus::Parse,
        Error::Io { .. } => XanatStatus::Io,
        Error::NumericalAbort { .. } | Error::NonFinite(_) => XanatStatus::Numerical,
        Error::Degenerate(_) => XanatStatus::Degenerate,
        Error::InvalidArgument(_) | Error::UnboundLeaf(_) => XanatStatus::InvalidArgument,
    }
}

/// Run `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (XanatStatus, String)>) -> XanatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => XanatStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside xanat".into());
            XanatStatus::Panic
        }
    }
}

fn lib<T>(r: xanat::Result<T>) -> Result<T, (XanatStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (XanatStatus, String) {
    (XanatStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (XanatStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (XanatStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Optional JSON text: null or empty means "use defaults".
unsafe fn json_arg<T: serde::de::DeserializeOwned + Default>(
    p: *const c_char,
    what: &str,
) -> Result<T, (XanatStatus, String)> {
    if p.is_null() {
        return Ok(T::default());
    }
    let s = str_arg(p, what)?;
    if s.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(s).map_err(|e| (XanatStatus::Config, format!("{what}: {e}")))
}

unsafe fn pooling_arg(p: *const c_char) -> Result<Pooling, (XanatStatus, String)> {
    if p.is_null() {
        return Ok(Pooling::default());
    }
    lib(str_arg(p, "pooling")?.parse())
}

fn out_string(s: String, out: *mut *mut c_char) -> Result<(), (XanatStatus, String)> {
    let c = CString::new(s).map_err(|_| (XanatStatus::InvalidArgument, "string contains NUL".to_string()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn check_dims(p: &ModelParams, c: &Cohort) -> Result<(), (XanatStatus, String)> {
    if p.anatomies() != c.anatomies() || p.dim() != c.dim() {
        return Err((
            XanatStatus::Shape,
            format!(
                "params are M={} D={}, cohort is M={} D={}",
                p.anatomies(),
                p.dim(),
                c.anatomies(),
                c.dim()
            ),
        ));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn xanat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn xanat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn xanat_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generate a cohort from a JSON `CohortConfig` (null or "" for defaults).
#[no_mangle]
pub unsafe extern "C" fn xanat_cohort_generate(config_json: *const c_char, out: *mut *mut XanatCohort) -> XanatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: CohortConfig = json_arg(config_json, "config")?;
        let c = lib(xanat::synth::generate_cohort(&cfg))?;
        *out = Box::into_raw(Box::new(XanatCohort(c)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn xanat_cohort_read(path: *const c_char, out: *mut *mut XanatCohort) -> XanatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = PathBuf::from(str_arg(path, "path")?);
        let c = lib(xanat::synth::read_cohort(&p))?;
        *out = Box::into_raw(Box::new(XanatCohort(c)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn xanat_cohort_write(cohort: *const XanatCohort, path: *const c_char) -> XanatStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        let p = PathBuf::from(str_arg(path, "path")?);
        lib(xanat::synth::write_cohort(&c.0, &p))
    })
}

/// Hex SHA-256 of the cohort's serialized body.
#[no_mangle]
pub unsafe extern "C" fn xanat_cohort_checksum(cohort: *const XanatCohort, out: *mut *mut c_char) -> XanatStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(lib(xanat::synth::cohort_checksum(&c.0))?, out)
    })
}

#[no_mangle]
pub unsafe extern "C" fn xanat_cohort_shape(
    cohort: *const XanatCohort,
    patients: *mut usize,
    anatomies: *mut usize,
    dim: *mut usize,
) -> XanatStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        if patients.is_null() || anatomies.is_null() || dim.is_null() {
            return Err(null("output pointer"));
        }
        *patients = c.0.patients.len();
        *anatomies = c.0.anatomies();
        *dim = c.0.dim();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn xanat_cohort_free(cohort: *mut XanatCohort) {
    if !cohort.is_null() {
        drop(Box::from_raw(cohort));
    }
}

/// Seeded initialization matching the trainer's.
#[no_mangle]
pub unsafe extern "C" fn xanat_params_init(cohort: *const XanatCohort, seed: u64, out: *mut *mut XanatParams) -> XanatStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let p = lib(xanat::trainer::initial_params(&c.0, seed))?;
        *out = Box::into_raw(Box::new(XanatParams(p)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn xanat_params_load(path: *const c_char, out: *mut *mut XanatParams) -> XanatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = PathBuf::from(str_arg(path, "path")?);
        let params = lib(ModelParams::load(&p))?;
        *out = Box::into_raw(Box::new(XanatParams(params)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn xanat_params_save(params: *const XanatParams, path: *const c_char) -> XanatStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let path = PathBuf::from(str_arg(path, "path")?);
        lib(p.0.save(&path))
    })
}

/// Current temperature `exp(log_tau)`.
#[no_mangle]
pub unsafe extern "C" fn xanat_params_temperature(params: *const XanatParams, out: *mut f64) -> XanatStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = p.0.temperature();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn xanat_params_free(params: *mut XanatParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Train from the seeded initialization. `config_json` is a JSON
/// `TrainConfig` (null or "" for defaults). `out_trace` may be null;
/// otherwise it receives the step trace as JSON Lines.
#[no_mangle]
pub unsafe extern "C" fn xanat_train(
    cohort: *const XanatCohort,
    config_json: *const c_char,
    out_params: *mut *mut XanatParams,
    out_trace: *mut *mut c_char,
) -> XanatStatus {
    guard(|| {
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        if out_params.is_null() {
            return Err(null("out_params"));
        }
        let cfg: TrainConfig = json_arg(config_json, "config")?;
        let (params, trace) = lib(xanat::trainer::train(&c.0, &cfg))?;
        if !out_trace.is_null() {
            out_string(lib(trace.steps_jsonl())?, out_trace)?;
        }
        *out_params = Box::into_raw(Box::new(XanatParams(params)));
        Ok(())
    })
}

/// Zero-shot evaluation over every template; writes the metrics report as
/// JSON. `pooling` is "mean" or "positional" (null for the default).
#[no_mangle]
pub unsafe extern "C" fn xanat_evaluate(
    params: *const XanatParams,
    cohort: *const XanatCohort,
    pooling: *const c_char,
    out_json: *mut *mut c_char,
) -> XanatStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        check_dims(&p.0, &c.0)?;
        let r = lib(xanat::evalkit::evaluate(&p.0, &c.0, pooling_arg(pooling)?))?;
        out_string(lib(serde_json::to_string(&r).map_err(Error::from))?, out_json)
    })
}

/// Collapse indices and histogram summaries for both modalities, as JSON.
#[no_mangle]
pub unsafe extern "C" fn xanat_diagnose(
    params: *const XanatParams,
    cohort: *const XanatCohort,
    pooling: *const c_char,
    bins: usize,
    out_json: *mut *mut c_char,
) -> XanatStatus {
    guard(|| {
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let c = cohort.as_ref().ok_or_else(|| null("cohort"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        check_dims(&p.0, &c.0)?;
        let r = lib(xanat::diagnostics::diagnose(&p.0, &c.0, pooling_arg(pooling)?, bins))?;
        out_string(lib(serde_json::to_string(&r.summary).map_err(Error::from))?, out_json)
    })
}

#[no_mangle]
pub unsafe extern "C" fn xanat_cosine(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> XanatStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let (a, b) = (std::slice::from_raw_parts(a, n), std::slice::from_raw_parts(b, n));
        *out = lib(xanat::tensor::cosine_similarity(a, b))?;
        Ok(())
    })
}

/// ROC AUC of `scores` against 0/1 `labels`.
#[no_mangle]
pub unsafe extern "C" fn xanat_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> XanatStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l = std::slice::from_raw_parts(labels, n);
        *out = lib(xanat::evalkit::roc_auc(s, l))?;
        Ok(())
    })
}
