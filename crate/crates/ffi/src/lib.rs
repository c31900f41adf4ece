//! C ABI over kaamlab model bundles.
//!
//! Handles are opaque and owned by the caller: every `KaamModel*` from
//! `kaam_model_load` goes back through `kaam_model_free`, every string
//! returned through an out-parameter through `kaam_string_free`. Functions
//! return a `KaamStatus`; on failure `kaam_last_error` describes the error
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kaamlab::service::{LoadedModel, PatientRequest};
use kaamlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KaamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    CorruptBundle = 4,
    VersionMismatch = 5,
    InvalidInput = 6,
    Schema = 7,
    BufferSize = 8,
    Internal = 9,
    Panic = 10,
}

/// A loaded bundle with its explanation caches.
pub struct KaamModel {
    inner: LoadedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> KaamStatus {
    match e {
        Error::Io { .. } => KaamStatus::Io,
        Error::CorruptBundle { .. } => KaamStatus::CorruptBundle,
        Error::VersionMismatch { .. } => KaamStatus::VersionMismatch,
        Error::Schema(_) => KaamStatus::Schema,
        Error::InvalidInput(_) | Error::Shape { .. } | Error::Index { .. } | Error::Arity { .. } => {
            KaamStatus::InvalidInput
        }
        _ => KaamStatus::Internal,
    }
}

struct Fail(KaamStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KaamStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KaamStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside kaamlab");
            KaamStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(KaamStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(KaamStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(m: *const KaamModel) -> Result<&'a LoadedModel, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| Fail(KaamStatus::NullPointer, "model handle is null".into()))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(KaamStatus::NullPointer, "output pointer is null".into()));
    }
    let c = CString::new(s).map_err(|_| Fail(KaamStatus::Internal, "output holds a nul byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Fail> {
    serde_json::to_string(v).map_err(|e| Fail(KaamStatus::Internal, e.to_string()))
}

fn parse_request(text: &str) -> Result<PatientRequest, Fail> {
    serde_json::from_str(text).map_err(|e| Fail(KaamStatus::InvalidInput, format!("request JSON: {e}")))
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kaam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn kaam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a bundle file. The model id reported in JSON output is the file stem.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn kaam_model_load(path: *const c_char, out: *mut *mut KaamModel) -> KaamStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(KaamStatus::NullPointer, "output pointer is null".into()));
        }
        *out = ptr::null_mut();
        let path = Path::new(str_arg(path, "path")?);
        let id = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
        let inner = LoadedModel::load(id, path)?;
        *out = Box::into_raw(Box::new(KaamModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from `kaam_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kaam_model_free(model: *mut KaamModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of encoded input columns expected by `kaam_model_predict_proba`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kaam_model_input_count(model: *const KaamModel, out: *mut usize) -> KaamStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(Fail(KaamStatus::NullPointer, "output pointer is null".into()));
        }
        *out = m.bundle.preprocessor.width();
        Ok(())
    })
}

/// Number of classes.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kaam_model_class_count(model: *const KaamModel, out: *mut usize) -> KaamStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(Fail(KaamStatus::NullPointer, "output pointer is null".into()));
        }
        *out = m.bundle.model.class_labels().len();
        Ok(())
    })
}

/// Class probabilities for one already-encoded row.
///
/// # Safety
/// `x` must point to `x_len` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn kaam_model_predict_proba(
    model: *const KaamModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> KaamStatus {
    guard(|| {
        let m = model_arg(model)?;
        if x.is_null() || out.is_null() {
            return Err(Fail(KaamStatus::NullPointer, "input or output buffer is null".into()));
        }
        let classes = m.bundle.model.class_labels().len();
        if out_len < classes {
            return Err(Fail(KaamStatus::BufferSize, format!("output holds {out_len} values, need {classes}")));
        }
        let row = std::slice::from_raw_parts(x, x_len);
        let p = m.bundle.model.predict_proba(row)?;
        std::slice::from_raw_parts_mut(out, classes).copy_from_slice(&p);
        Ok(())
    })
}

/// Prediction from raw covariates. `request_json` has the HTTP API's
/// request shape (`{"covariates": {...}}`); the reply matches its body.
///
/// # Safety
/// `request_json` must be nul-terminated; `out_json` writable. Free the
/// result with `kaam_string_free`.
#[no_mangle]
pub unsafe extern "C" fn kaam_model_predict_json(
    model: *const KaamModel,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> KaamStatus {
    guard(|| {
        let m = model_arg(model)?;
        let req = parse_request(str_arg(request_json, "request")?)?;
        put_string(out_json, to_json(&m.predict(&req)?)?)
    })
}

/// Radar, PDP curves, importance and neighbours for one patient.
///
/// # Safety
/// As `kaam_model_predict_json`.
#[no_mangle]
pub unsafe extern "C" fn kaam_model_explain_json(
    model: *const KaamModel,
    request_json: *const c_char,
    out_json: *mut *mut c_char,
) -> KaamStatus {
    guard(|| {
        let m = model_arg(model)?;
        let req = parse_request(str_arg(request_json, "request")?)?;
        put_string(out_json, to_json(&m.explain(&req)?)?)
    })
}

/// Rendered formula text; `decimals < 0` leaves coefficients unrounded.
///
/// # Safety
/// `out_text` must be writable. Free the result with `kaam_string_free`.
#[no_mangle]
pub unsafe extern "C" fn kaam_model_formula(
    model: *const KaamModel,
    decimals: i32,
    out_text: *mut *mut c_char,
) -> KaamStatus {
    guard(|| {
        let m = model_arg(model)?;
        let d = u32::try_from(decimals).ok();
        put_string(out_text, m.formula(d)?.body.text)
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kaam_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
