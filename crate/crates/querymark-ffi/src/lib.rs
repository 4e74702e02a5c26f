//! C interface over the querymark library: opaque handles, integer status
//! codes, and a thread-local error message. Every function is
//! panic-isolated; a panic surfaces as `QM_INTERNAL_ERROR` instead of
//! unwinding across the boundary.
//!
//! Ownership is explicit: `_load` constructors hand out handles that must be
//! returned to the matching `_free`, and no function stores a caller pointer
//! past its own call.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use querymark::encoding::{entropy, EncodingScheme, Signature};
use querymark::extraction::{extract, Predictor};
use querymark::keygen::WMKeySet;
use querymark::tensor::{ModelCheckpoint, Tensor};
use querymark::Error;

/// Status code returned by every fallible entry point. Anything other than
/// `QM_OK` leaves a description in `qm_last_error`.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum qm_status {
    QM_OK = 0,
    /// A required pointer argument was null.
    QM_NULL_ARGUMENT = 1,
    /// Arguments were non-null but unusable (bad dimensions, bad UTF-8,
    /// malformed or mismatched inputs).
    QM_INVALID_ARGUMENT = 2,
    /// The filesystem or the stored artifact format failed us.
    QM_IO_ERROR = 3,
    /// The evidence does not fit together (wrong scheme, wrong signature).
    QM_VERIFICATION_ERROR = 4,
    /// Unexpected internal failure, including caught panics.
    QM_INTERNAL_ERROR = 5,
}

/// Classifier checkpoint, loadable from a model artifact directory.
pub struct qm_model {
    inner: ModelCheckpoint,
}

/// Class-to-bit encoding scheme tied to one model's activations.
pub struct qm_scheme {
    inner: EncodingScheme,
}

/// Filtered key set plus the signature it encodes.
pub struct qm_keyset {
    inner: WMKeySet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::default();
    });
}

fn status_of(err: &Error) -> qm_status {
    match err {
        Error::Argument(_)
        | Error::Dimension(_)
        | Error::Config(_)
        | Error::Scheme(_)
        | Error::Keygen(_)
        | Error::KeygenNoSurvivors { .. } => qm_status::QM_INVALID_ARGUMENT,
        Error::Io(_) | Error::Format { .. } | Error::Json(_) => qm_status::QM_IO_ERROR,
        Error::Verification(_) => qm_status::QM_VERIFICATION_ERROR,
        _ => qm_status::QM_INTERNAL_ERROR,
    }
}

fn fail(err: &Error) -> qm_status {
    set_error(&err.to_string());
    status_of(err)
}

/// Runs `f` with panics contained; on success clears the error slot.
fn guarded(f: impl FnOnce() -> qm_status) -> qm_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == qm_status::QM_OK {
                clear_error();
            }
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            qm_status::QM_INTERNAL_ERROR
        }
    }
}

/// Converts a C path; reports null / bad UTF-8 through the status code.
unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path, qm_status> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(qm_status::QM_NULL_ARGUMENT);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error(&format!("{what} is not valid UTF-8"));
            Err(qm_status::QM_INVALID_ARGUMENT)
        }
    }
}

fn require<T>(ptr: *const T, what: &str) -> Result<(), qm_status> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        Err(qm_status::QM_NULL_ARGUMENT)
    } else {
        Ok(())
    }
}

macro_rules! ffi_try {
    ($expr:expr) => {
        match $expr {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message for the most recent failure on this thread, empty string after a
/// success. The pointer stays valid until the next call into this library
/// from the same thread.
#[no_mangle]
pub extern "C" fn qm_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a model checkpoint from a directory containing `topology.json` and
/// `weights.bin`. On success `*out` owns the handle.
#[no_mangle]
pub unsafe extern "C" fn qm_model_load(dir: *const c_char, out: *mut *mut qm_model) -> qm_status {
    guarded(|| {
        ffi_try!(require(out, "out"));
        let dir = ffi_try!(path_arg(dir, "dir"));
        match ModelCheckpoint::load_dir(dir) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(qm_model { inner }));
                qm_status::QM_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a model handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn qm_model_free(model: *mut qm_model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width the model expects (pixels per example).
#[no_mangle]
pub unsafe extern "C" fn qm_model_input_dim(model: *const qm_model) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.topology.input_dim
}

/// Number of output classes.
#[no_mangle]
pub unsafe extern "C" fn qm_model_num_classes(model: *const qm_model) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.topology.num_classes
}

/// Classifies `rows` examples of `dim` floats each, laid out row-major in
/// `pixels`. Writes one class index per row into `out_classes`, which must
/// hold `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn qm_model_predict(
    model: *const qm_model,
    pixels: *const f32,
    rows: usize,
    dim: usize,
    out_classes: *mut u32,
) -> qm_status {
    guarded(|| {
        ffi_try!(require(model, "model"));
        ffi_try!(require(pixels, "pixels"));
        ffi_try!(require(out_classes, "out_classes"));
        if rows == 0 {
            set_error("rows must be at least 1");
            return qm_status::QM_INVALID_ARGUMENT;
        }
        let data = std::slice::from_raw_parts(pixels, rows * dim).to_vec();
        let batch = match Tensor::new(vec![rows, dim], data) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        match (*model).inner.predict_classes(&batch) {
            Ok(classes) => {
                for (i, c) in classes.iter().enumerate() {
                    *out_classes.add(i) = *c as u32;
                }
                qm_status::QM_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Loads an encoding scheme from its JSON file.
#[no_mangle]
pub unsafe extern "C" fn qm_scheme_load(path: *const c_char, out: *mut *mut qm_scheme) -> qm_status {
    guarded(|| {
        ffi_try!(require(out, "out"));
        let path = ffi_try!(path_arg(path, "path"));
        match EncodingScheme::load_json(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(qm_scheme { inner }));
                qm_status::QM_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a scheme handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn qm_scheme_free(scheme: *mut qm_scheme) {
    if !scheme.is_null() {
        drop(Box::from_raw(scheme));
    }
}

/// Loads a key set from its artifact directory.
#[no_mangle]
pub unsafe extern "C" fn qm_keyset_load(dir: *const c_char, out: *mut *mut qm_keyset) -> qm_status {
    guarded(|| {
        ffi_try!(require(out, "out"));
        let dir = ffi_try!(path_arg(dir, "dir"));
        match WMKeySet::load_dir(dir) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(qm_keyset { inner }));
                qm_status::QM_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a key set handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn qm_keyset_free(keys: *mut qm_keyset) {
    if !keys.is_null() {
        drop(Box::from_raw(keys));
    }
}

/// Number of keys in the set.
#[no_mangle]
pub unsafe extern "C" fn qm_keyset_len(keys: *const qm_keyset) -> usize {
    if keys.is_null() {
        return 0;
    }
    (*keys).inner.len()
}

/// Copies the signature bits the key set encodes into `out` (one byte per
/// bit, values 0 or 1). `cap` is the capacity of `out`; the true length goes
/// to `*out_len` and the call fails if it exceeds `cap`.
#[no_mangle]
pub unsafe extern "C" fn qm_keyset_signature(
    keys: *const qm_keyset,
    out: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> qm_status {
    guarded(|| {
        ffi_try!(require(keys, "keys"));
        ffi_try!(require(out_len, "out_len"));
        let bits = &(*keys).inner.signature.bits;
        *out_len = bits.len();
        if bits.len() > cap {
            set_error(&format!("signature needs {} bytes, caller gave {cap}", bits.len()));
            return qm_status::QM_INVALID_ARGUMENT;
        }
        ffi_try!(require(out, "out"));
        std::ptr::copy_nonoverlapping(bits.as_ptr(), out, bits.len());
        qm_status::QM_OK
    })
}

/// Queries the model with the key images and scores the decoded bits against
/// the claimed signature (`signature_len` bytes, each 0 or 1). Writes the
/// bit error rate to `*out_ber` and the exact-match verdict to
/// `*out_detection`. The key set must have been generated under `scheme` and
/// must carry the same signature that is claimed here; anything else is a
/// `QM_VERIFICATION_ERROR`.
#[no_mangle]
pub unsafe extern "C" fn qm_verify(
    model: *const qm_model,
    keys: *const qm_keyset,
    scheme: *const qm_scheme,
    signature: *const u8,
    signature_len: usize,
    out_ber: *mut f64,
    out_detection: *mut bool,
) -> qm_status {
    guarded(|| {
        ffi_try!(require(model, "model"));
        ffi_try!(require(keys, "keys"));
        ffi_try!(require(scheme, "scheme"));
        ffi_try!(require(signature, "signature"));
        ffi_try!(require(out_ber, "out_ber"));
        ffi_try!(require(out_detection, "out_detection"));
        let bits = std::slice::from_raw_parts(signature, signature_len).to_vec();
        let claimed = match Signature::from_bits(bits) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        match extract(
            &(*model).inner,
            &(*keys).inner,
            &(*scheme).inner,
            &claimed,
            None,
        ) {
            Ok(report) => {
                *out_ber = report.ber;
                *out_detection = report.detection;
                qm_status::QM_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Signature capacity in bits for a K-symbol signature over `base` classes
/// per symbol: K * log2(base). Fails for K = 0 or base < 2.
#[no_mangle]
pub unsafe extern "C" fn qm_capacity(k: usize, base: usize, out_bits: *mut f64) -> qm_status {
    guarded(|| {
        ffi_try!(require(out_bits, "out_bits"));
        match entropy(k, base) {
            Ok(bits) => {
                *out_bits = bits;
                qm_status::QM_OK
            }
            Err(e) => fail(&e),
        }
    })
}
