//! C ABI over the core toolkit: status codes, a thread-local error message,
//! scalar kernels, batched Gumbel loss, and an opaque trained-model handle.
//!
//! Conventions:
//! - Every fallible function returns [`GolStatus`]; `GOL_STATUS_OK` is 0.
//! - On any non-zero status the thread-local error message is set and can
//!   be read with `gol_last_error_message`.
//! - Pointers must be valid for the documented lengths; null pointers are
//!   rejected with `GOL_STATUS_NULL_POINTER` instead of being dereferenced.
//! - Strings returned through out-pointers are heap-allocated and must be
//!   released with `gol_string_free`; handles with `gol_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use gol_core::activation::{gumbel_cdf, ScoreVector, Temperature};
use gol_core::data::make_longtail;
use gol_core::init::{initial_total_gradient, solve_bias};
use gol_core::loss::{gumbel_loss_tempered, TargetVector};
use gol_core::trainer::{train, Model, RunReport, TrainConfig};
use gol_core::Error;

/// Result of every fallible call in this ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GolStatus {
    /// Success.
    GolStatusOk = 0,
    /// A pointer argument was null.
    GolStatusNullPointer = 1,
    /// An argument failed validation.
    GolStatusInvalidArgument = 2,
    /// Input text could not be parsed.
    GolStatusParse = 3,
    /// Training diverged or produced non-finite numbers.
    GolStatusNumeric = 4,
    /// An internal invariant was violated.
    GolStatusInternal = 5,
}

use GolStatus::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: GolStatus, message: &str) -> GolStatus {
    set_error(message);
    status
}

fn status_of(err: &Error) -> GolStatus {
    match err {
        Error::Divergence { .. } | Error::NonFiniteScore { .. } => GolStatusNumeric,
        Error::Json(_) | Error::MalformedGrid { .. } => GolStatusParse,
        _ => GolStatusInvalidArgument,
    }
}

fn fail_with(err: &Error) -> GolStatus {
    fail(status_of(err), &err.to_string())
}

/// Runs `body` shielding the C caller from panics.
fn guarded(body: impl FnOnce() -> GolStatus) -> GolStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(GolStatusInternal, "internal panic"),
    }
}

/// Number of bytes, excluding the trailing NUL, needed for the last error
/// message of the calling thread.
#[no_mangle]
pub extern "C" fn gol_last_error_length() -> usize {
    LAST_ERROR.with(|slot| slot.borrow().as_bytes().len())
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string. `len` is the capacity of `buf` in bytes; the
/// message is truncated if it does not fit.
#[no_mangle]
pub unsafe extern "C" fn gol_last_error_message(buf: *mut c_char, len: usize) -> GolStatus {
    if buf.is_null() {
        return GolStatusNullPointer;
    }
    if len == 0 {
        return GolStatusInvalidArgument;
    }
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes();
        let copy = bytes.len().min(len - 1);
        unsafe {
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, copy);
            *buf.add(copy) = 0;
        }
    });
    GolStatusOk
}

/// Gumbel CDF `exp(-exp(-q / sigma))` at one point.
#[no_mangle]
pub unsafe extern "C" fn gol_gumbel_cdf(q: f64, sigma: f64, out: *mut f64) -> GolStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GolStatusNullPointer, "out is null");
        }
        let temperature = match Temperature::new(sigma) {
            Ok(t) => t,
            Err(e) => return fail_with(&e),
        };
        unsafe { *out = gumbel_cdf(q, temperature) };
        GolStatusOk
    })
}

/// Classifier bias giving a zero initial total gradient for `class_count`
/// one-vs-all Gumbel heads.
#[no_mangle]
pub unsafe extern "C" fn gol_solve_bias(class_count: usize, out: *mut f64) -> GolStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GolStatusNullPointer, "out is null");
        }
        match solve_bias(class_count) {
            Ok(bias) => {
                unsafe { *out = bias };
                GolStatusOk
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Total gradient over one balanced pass at a uniform bias; zero at the
/// bias returned by `gol_solve_bias`.
#[no_mangle]
pub unsafe extern "C" fn gol_initial_total_gradient(
    class_count: usize,
    bias: f64,
    out: *mut f64,
) -> GolStatus {
    guarded(|| {
        if out.is_null() {
            return fail(GolStatusNullPointer, "out is null");
        }
        match initial_total_gradient(class_count, bias) {
            Ok(total) => {
                unsafe { *out = total };
                GolStatusOk
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Gumbel cross-entropy over `len` classes. `targets[i]` is 0 or 1. Writes
/// the total loss to `out_total` and, when `out_grad` is non-null, the
/// per-class gradient d(total)/d(scores[i]) into `out_grad[0..len]`.
#[no_mangle]
pub unsafe extern "C" fn gol_gumbel_loss(
    scores: *const f64,
    targets: *const u8,
    len: usize,
    sigma: f64,
    out_total: *mut f64,
    out_grad: *mut f64,
) -> GolStatus {
    guarded(|| {
        if scores.is_null() || targets.is_null() || out_total.is_null() {
            return fail(GolStatusNullPointer, "scores, targets, and out_total are required");
        }
        if len == 0 {
            return fail(GolStatusInvalidArgument, "len must be positive");
        }
        let scores = unsafe { slice::from_raw_parts(scores, len) };
        let targets = unsafe { slice::from_raw_parts(targets, len) };
        let temperature = match Temperature::new(sigma) {
            Ok(t) => t,
            Err(e) => return fail_with(&e),
        };
        let q = match ScoreVector::new(scores.to_vec()) {
            Ok(q) => q,
            Err(e) => return fail_with(&e),
        };
        let y = TargetVector::new(targets.iter().map(|&t| t != 0).collect());
        match gumbel_loss_tempered(&q, &y, temperature) {
            Ok(breakdown) => {
                unsafe {
                    *out_total = breakdown.total;
                    if !out_grad.is_null() {
                        ptr::copy_nonoverlapping(breakdown.grad.as_ptr(), out_grad, len);
                    }
                }
                GolStatusOk
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// A trained model together with its run report.
pub struct GolModel {
    model: Model,
    report: RunReport,
}

/// Trains a model from the same JSON configuration the `gol train`
/// subcommand accepts and returns an owned handle through `out`. The handle
/// must be released with `gol_model_free`.
#[no_mangle]
pub unsafe extern "C" fn gol_train_json(
    config_json: *const c_char,
    out: *mut *mut GolModel,
) -> GolStatus {
    guarded(|| {
        if config_json.is_null() || out.is_null() {
            return fail(GolStatusNullPointer, "config_json and out are required");
        }
        let text = match unsafe { CStr::from_ptr(config_json) }.to_str() {
            Ok(text) => text,
            Err(_) => return fail(GolStatusParse, "config_json is not valid UTF-8"),
        };
        let cfg: TrainConfig = match serde_json::from_str(text) {
            Ok(cfg) => cfg,
            Err(e) => return fail(GolStatusParse, &format!("config: {e}")),
        };
        let data = match make_longtail(&cfg.data) {
            Ok(data) => data,
            Err(e) => return fail_with(&e),
        };
        match train(&data, &cfg) {
            Ok(outcome) => {
                let handle =
                    Box::new(GolModel { model: outcome.model, report: outcome.report });
                unsafe { *out = Box::into_raw(handle) };
                GolStatusOk
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Number of input features the model expects.
#[no_mangle]
pub unsafe extern "C" fn gol_model_feature_dim(
    model: *const GolModel,
    out: *mut usize,
) -> GolStatus {
    if model.is_null() || out.is_null() {
        return fail(GolStatusNullPointer, "model and out are required");
    }
    unsafe { *out = (*model).model.feature_dim };
    GolStatusOk
}

/// Number of classes the model scores.
#[no_mangle]
pub unsafe extern "C" fn gol_model_class_count(
    model: *const GolModel,
    out: *mut usize,
) -> GolStatus {
    if model.is_null() || out.is_null() {
        return fail(GolStatusNullPointer, "model and out are required");
    }
    unsafe { *out = (*model).model.class_count };
    GolStatusOk
}

/// Predicted class index for one feature vector of length
/// `gol_model_feature_dim`.
#[no_mangle]
pub unsafe extern "C" fn gol_model_predict(
    model: *const GolModel,
    features: *const f64,
    len: usize,
    out_class: *mut usize,
) -> GolStatus {
    guarded(|| {
        if model.is_null() || features.is_null() || out_class.is_null() {
            return fail(GolStatusNullPointer, "model, features, and out_class are required");
        }
        let model = unsafe { &(*model).model };
        if len != model.feature_dim {
            return fail(
                GolStatusInvalidArgument,
                &format!("expected {} features, got {len}", model.feature_dim),
            );
        }
        let features = unsafe { slice::from_raw_parts(features, len) };
        unsafe { *out_class = model.predict(features) };
        GolStatusOk
    })
}

/// Serializes the handle's run report as JSON. The string must be released
/// with `gol_string_free`.
#[no_mangle]
pub unsafe extern "C" fn gol_model_report_json(
    model: *const GolModel,
    out: *mut *mut c_char,
) -> GolStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(GolStatusNullPointer, "model and out are required");
        }
        let report = unsafe { &(*model).report };
        let json = match serde_json::to_string(report) {
            Ok(json) => json,
            Err(e) => return fail(GolStatusInternal, &format!("serializing report: {e}")),
        };
        match CString::new(json) {
            Ok(cstring) => {
                unsafe { *out = cstring.into_raw() };
                GolStatusOk
            }
            Err(_) => fail(GolStatusInternal, "report contained a NUL byte"),
        }
    })
}

/// Releases a handle returned by `gol_train_json`. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn gol_model_free(model: *mut GolModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Releases a string returned by `gol_model_report_json`. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn gol_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let len = gol_last_error_length();
        let mut buf = vec![0i8; len + 1];
        let status = unsafe { gol_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
        assert_eq!(status, GolStatusOk);
        let bytes: Vec<u8> = buf[..len].iter().map(|&b| b as u8).collect();
        String::from_utf8(bytes).unwrap()
    }

    const CONFIG: &str = r#"{
        "loss": "gumbel",
        "epochs": 2,
        "batch_size": 32,
        "lr": 0.01,
        "seed": 7,
        "data": {
            "class_count": 5,
            "imbalance_factor": 5.0,
            "head_size": 20,
            "feature_dim": 3,
            "seed": 7
        }
    }"#;

    #[test]
    fn cdf_matches_core() {
        let mut out = 0.0;
        let status = unsafe { gol_gumbel_cdf(0.0, 1.0, &mut out) };
        assert_eq!(status, GolStatusOk);
        assert_eq!(out, gumbel_cdf(0.0, Temperature::STANDARD));
    }

    #[test]
    fn cdf_rejects_bad_temperature_and_null() {
        let mut out = 0.0;
        assert_eq!(unsafe { gol_gumbel_cdf(0.0, 0.0, &mut out) }, GolStatusInvalidArgument);
        assert!(last_error().contains("temperature"));
        assert_eq!(unsafe { gol_gumbel_cdf(0.0, 1.0, ptr::null_mut()) }, GolStatusNullPointer);
    }

    #[test]
    fn solve_bias_roundtrip() {
        let mut bias = 0.0;
        assert_eq!(unsafe { gol_solve_bias(1204, &mut bias) }, GolStatusOk);
        assert!((-1.97..=-1.95).contains(&bias));
        let mut total = 1.0;
        assert_eq!(
            unsafe { gol_initial_total_gradient(1204, bias, &mut total) },
            GolStatusOk
        );
        assert!(total.abs() < 1e-9);
        assert_eq!(unsafe { gol_solve_bias(1, &mut bias) }, GolStatusInvalidArgument);
    }

    #[test]
    fn gumbel_loss_writes_total_and_grad() {
        let scores = [0.5, -1.0, 2.0];
        let targets = [1u8, 0, 0];
        let mut total = 0.0;
        let mut grad = [0.0; 3];
        let status = unsafe {
            gol_gumbel_loss(
                scores.as_ptr(),
                targets.as_ptr(),
                3,
                1.0,
                &mut total,
                grad.as_mut_ptr(),
            )
        };
        assert_eq!(status, GolStatusOk);

        let q = ScoreVector::new(scores.to_vec()).unwrap();
        let y = TargetVector::new(vec![true, false, false]);
        let expected = gumbel_loss_tempered(&q, &y, Temperature::STANDARD).unwrap();
        assert_eq!(total, expected.total);
        assert_eq!(grad.to_vec(), expected.grad);
    }

    #[test]
    fn gumbel_loss_rejects_non_finite_scores() {
        let scores = [f64::NAN];
        let targets = [1u8];
        let mut total = 0.0;
        let status = unsafe {
            gol_gumbel_loss(
                scores.as_ptr(),
                targets.as_ptr(),
                1,
                1.0,
                &mut total,
                ptr::null_mut(),
            )
        };
        assert_eq!(status, GolStatusNumeric);
    }

    #[test]
    fn train_predict_report_free_roundtrip() {
        let config = CString::new(CONFIG).unwrap();
        let mut handle: *mut GolModel = ptr::null_mut();
        let status = unsafe { gol_train_json(config.as_ptr(), &mut handle) };
        assert_eq!(status, GolStatusOk, "{}", last_error());
        assert!(!handle.is_null());

        let mut dim = 0;
        assert_eq!(unsafe { gol_model_feature_dim(handle, &mut dim) }, GolStatusOk);
        assert_eq!(dim, 3);
        let mut classes = 0;
        assert_eq!(unsafe { gol_model_class_count(handle, &mut classes) }, GolStatusOk);
        assert_eq!(classes, 5);

        let features = [0.1, -0.2, 0.3];
        let mut class = usize::MAX;
        let status =
            unsafe { gol_model_predict(handle, features.as_ptr(), 3, &mut class) };
        assert_eq!(status, GolStatusOk);
        assert!(class < 5);

        let wrong = [0.0; 2];
        let status = unsafe { gol_model_predict(handle, wrong.as_ptr(), 2, &mut class) };
        assert_eq!(status, GolStatusInvalidArgument);
        assert!(last_error().contains("expected 3 features"));

        let mut json: *mut c_char = ptr::null_mut();
        assert_eq!(unsafe { gol_model_report_json(handle, &mut json) }, GolStatusOk);
        let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
        let report: RunReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report.epochs_run, 2);
        unsafe { gol_string_free(json) };

        unsafe { gol_model_free(handle) };
        unsafe { gol_model_free(ptr::null_mut()) };
        unsafe { gol_string_free(ptr::null_mut()) };
    }

    #[test]
    fn train_rejects_bad_config_with_message() {
        let config = CString::new("{\"loss\": \"gumbel\"}").unwrap();
        let mut handle: *mut GolModel = ptr::null_mut();
        let status = unsafe { gol_train_json(config.as_ptr(), &mut handle) };
        assert_eq!(status, GolStatusParse);
        assert!(handle.is_null());
        assert!(last_error().contains("config"));

        let status = unsafe { gol_train_json(ptr::null(), &mut handle) };
        assert_eq!(status, GolStatusNullPointer);
    }

    #[test]
    fn error_message_truncates_to_capacity() {
        set_error("0123456789");
        assert_eq!(gol_last_error_length(), 10);
        let mut buf = [1i8; 4];
        let status = unsafe { gol_last_error_message(buf.as_mut_ptr().cast(), 4) };
        assert_eq!(status, GolStatusOk);
        assert_eq!(buf[3], 0);
        let bytes: Vec<u8> = buf[..3].iter().map(|&b| b as u8).collect();
        assert_eq!(bytes, b"012");
    }
}
