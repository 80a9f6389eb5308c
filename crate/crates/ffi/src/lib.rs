//! C ABI for the Markov property test.
//!
//! Conventions: every function returns an `MktStatus`; results come back
//! through out-pointers. Series are opaque handles freed with
//! `mkt_series_free`; report strings are JSON freed with `mkt_string_free`.
//! On failure, `mkt_last_error_message` returns a thread-local description
//! of the most recent error.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use markovtest::engine::{estimate_order, run_test, TestConfig};
use markovtest::error::Error;
use markovtest::mat::Mat;
use markovtest::series::TimeSeries;

/// Opaque time series handle.
pub struct MktSeries {
    inner: TimeSeries,
}

/// Status codes returned by every API function.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MktStatus {
    /// Success.
    MktOk = 0,
    /// A pointer argument was null.
    MktNullPointer = 1,
    /// Invalid input or configuration.
    MktInvalidArgument = 2,
    /// The computation failed at runtime.
    MktRuntimeError = 3,
    /// A string argument was not valid UTF-8.
    MktInvalidUtf8 = 4,
    /// An internal panic was caught at the boundary.
    MktPanic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).expect("NUL bytes removed");
    });
}

fn status_for(err: &Error) -> MktStatus {
    match err {
        Error::Input(_) | Error::Config(_) | Error::Csv(_) => MktStatus::MktInvalidArgument,
        _ => MktStatus::MktRuntimeError,
    }
}

fn fail(err: Error) -> MktStatus {
    set_error(&err.to_string());
    status_for(&err)
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn mkt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn guarded<F: FnOnce() -> MktStatus>(f: F) -> MktStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            MktStatus::MktPanic
        }
    }
}

unsafe fn parse_cstr<'a>(ptr: *const c_char) -> Result<&'a str, MktStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(MktStatus::MktNullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        MktStatus::MktInvalidUtf8
    })
}

/// Build a series from a row-major `rows` x `cols` array of doubles.
///
/// # Safety
/// `data` must point to `rows * cols` doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mkt_series_new(
    data: *const f64,
    rows: usize,
    cols: usize,
    out: *mut *mut MktSeries,
) -> MktStatus {
    guarded(|| {
        if data.is_null() || out.is_null() {
            set_error("null pointer argument");
            return MktStatus::MktNullPointer;
        }
        let slice = std::slice::from_raw_parts(data, rows.saturating_mul(cols));
        match TimeSeries::new(Mat::from_vec(rows, cols, slice.to_vec())) {
            Ok(series) => {
                *out = Box::into_raw(Box::new(MktSeries { inner: series }));
                MktStatus::MktOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Load a series from a CSV file (optional header, one row per time point).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mkt_series_from_csv(
    path: *const c_char,
    out: *mut *mut MktSeries,
) -> MktStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return MktStatus::MktNullPointer;
        }
        let path = match parse_cstr(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match TimeSeries::from_csv_path(std::path::Path::new(path)) {
            Ok(series) => {
                *out = Box::into_raw(Box::new(MktSeries { inner: series }));
                MktStatus::MktOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of time points in the series.
///
/// # Safety
/// `series` must be a live handle from this library; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mkt_series_len(series: *const MktSeries, out: *mut usize) -> MktStatus {
    guarded(|| {
        if series.is_null() || out.is_null() {
            set_error("null pointer argument");
            return MktStatus::MktNullPointer;
        }
        *out = (*series).inner.len();
        MktStatus::MktOk
    })
}

/// Free a series handle. Null is a no-op.
///
/// # Safety
/// `series` must be a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn mkt_series_free(series: *mut MktSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// Free a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn mkt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn config_from_json(config_json: *const c_char) -> Result<TestConfig, MktStatus> {
    if config_json.is_null() {
        return Ok(TestConfig::default());
    }
    let text = parse_cstr(config_json)?;
    serde_json::from_str(text).map_err(|e| {
        set_error(&format!("invalid config JSON: {e}"));
        MktStatus::MktInvalidArgument
    })
}

fn emit_json<T: serde::Serialize>(value: &T, out: *mut *mut c_char) -> MktStatus {
    let text = serde_json::to_string(value).expect("report serializes");
    let cstring = CString::new(text).expect("JSON has no NUL bytes");
    unsafe {
        *out = cstring.into_raw();
    }
    MktStatus::MktOk
}

/// Run the order-k Markov property test. `config_json` may be null (defaults)
/// or a JSON object with any subset of the configuration fields. On success,
/// `*out_json` holds the test report as JSON.
///
/// # Safety
/// `series` must be a live handle; `out_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mkt_run_test(
    series: *const MktSeries,
    k: usize,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> MktStatus {
    guarded(|| {
        if series.is_null() || out_json.is_null() {
            set_error("null pointer argument");
            return MktStatus::MktNullPointer;
        }
        let config = match config_from_json(config_json) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match run_test(&(*series).inner, k, &config) {
            Ok(report) => emit_json(&report, out_json),
            Err(e) => fail(e),
        }
    })
}

/// Sequentially test k = 1..k_max and report the estimated Markov order.
/// Same conventions as `mkt_run_test`.
///
/// # Safety
/// `series` must be a live handle; `out_json` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mkt_estimate_order(
    series: *const MktSeries,
    k_max: usize,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> MktStatus {
    guarded(|| {
        if series.is_null() || out_json.is_null() {
            set_error("null pointer argument");
            return MktStatus::MktNullPointer;
        }
        let config = match config_from_json(config_json) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match estimate_order(&(*series).inner, &config, k_max) {
            Ok(report) => emit_json(&report, out_json),
            Err(e) => fail(e),
        }
    })
}
