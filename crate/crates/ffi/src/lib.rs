//! C ABI for the sparsification engine.
//!
//! The surface is deliberately narrow: build an engine from a JSON run
//! config (or a named preset), execute it, and get the JSON report back as a
//! heap string. Handles are opaque; every call returns a status code and the
//! last error detail is retrievable per thread via [`stk_last_error`].
//!
//! Ownership rules: engines from `stk_engine_new` / `stk_engine_new_preset`
//! are released with `stk_engine_free`; strings returned through out-pointers
//! are released with `stk_string_free`. The generated header lives at
//! `include/sparsetok.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sparsetok::harness::config::RunConfig;
use sparsetok::harness::{load_preset, run, HarnessError};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StkStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    RuntimeError = 4,
    Panic = 5,
}

/// Opaque engine handle: a validated run configuration ready to execute.
pub struct StkEngine {
    config: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes removed");
    });
}

fn harness_status(err: &HarnessError) -> StkStatus {
    match err.exit_code() {
        1 => StkStatus::ConfigError,
        _ => StkStatus::RuntimeError,
    }
}

fn guarded<F: FnOnce() -> StkStatus>(f: F) -> StkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("panic crossed the FFI boundary");
            StkStatus::Panic
        }
    }
}

/// Version of the underlying engine, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stk_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Copy the last error message for this thread into `buf` (NUL-terminated,
/// truncated to `len` bytes). Returns the full length including the NUL, so
/// callers can size a retry; zero means no error has been recorded.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (to query the size).
#[no_mangle]
pub unsafe extern "C" fn stk_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes_with_nul();
        if bytes.len() <= 1 {
            return 0;
        }
        if !buf.is_null() && len > 0 {
            let n = len.min(bytes.len());
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

unsafe fn parse_c_str<'a>(ptr: *const c_char) -> Result<&'a str, StkStatus> {
    if ptr.is_null() {
        set_last_error("null pointer argument");
        return Err(StkStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("argument is not valid UTF-8");
        StkStatus::InvalidUtf8
    })
}

fn engine_from_config(config: Result<RunConfig, String>, out: *mut *mut StkEngine) -> StkStatus {
    match config {
        Ok(config) => {
            let engine = Box::new(StkEngine { config });
            unsafe { *out = Box::into_raw(engine) };
            StkStatus::Ok
        }
        Err(message) => {
            set_last_error(&message);
            StkStatus::ConfigError
        }
    }
}

/// Build an engine from a JSON run config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out_engine` a valid
/// pointer; on `STK_STATUS_OK` the caller owns the engine.
#[no_mangle]
pub unsafe extern "C" fn stk_engine_new(
    config_json: *const c_char,
    out_engine: *mut *mut StkEngine,
) -> StkStatus {
    guarded(|| {
        if out_engine.is_null() {
            set_last_error("null out_engine");
            return StkStatus::NullArgument;
        }
        let text = match parse_c_str(config_json) {
            Ok(text) => text,
            Err(status) => return status,
        };
        let config = sparsetok::harness::parse_config(text, std::path::Path::new("<ffi>"))
            .map_err(|e| e.to_string());
        engine_from_config(config, out_engine)
    })
}

/// Build an engine from a named preset (`retain192`, `retain128`,
/// `retain64`).
///
/// # Safety
/// Same contract as [`stk_engine_new`].
#[no_mangle]
pub unsafe extern "C" fn stk_engine_new_preset(
    name: *const c_char,
    out_engine: *mut *mut StkEngine,
) -> StkStatus {
    guarded(|| {
        if out_engine.is_null() {
            set_last_error("null out_engine");
            return StkStatus::NullArgument;
        }
        let name = match parse_c_str(name) {
            Ok(name) => name,
            Err(status) => return status,
        };
        engine_from_config(load_preset(name).map_err(|e| e.to_string()), out_engine)
    })
}

/// Execute the engine's configured run and hand back the JSON report.
///
/// # Safety
/// `engine` must come from a constructor and not have been freed;
/// `out_report_json` must be valid. On `STK_STATUS_OK` the caller owns the
/// string and releases it with [`stk_string_free`].
#[no_mangle]
pub unsafe extern "C" fn stk_engine_run_json(
    engine: *mut StkEngine,
    out_report_json: *mut *mut c_char,
) -> StkStatus {
    guarded(|| {
        if engine.is_null() || out_report_json.is_null() {
            set_last_error("null engine or out pointer");
            return StkStatus::NullArgument;
        }
        let engine = &*engine;
        match run(&engine.config) {
            Ok(report) => {
                let json = report.to_json();
                let cstring = CString::new(json).expect("report JSON has no NUL bytes");
                *out_report_json = cstring.into_raw();
                StkStatus::Ok
            }
            Err(err) => {
                let status = harness_status(&err);
                set_last_error(&err.to_string());
                status
            }
        }
    })
}

/// Release an engine.
///
/// # Safety
/// `engine` must be null or a pointer returned by a constructor, not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn stk_engine_free(engine: *mut StkEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer produced by this library's out-parameters,
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn last_error_string() -> String {
        let needed = unsafe { stk_last_error(ptr::null_mut(), 0) };
        if needed == 0 {
            return String::new();
        }
        let mut buf = vec![0u8; needed];
        unsafe { stk_last_error(buf.as_mut_ptr() as *mut c_char, buf.len()) };
        String::from_utf8_lossy(&buf[..needed - 1]).into_owned()
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(stk_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn engine_runs_small_config() {
        let config = CString::new(
            r#"{"seed": 2,
                "model": {"num_layers": 2, "num_heads": 2, "hidden_dim": 16, "ffn_dim": 16, "vocab_size": 50, "seed": 2},
                "workload": {"synthetic": {"num_sequences": 1, "l_v": 8, "pre_text_len": 1, "question_len": 3}}}"#,
        )
        .unwrap();
        let mut engine: *mut StkEngine = ptr::null_mut();
        let status = unsafe { stk_engine_new(config.as_ptr(), &mut engine) };
        assert_eq!(status, StkStatus::Ok);
        assert!(!engine.is_null());

        let mut report: *mut c_char = ptr::null_mut();
        let status = unsafe { stk_engine_run_json(engine, &mut report) };
        assert_eq!(status, StkStatus::Ok, "error: {}", last_error_string());
        let text = unsafe { CStr::from_ptr(report) }
            .to_str()
            .unwrap()
            .to_owned();
        let parsed: sparsetok::harness::RunReport = serde_json_parse(&text);
        assert_eq!(parsed.aggregate.num_sequences, 1);

        unsafe {
            stk_string_free(report);
            stk_engine_free(engine);
        }
    }

    fn serde_json_parse(text: &str) -> sparsetok::harness::RunReport {
        sparsetok::harness::RunReport::from_json(text).unwrap()
    }

    #[test]
    fn bad_json_reports_config_error() {
        let config = CString::new(r#"{"sparsify": {"tau": 7.0}}"#).unwrap();
        let mut engine: *mut StkEngine = ptr::null_mut();
        let status = unsafe { stk_engine_new(config.as_ptr(), &mut engine) };
        assert_eq!(status, StkStatus::ConfigError);
        assert!(engine.is_null());
        assert!(last_error_string().contains("tau out of [0,1]"));
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut engine: *mut StkEngine = ptr::null_mut();
        assert_eq!(
            unsafe { stk_engine_new(ptr::null(), &mut engine) },
            StkStatus::NullArgument
        );
        let config = CString::new("{}").unwrap();
        assert_eq!(
            unsafe { stk_engine_new(config.as_ptr(), ptr::null_mut()) },
            StkStatus::NullArgument
        );
        assert_eq!(
            unsafe { stk_engine_run_json(ptr::null_mut(), ptr::null_mut()) },
            StkStatus::NullArgument
        );
    }

    #[test]
    fn preset_constructor_names_unknown_presets() {
        let name = CString::new("retain9000").unwrap();
        let mut engine: *mut StkEngine = ptr::null_mut();
        let status = unsafe { stk_engine_new_preset(name.as_ptr(), &mut engine) };
        assert_eq!(status, StkStatus::ConfigError);
        assert!(last_error_string().contains("retain192"));
    }

    #[test]
    fn last_error_truncates_into_small_buffers() {
        let config = CString::new(r#"{"mystery": 1}"#).unwrap();
        let mut engine: *mut StkEngine = ptr::null_mut();
        unsafe { stk_engine_new(config.as_ptr(), &mut engine) };
        let mut buf = [0i8; 8];
        let needed = unsafe { stk_last_error(buf.as_mut_ptr(), buf.len()) };
        assert!(needed > 8);
        assert_eq!(buf[7], 0);
    }
}
