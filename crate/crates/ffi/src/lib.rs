//! C ABI over the `moelab` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`MoelabStatus`]; on failure the message is kept per thread and
//! read back with [`moelab_last_error`]. Panics never unwind into C: they are
//! caught and reported as `MOELAB_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use moelab::error::Error;
use moelab::eval::{count_params, disable_top1_eval};
use moelab::io::{load_checkpoint, save_checkpoint, tokenizer};
use moelab::model::{Model, ModelConfig};

/// Result of every fallible call. Values 1 to 4 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoelabStatus {
    Ok = 0,
    Usage = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    NullPointer = 5,
    InvalidUtf8 = 6,
    Panic = 7,
}

/// Opaque model configuration.
pub struct MoelabConfig {
    inner: ModelConfig,
}

/// Opaque f32 model.
pub struct MoelabModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> MoelabStatus {
    match err.exit_code() {
        1 => MoelabStatus::Usage,
        2 => MoelabStatus::Config,
        3 => MoelabStatus::Numeric,
        _ => MoelabStatus::Io,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MoelabStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MoelabStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Fail::Null(arg))) => {
            set_error(format!("null pointer passed for `{arg}`"));
            MoelabStatus::NullPointer
        }
        Ok(Err(Fail::Utf8(arg))) => {
            set_error(format!("`{arg}` is not valid UTF-8"));
            MoelabStatus::InvalidUtf8
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MoelabStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn str_arg<'a>(ptr: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| Fail::Utf8(name))
}

/// # Safety
/// `ptr` must be null or valid for reads of `T`.
unsafe fn ref_arg<'a, T>(ptr: *const T, name: &'static str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or(Fail::Null(name))
}

/// # Safety
/// `ptr` must be null or valid for writes of `T`.
unsafe fn write_out<T>(ptr: *mut T, name: &'static str, value: T) -> Result<(), Fail> {
    if ptr.is_null() {
        return Err(Fail::Null(name));
    }
    ptr.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or null if it succeeded.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn moelab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moelab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Looks up a named preset and stores a new handle in `*out`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_config_preset(name: *const c_char, out: *mut *mut MoelabConfig) -> MoelabStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let inner = ModelConfig::preset(name)?;
        write_out(out, "out", Box::into_raw(Box::new(MoelabConfig { inner })))
    })
}

/// Parses `key = value` model configuration text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_config_parse(text: *const c_char, out: *mut *mut MoelabConfig) -> MoelabStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let inner = moelab::io::config_file::parse_model(text)?;
        write_out(out, "out", Box::into_raw(Box::new(MoelabConfig { inner })))
    })
}

/// Overrides the initialization seed.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn moelab_config_set_seed(config: *mut MoelabConfig, seed: u64) -> MoelabStatus {
    guard(|| {
        let c = config.as_mut().ok_or(Fail::Null("config"))?;
        c.inner.seed = seed;
        Ok(())
    })
}

/// Total and activated parameter counts of a configuration.
///
/// # Safety
/// `config` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_config_param_counts(
    config: *const MoelabConfig,
    total: *mut u64,
    activated: *mut u64,
) -> MoelabStatus {
    guard(|| {
        let c = ref_arg(config, "config")?;
        c.inner.validate()?;
        let report = count_params(&c.inner);
        write_out(total, "total", report.total_params)?;
        write_out(activated, "activated", report.activated_params)
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moelab_config_free(config: *mut MoelabConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Initializes a model from a configuration.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_new(config: *const MoelabConfig, out: *mut *mut MoelabModel) -> MoelabStatus {
    guard(|| {
        let c = ref_arg(config, "config")?;
        let inner = Model::new(&c.inner)?;
        write_out(out, "out", Box::into_raw(Box::new(MoelabModel { inner })))
    })
}

/// Loads the model weights of a checkpoint; optimizer state is discarded.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_load(path: *const c_char, out: *mut *mut MoelabModel) -> MoelabStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let inner = load_checkpoint(Path::new(path))?.model;
        write_out(out, "out", Box::into_raw(Box::new(MoelabModel { inner })))
    })
}

/// Writes the model weights as a checkpoint without optimizer state.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_save(model: *const MoelabModel, path: *const c_char) -> MoelabStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        save_checkpoint(Path::new(path), &m.inner, None)?;
        Ok(())
    })
}

/// Number of scalar parameters held by the model.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_numel(model: *const MoelabModel, out: *mut u64) -> MoelabStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        write_out(out, "out", m.inner.params.numel() as u64)
    })
}

/// Byte-level perplexity of `text` (an end-of-text token is appended),
/// scored in windows of `window` tokens.
///
/// # Safety
/// `model` must be a live handle; `text` a NUL-terminated string; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_perplexity(
    model: *const MoelabModel,
    text: *const c_char,
    window: usize,
    out: *mut f64,
) -> MoelabStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let stream = tokenizer::tokenize(str_arg(text, "text")?);
        let ppl = m.inner.perplexity(&stream, window)?;
        write_out(out, "out", ppl)
    })
}

/// Perplexity with and without each token's top-1 expert.
///
/// # Safety
/// `model` must be a live handle; `text` a NUL-terminated string; outputs
/// writable.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_disable_top1(
    model: *const MoelabModel,
    text: *const c_char,
    window: usize,
    seed: u64,
    ppl_normal: *mut f64,
    ppl_masked: *mut f64,
) -> MoelabStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let stream = tokenizer::tokenize(str_arg(text, "text")?);
        let report = disable_top1_eval(&m.inner, &stream, window, seed)?;
        write_out(ppl_normal, "ppl_normal", report.ppl_normal)?;
        write_out(ppl_masked, "ppl_masked", report.ppl_masked)
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moelab_model_free(model: *mut MoelabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
