//! C ABI over `cetc-core`.
//!
//! Every fallible function returns a [`CetcStatus`]; on failure the message is
//! available from [`cetc_last_error`] on the same thread. Models are opaque
//! [`CetcModel`] handles created by `cetc_model_new*` and released with
//! [`cetc_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cetc_core::checkpoint;
use cetc_core::experiment::coefficient_groups;
use cetc_core::metrics::ConfusionMatrix;
use cetc_core::{Cetc, EnsembleCoefficients, Error, ModelConfig, ParamStore, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CetcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Checkpoint = 5,
    Io = 6,
    NonFinite = 7,
    Data = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for CetcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => CetcStatus::Shape,
            Error::InvalidArgument(_) | Error::EmptyTape => CetcStatus::InvalidArgument,
            Error::Config(_) => CetcStatus::Config,
            Error::Checkpoint(_) | Error::Json(_) => CetcStatus::Checkpoint,
            Error::Io(_) => CetcStatus::Io,
            Error::NonFinite { .. } => CetcStatus::NonFinite,
            Error::Data(_) | Error::Image { .. } => CetcStatus::Data,
        }
    }
}

/// A model architecture together with its parameters.
pub struct CetcModel {
    model: Cetc,
    params: ParamStore,
}

/// Metric values in the order ACC, NPV, PPV, SEN, SPE, FOS as fractions;
/// `defined[i]` is 0 when the metric's denominator is zero (its value is then NaN).
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CetcMetrics {
    pub values: [f64; 6],
    pub defined: [u8; 6],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

enum Failure {
    Status(CetcStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn fail(status: CetcStatus, msg: impl Into<String>) -> Failure {
    Failure::Status(status, msg.into())
}

/// Runs `f`, translating errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CetcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CetcStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            CetcStatus::from(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_last_error(msg);
            s
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CetcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(CetcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(CetcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn model_ref<'a>(p: *const CetcModel) -> Result<&'a CetcModel, Failure> {
    p.as_ref().ok_or_else(|| fail(CetcStatus::NullPointer, "model handle is null"))
}

fn preset(name: &str) -> Option<ModelConfig> {
    match name {
        "desk" => Some(ModelConfig::desk()),
        "full" => Some(ModelConfig::full()),
        "tiny" => Some(ModelConfig::tiny()),
        "micro" => Some(ModelConfig::micro()),
        _ => None,
    }
}

unsafe fn publish(model: Cetc, seed: u64, out: *mut *mut CetcModel) -> Result<(), Failure> {
    let params = model.init_params(seed)?;
    *out = Box::into_raw(Box::new(CetcModel { model, params }));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cetc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cetc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Create a model from a named preset ("desk", "full", "tiny" or "micro")
/// with parameters initialized from `seed`.
///
/// # Safety
/// `preset_name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cetc_model_new(preset_name: *const c_char, seed: u64, out: *mut *mut CetcModel) -> CetcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CetcStatus::NullPointer, "out is null"));
        }
        let name = str_arg(preset_name, "preset_name")?;
        let cfg = preset(name).ok_or_else(|| fail(CetcStatus::InvalidArgument, format!("unknown preset `{name}`")))?;
        publish(Cetc::new(cfg)?, seed, out)
    })
}

/// Create a model from a JSON model configuration.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cetc_model_new_from_json(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut CetcModel,
) -> CetcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CetcStatus::NullPointer, "out is null"));
        }
        let text = str_arg(config_json, "config_json")?;
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| fail(CetcStatus::Config, format!("model config: {e}")))?;
        publish(Cetc::new(cfg)?, seed, out)
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from `cetc_model_new*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cetc_model_free(model: *mut CetcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square input images the model expects; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cetc_model_image_size(model: *const CetcModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.image_size)
}

/// Total number of scalar parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cetc_model_num_params(model: *const CetcModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_scalars())
}

/// Replace the model's parameters with those stored in a checkpoint file.
/// Every model tensor must be present with a matching shape.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cetc_model_load_checkpoint(model: *mut CetcModel, path: *const c_char) -> CetcStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| fail(CetcStatus::NullPointer, "model handle is null"))?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let ckpt = checkpoint::load(&path)?;
        let mut params = m.params.clone();
        let copied = params.load_from(&ckpt.params)?;
        if copied != params.len() {
            return Err(fail(
                CetcStatus::Checkpoint,
                format!("checkpoint holds {copied} of the model's {} tensors", params.len()),
            ));
        }
        m.params = params;
        Ok(())
    })
}

/// Write the model's parameters to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cetc_model_save_checkpoint(model: *const CetcModel, path: *const c_char) -> CetcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let mut meta = serde_json::Map::new();
        meta.insert(
            "model_config".into(),
            serde_json::to_value(&m.model.config).map_err(Error::from)?,
        );
        checkpoint::save(&path, &m.params, &meta)?;
        Ok(())
    })
}

/// Class logits for a batch of preprocessed images.
///
/// `input` holds `batch * 3 * S * S` values in (batch, channel, row, column)
/// order, where S is [`cetc_model_image_size`]. `coeffs` points to the three
/// ensemble coefficients (alpha, beta, gamma), which must lie in [0, 1] and sum
/// to 1. `logits_out` receives `batch * 2` values.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cetc_model_predict(
    model: *const CetcModel,
    input: *const f64,
    input_len: usize,
    batch: usize,
    coeffs: *const f64,
    logits_out: *mut f64,
    logits_len: usize,
) -> CetcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if input.is_null() || coeffs.is_null() || logits_out.is_null() {
            return Err(fail(CetcStatus::NullPointer, "input, coeffs and logits_out must be non-null"));
        }
        let cfg = &m.model.config;
        let s = cfg.image_size;
        let expected = batch * cfg.in_channels * s * s;
        if batch == 0 || input_len != expected {
            return Err(fail(
                CetcStatus::Shape,
                format!("expected {expected} input values for batch {batch}, got {input_len}"),
            ));
        }
        let classes = cfg.transformer.num_classes;
        if logits_len < batch * classes {
            return Err(fail(
                CetcStatus::BufferTooSmall,
                format!("logits_out holds {logits_len} values, need {}", batch * classes),
            ));
        }
        let c = std::slice::from_raw_parts(coeffs, 3);
        let coeffs = EnsembleCoefficients::new(c[0], c[1], c[2])?;
        let x = Tensor::new(
            &[batch, cfg.in_channels, s, s],
            std::slice::from_raw_parts(input, input_len).to_vec(),
        )?;
        let logits = m.model.predict(&m.params, &x, &coeffs)?;
        std::slice::from_raw_parts_mut(logits_out, logits.numel()).copy_from_slice(logits.data());
        Ok(())
    })
}

/// The six metrics for a confusion matrix.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cetc_compute_metrics(tp: u64, fp: u64, tn: u64, fn_: u64, out: *mut CetcMetrics) -> CetcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| fail(CetcStatus::NullPointer, "out is null"))?;
        if tp + fp + tn + fn_ == 0 {
            return Err(fail(CetcStatus::InvalidArgument, "confusion matrix is empty"));
        }
        let values = ConfusionMatrix::new(tp, fp, tn, fn_).report().values();
        *out = CetcMetrics {
            values: values.map(|v| v.unwrap_or(f64::NAN)),
            defined: values.map(|v| u8::from(v.is_some())),
        };
        Ok(())
    })
}

/// Copy the seven coefficient groups as 21 values (alpha, beta, gamma per group).
///
/// # Safety
/// `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn cetc_coefficient_groups(out: *mut f64, len: usize) -> CetcStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(CetcStatus::NullPointer, "out is null"));
        }
        if len < 21 {
            return Err(fail(CetcStatus::BufferTooSmall, format!("need 21 values, got {len}")));
        }
        let dst = std::slice::from_raw_parts_mut(out, 21);
        for (chunk, g) in dst.chunks_mut(3).zip(coefficient_groups()) {
            chunk.copy_from_slice(&g.as_array());
        }
        Ok(())
    })
}
