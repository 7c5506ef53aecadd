//! C ABI over `edp-core`: opaque model and ensemble handles, status codes,
//! and a per-thread last-error message.
//!
//! Every fallible function returns an [`EdpStatus`]. On failure the message is
//! available from [`edp_last_error`] on the same thread until the next call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use edp_core::cli::ExitKind;
use edp_core::federation::EnsembleModel;
use edp_core::io::{decode_model, encode_model, save_model, ModelFile};
use edp_core::nn::{reference_image, Model};
use edp_core::privacy::{compute_epsilon, default_orders, rdp_step};

/// Result of every fallible call. Shared kinds use the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdpStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 path or buffer of the wrong length.
    InvalidArgument = 1,
    Io = 4,
    Format = 5,
    Contract = 6,
    Numeric = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

/// A full model or a backbone, with its privacy record when it has one.
pub struct EdpModel {
    file: ModelFile,
}

/// Averaged-feature ensemble of backbones under a shared head.
pub struct EdpEnsemble {
    inner: EnsembleModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(EdpStatus, String);

impl From<edp_core::Error> for Failure {
    fn from(e: edp_core::Error) -> Self {
        let status = match ExitKind::of(&e) {
            ExitKind::Io => EdpStatus::Io,
            ExitKind::Format => EdpStatus::Format,
            ExitKind::Numeric => EdpStatus::Numeric,
            ExitKind::Usage | ExitKind::Config | ExitKind::Contract => EdpStatus::Contract,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(EdpStatus::InvalidArgument, msg.into())
}

/// Run `f`, translating errors and panics into a status and last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EdpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdpStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            set_error(format!("panic: {}", msg.unwrap_or_default()));
            EdpStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return Err(invalid("path is null"));
    }
    let s = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if ptr.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    unsafe { ptr.as_mut() }.ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    unsafe { ptr.as_ref() }.ok_or_else(|| invalid(format!("{what} is null")))
}

fn write_output(values: &[f64], out: *mut f64, out_len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output buffer is null"));
    }
    if out_len != values.len() {
        return Err(invalid(format!("output buffer holds {out_len} values, model emits {}", values.len())));
    }
    unsafe { std::slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(values);
    Ok(())
}

fn boxed<T>(value: T, out: *mut *mut T) -> Result<(), Failure> {
    let out = unsafe { out_arg(out, "output handle") }?;
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn edp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Build the reference CNN for `height`×`width` grayscale images with
/// `classes` outputs and Glorot-initialized weights from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to writable handle storage.
#[no_mangle]
pub unsafe extern "C" fn edp_model_reference(
    height: usize,
    width: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut EdpModel,
) -> EdpStatus {
    guard(|| {
        let (specs, shape) = reference_image(height, width, classes);
        let model = Model::build(&specs, &shape, seed)?;
        boxed(EdpModel { file: ModelFile { model, is_backbone: false, provenance: None } }, out)
    })
}

/// Load a model file (full model or backbone) from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn edp_model_load(path: *const c_char, out: *mut *mut EdpModel) -> EdpStatus {
    guard(|| {
        let path = unsafe { path_arg(path) }?;
        let file = edp_core::io::load_model(path)?;
        boxed(EdpModel { file }, out)
    })
}

/// Decode a model from `len` bytes at `bytes`.
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn edp_model_from_bytes(bytes: *const u8, len: usize, out: *mut *mut EdpModel) -> EdpStatus {
    guard(|| {
        let bytes = unsafe { slice_arg(bytes, len, "bytes") }?;
        boxed(EdpModel { file: decode_model(bytes)? }, out)
    })
}

/// Write `model` to `path`.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn edp_model_save(model: *const EdpModel, path: *const c_char) -> EdpStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let path = unsafe { path_arg(path) }?;
        save_model(&m.file.model, m.file.is_backbone, m.file.provenance.as_ref(), path)?;
        Ok(())
    })
}

/// Encoded size of `model` in bytes, for sizing a buffer for
/// [`edp_model_to_bytes`].
///
/// # Safety
/// `model` must be a live handle and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn edp_model_encoded_len(model: *const EdpModel, out_len: *mut usize) -> EdpStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let bytes = encode_model(&m.file.model, m.file.is_backbone, m.file.provenance.as_ref())?;
        *unsafe { out_arg(out_len, "out_len") }? = bytes.len();
        Ok(())
    })
}

/// Encode `model` into `buf`, which must hold exactly the encoded length.
///
/// # Safety
/// `model` must be a live handle; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn edp_model_to_bytes(model: *const EdpModel, buf: *mut u8, len: usize) -> EdpStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let bytes = encode_model(&m.file.model, m.file.is_backbone, m.file.provenance.as_ref())?;
        if buf.is_null() || len != bytes.len() {
            return Err(invalid(format!("buffer holds {len} bytes, encoding needs {}", bytes.len())));
        }
        unsafe { std::slice::from_raw_parts_mut(buf, len) }.copy_from_slice(&bytes);
        Ok(())
    })
}

/// Number of input values (height × width × channels), or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn edp_model_input_len(model: *const EdpModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.file.model.input_shape().iter().product())
}

/// Number of output values, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn edp_model_output_len(model: *const EdpModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.file.model.output_shape().iter().product())
}

/// Number of trainable scalars, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn edp_model_param_count(model: *const EdpModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.file.model.param_count())
}

/// 1 if `model` is a backbone (no head), 0 otherwise.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn edp_model_is_backbone(model: *const EdpModel) -> i32 {
    unsafe { model.as_ref() }.is_some_and(|m| m.file.is_backbone) as i32
}

/// Forward one example. `input` is HWC-ordered with `input_len` values;
/// `out` receives exactly `out_len` values.
///
/// # Safety
/// `model` must be a live handle; the buffers must hold the given lengths.
#[no_mangle]
pub unsafe extern "C" fn edp_model_forward(
    model: *const EdpModel,
    input: *const f64,
    input_len: usize,
    out: *mut f64,
    out_len: usize,
) -> EdpStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let x = unsafe { slice_arg(input, input_len, "input") }?;
        write_output(&m.file.model.predict(x)?, out, out_len)
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edp_model_free(model: *mut EdpModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Ensemble `count` backbones under the head of `initial`. `weights` may be
/// null for equal weights; otherwise it holds `count` non-negative values
/// summing to 1. Handles are copied, so callers keep ownership.
///
/// # Safety
/// `initial` must be live; `backbones` must point to `count` live handles;
/// `weights` must be null or point to `count` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn edp_ensemble_new(
    initial: *const EdpModel,
    backbones: *const *const EdpModel,
    count: usize,
    weights: *const f64,
    out: *mut *mut EdpEnsemble,
) -> EdpStatus {
    guard(|| {
        let initial = unsafe { handle(initial, "initial") }?;
        let handles = unsafe { slice_arg(backbones, count, "backbones") }?;
        let members = handles
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let m = unsafe { handle(h, &format!("backbone {i}")) }?;
                Ok(m.file.clone().into_private()?)
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let weights = if weights.is_null() { None } else { Some(unsafe { slice_arg(weights, count, "weights") }?.to_vec()) };
        let inner = EnsembleModel::from_initial(members, &initial.file.model, weights)?;
        boxed(EdpEnsemble { inner }, out)
    })
}

/// Number of output values of the ensemble, or 0 for null.
///
/// # Safety
/// `ensemble` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn edp_ensemble_output_len(ensemble: *const EdpEnsemble) -> usize {
    unsafe { ensemble.as_ref() }.map_or(0, |e| e.inner.head().output_shape().iter().product())
}

/// Forward one example through the ensemble.
///
/// # Safety
/// `ensemble` must be a live handle; the buffers must hold the given lengths.
#[no_mangle]
pub unsafe extern "C" fn edp_ensemble_forward(
    ensemble: *const EdpEnsemble,
    input: *const f64,
    input_len: usize,
    out: *mut f64,
    out_len: usize,
) -> EdpStatus {
    guard(|| {
        let e = unsafe { handle(ensemble, "ensemble") }?;
        let x = unsafe { slice_arg(input, input_len, "input") }?;
        write_output(&e.inner.forward(x)?, out, out_len)
    })
}

/// Release an ensemble handle. Null is ignored.
///
/// # Safety
/// `ensemble` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edp_ensemble_free(ensemble: *mut EdpEnsemble) {
    if !ensemble.is_null() {
        drop(unsafe { Box::from_raw(ensemble) });
    }
}

/// Rényi divergence of one subsampled Gaussian step at order `alpha`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn edp_rdp_step(alpha: f64, sampling_rate: f64, noise_multiplier: f64, out: *mut f64) -> EdpStatus {
    guard(|| {
        let value = rdp_step(alpha, sampling_rate, noise_multiplier)?;
        *unsafe { out_arg(out, "out") }? = value;
        Ok(())
    })
}

/// (ε, δ) after `steps` subsampled Gaussian steps over the default order
/// grid. `order_out` may be null; otherwise it receives the minimizing order.
///
/// # Safety
/// `epsilon_out` must be writable; `order_out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn edp_compute_epsilon(
    noise_multiplier: f64,
    sampling_rate: f64,
    steps: usize,
    delta: f64,
    epsilon_out: *mut f64,
    order_out: *mut f64,
) -> EdpStatus {
    guard(|| {
        let eps = unsafe { out_arg(epsilon_out, "epsilon_out") }?;
        let report = compute_epsilon(noise_multiplier, sampling_rate, steps, delta, &default_orders())?;
        *eps = report.epsilon;
        if let Some(order) = unsafe { order_out.as_mut() } {
            *order = report.optimal_order;
        }
        Ok(())
    })
}
