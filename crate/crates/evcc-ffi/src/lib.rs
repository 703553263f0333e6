//! C ABI for the evcc-core library.
//!
//! Conventions:
//! - handles (`EvccConfig`, `EvccModel`) are opaque; create/free in pairs;
//! - every fallible call returns an [`EvccStatus`]; on failure the message
//!   is available from `evcc_last_error_message()` until the next call on
//!   the same thread;
//! - strings returned as `char*` are owned by the caller and must be
//!   released with `evcc_string_free`;
//! - all entry points catch panics and convert them to
//!   `EVCC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use evcc_core::config::RunConfig;
use evcc_core::data::checkpoint::{load_checkpoint, save_checkpoint, store_tensors};
use evcc_core::error::EvccError;
use evcc_core::flops::{cross_attention_macs, model_flop_report, pruning_reduction};
use evcc_core::model::EvccModel as CoreModel;
use evcc_core::tensor::{Tape, Tensor};
use evcc_core::train;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvccStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ConfigError = 3,
    DimensionError = 4,
    ArgumentError = 5,
    FormatError = 6,
    NonFinite = 7,
    NanAbort = 8,
    GradCheckFailed = 9,
    IoError = 10,
    Panic = 11,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &EvccError) -> EvccStatus {
    match err {
        EvccError::Dimension(_) => EvccStatus::DimensionError,
        EvccError::Argument(_) => EvccStatus::ArgumentError,
        EvccError::Config(_) => EvccStatus::ConfigError,
        EvccError::Format(_) => EvccStatus::FormatError,
        EvccError::NonFinite(_) => EvccStatus::NonFinite,
        EvccError::NanAbort { .. } => EvccStatus::NanAbort,
        EvccError::GradCheck(_) => EvccStatus::GradCheckFailed,
        EvccError::Io(_) => EvccStatus::IoError,
    }
}

fn catch<F: FnOnce() -> EvccStatus + std::panic::UnwindSafe>(f: F) -> EvccStatus {
    match std::panic::catch_unwind(f) {
        Ok(status) => status,
        Err(_) => {
            set_error("panic inside evcc-ffi call");
            EvccStatus::Panic
        }
    }
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, EvccStatus> {
    if ptr.is_null() {
        set_error("null string pointer");
        return Err(EvccStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        EvccStatus::InvalidUtf8
    })
}

/// Opaque run configuration handle.
pub struct EvccConfig {
    inner: RunConfig,
}

/// Opaque trained-model handle (single precision).
pub struct EvccModel {
    model: CoreModel<f32>,
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Never free it.
#[no_mangle]
pub extern "C" fn evcc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must have been returned by an evcc function and not freed before.
#[no_mangle]
pub unsafe extern "C" fn evcc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// New configuration with default values. Free with `evcc_config_free`.
#[no_mangle]
pub extern "C" fn evcc_config_new() -> *mut EvccConfig {
    Box::into_raw(Box::new(EvccConfig { inner: RunConfig::default() }))
}

/// Parse a config from `key=value` lines. Returns null on error (see
/// `evcc_last_error_message`).
///
/// # Safety
/// `text` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn evcc_config_parse(text: *const c_char) -> *mut EvccConfig {
    let Ok(text) = cstr(text) else { return std::ptr::null_mut() };
    match RunConfig::parse(text) {
        Ok(cfg) => Box::into_raw(Box::new(EvccConfig { inner: cfg })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Apply one `key=value` override.
///
/// # Safety
/// `cfg` must be a live handle; `key`/`value` valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn evcc_config_set(
    cfg: *mut EvccConfig,
    key: *const c_char,
    value: *const c_char,
) -> EvccStatus {
    catch(|| {
        let Some(cfg) = cfg.as_mut() else {
            set_error("null config handle");
            return EvccStatus::NullPointer;
        };
        let (key, value) = match (cstr(key), cstr(value)) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match cfg.inner.set(key, value).and_then(|_| cfg.inner.validate()) {
            Ok(()) => EvccStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Canonical echo of every resolved key, as a newly allocated string.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evcc_config_to_text(cfg: *const EvccConfig) -> *mut c_char {
    let Some(cfg) = cfg.as_ref() else { return std::ptr::null_mut() };
    CString::new(cfg.inner.to_text())
        .map(|s| s.into_raw())
        .unwrap_or(std::ptr::null_mut())
}

/// # Safety
/// `cfg` must come from `evcc_config_new`/`evcc_config_parse`, freed once.
#[no_mangle]
pub unsafe extern "C" fn evcc_config_free(cfg: *mut EvccConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Build a freshly initialized model from the config (seeded by the
/// config's seed). Returns null on error.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evcc_model_new(cfg: *const EvccConfig) -> *mut EvccModel {
    let Some(cfg) = cfg.as_ref() else {
        set_error("null config handle");
        return std::ptr::null_mut();
    };
    match CoreModel::<f32>::new(&cfg.inner) {
        Ok(model) => Box::into_raw(Box::new(EvccModel { model })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `model` must come from a model constructor, freed once.
#[no_mangle]
pub unsafe extern "C" fn evcc_model_free(model: *mut EvccModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total parameter scalars (trainable only when `trainable_only != 0`).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evcc_model_param_count(
    model: *const EvccModel,
    trainable_only: i32,
) -> u64 {
    match model.as_ref() {
        Some(m) => m.model.store.count_scalars(trainable_only != 0) as u64,
        None => 0,
    }
}

/// Save model parameters to an EVCC checkpoint file.
///
/// # Safety
/// `model` must be a live handle, `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn evcc_model_save(
    model: *const EvccModel,
    path: *const c_char,
) -> EvccStatus {
    catch(|| {
        let Some(m) = model.as_ref() else {
            set_error("null model handle");
            return EvccStatus::NullPointer;
        };
        let path = match cstr(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let tensors = store_tensors(&m.model.store);
        match save_checkpoint(Path::new(path), &tensors, 0, m.model.cfg.digest()) {
            Ok(()) => EvccStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Build a model from the config and load parameters from a checkpoint.
/// Returns null on error.
///
/// # Safety
/// `cfg` must be a live handle, `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn evcc_model_load(
    cfg: *const EvccConfig,
    path: *const c_char,
) -> *mut EvccModel {
    let Some(cfg) = cfg.as_ref() else {
        set_error("null config handle");
        return std::ptr::null_mut();
    };
    let Ok(path) = cstr(path) else { return std::ptr::null_mut() };
    let loaded = load_checkpoint(Path::new(path))
        .and_then(|ckpt| train::model_from_checkpoint(&cfg.inner, &ckpt));
    match loaded {
        Ok(model) => Box::into_raw(Box::new(EvccModel { model })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Forward a batch of images and write per-sample class logits.
///
/// `images` is row-major [batch, 3, image_size, image_size]; `logits_out`
/// must hold `batch * n_classes` floats. When `pi_out` is non-null it must
/// hold `batch * 3` floats and receives the final routing weights (zeros
/// for the baseline architecture).
///
/// # Safety
/// Pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn evcc_model_predict(
    model: *const EvccModel,
    images: *const f32,
    batch: usize,
    logits_out: *mut f32,
    pi_out: *mut f32,
) -> EvccStatus {
    catch(|| {
        let Some(m) = model.as_ref() else {
            set_error("null model handle");
            return EvccStatus::NullPointer;
        };
        if images.is_null() || logits_out.is_null() || batch == 0 {
            set_error("null buffer or empty batch");
            return EvccStatus::NullPointer;
        }
        let s = m.model.cfg.model.image_size;
        let pixels = std::slice::from_raw_parts(images, batch * 3 * s * s);
        let tensor = match Tensor::from_vec(&[batch, 3, s, s], pixels.to_vec()) {
            Ok(t) => t,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        let mut tape = Tape::new();
        let bound = m.model.bind(&mut tape);
        let x = tape.constant(tensor);
        match m.model.forward(&mut tape, &bound, x) {
            Ok(out) => {
                let logits = tape.value(out.main_logits).data();
                std::slice::from_raw_parts_mut(logits_out, logits.len())
                    .copy_from_slice(logits);
                if !pi_out.is_null() {
                    let dst = std::slice::from_raw_parts_mut(pi_out, batch * 3);
                    match out.routing {
                        Some(r) => dst.copy_from_slice(tape.value(r.pi_final).data()),
                        None => dst.fill(0.0),
                    }
                }
                EvccStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Run the full training loop into `out_dir` (config echo, metrics log,
/// checkpoint), writing final train/test accuracy to the out parameters.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` a valid NUL-terminated string,
/// and the accuracy pointers either null or valid.
#[no_mangle]
pub unsafe extern "C" fn evcc_train_run(
    cfg: *const EvccConfig,
    out_dir: *const c_char,
    train_acc_out: *mut f64,
    test_acc_out: *mut f64,
) -> EvccStatus {
    catch(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("null config handle");
            return EvccStatus::NullPointer;
        };
        let out_dir = match cstr(out_dir) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match train::run_train(&cfg.inner, Path::new(out_dir), None) {
            Ok(outcome) => {
                if !train_acc_out.is_null() {
                    *train_acc_out = outcome.final_train.acc;
                }
                if !test_acc_out.is_null() {
                    *test_acc_out = outcome.final_test.acc;
                }
                EvccStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Machine-readable FLOP report (key=value lines) for the configuration.
/// Returns null on error; free with `evcc_string_free`.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn evcc_flop_report_kv(cfg: *const EvccConfig) -> *mut c_char {
    let Some(cfg) = cfg.as_ref() else {
        set_error("null config handle");
        return std::ptr::null_mut();
    };
    match model_flop_report(&cfg.inner) {
        Ok(report) => CString::new(report.to_kv())
            .map(|s| s.into_raw())
            .unwrap_or(std::ptr::null_mut()),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Attention-product MACs 2*Nq*Nk*d of one cross-attention call.
#[no_mangle]
pub extern "C" fn evcc_cross_attention_product_macs(
    nq: u64,
    nk: u64,
    d: u64,
    heads: u64,
) -> u64 {
    if heads == 0 || d % heads != 0 {
        return 0;
    }
    cross_attention_macs(nq as usize, nk as usize, d as usize, heads as usize).attention_product
}

/// Exact and ideal pruned/unpruned cross-attention ratios.
///
/// # Safety
/// Output pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn evcc_pruning_reduction(
    n_v: u64,
    n_c: u64,
    d: u64,
    r: u64,
    n_min: u64,
    exact_ratio_out: *mut f64,
    ideal_ratio_out: *mut f64,
) -> EvccStatus {
    if n_v == 0 || n_c == 0 || d == 0 || r == 0 || n_min == 0 {
        set_error("pruning_reduction: all arguments must be positive");
        return EvccStatus::ArgumentError;
    }
    let red = pruning_reduction(n_v as usize, n_c as usize, d as usize, r as usize, n_min as usize);
    if !exact_ratio_out.is_null() {
        *exact_ratio_out = red.exact_ratio;
    }
    if !ideal_ratio_out.is_null() {
        *ideal_ratio_out = red.ideal_ratio;
    }
    EvccStatus::Ok
}

/// Gradient-check the configured model in double precision. Returns Ok and
/// writes the max relative error when every group passes;
/// `EVCC_STATUS_GRAD_CHECK_FAILED` otherwise.
///
/// # Safety
/// `cfg` must be a live handle; `max_rel_err_out` null or valid.
#[no_mangle]
pub unsafe extern "C" fn evcc_gradcheck_run(
    cfg: *const EvccConfig,
    h: f64,
    tol: f64,
    max_rel_err_out: *mut f64,
) -> EvccStatus {
    catch(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("null config handle");
            return EvccStatus::NullPointer;
        };
        match train::run_gradcheck(&cfg.inner, h, tol) {
            Ok(report) => {
                if !max_rel_err_out.is_null() {
                    *max_rel_err_out = report.max_rel_err();
                }
                if report.passed() {
                    EvccStatus::Ok
                } else {
                    set_error(&format!(
                        "groups failing at tol {tol}: {}",
                        report.failing_groups().join(", ")
                    ));
                    EvccStatus::GradCheckFailed
                }
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
