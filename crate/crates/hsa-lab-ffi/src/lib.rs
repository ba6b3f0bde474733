//! C ABI over the hsa-lab core: open checkpoints behind opaque handles,
//! validate configs, run single forward passes, generate task samples, and
//! query the analytic cost model.
//!
//! Conventions:
//! - every function returns an `HsaStatus`; results go through out-pointers
//! - string outputs are written into caller buffers, NUL-terminated, with
//!   `HSA_STATUS_BUFFER_TOO_SMALL` when they do not fit
//! - a thread-local message explains the most recent failure
//! - panics never cross the boundary (caught and mapped to a status)

use hsa_lab::datagen;
use hsa_lab::error::HsaError;
use hsa_lab::evalharness::{cost_model, derive_seed};
use hsa_lab::model::{forward, load_checkpoint, ForwardOptions, ModelConfig};
use hsa_lab::numerics::{Graph, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status codes mirrored from the core error taxonomy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsaStatus {
    HsaStatusOk = 0,
    HsaStatusInvalidArgument = 1,
    HsaStatusNumeric = 2,
    HsaStatusIo = 3,
    HsaStatusNullPointer = 4,
    HsaStatusBufferTooSmall = 5,
    HsaStatusPanic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &HsaError) -> HsaStatus {
    match err.exit_code() {
        1 => HsaStatus::HsaStatusInvalidArgument,
        2 => HsaStatus::HsaStatusNumeric,
        _ => HsaStatus::HsaStatusIo,
    }
}

fn fail(err: HsaError) -> HsaStatus {
    let st = status_of(&err);
    set_error(err.to_string());
    st
}

/// Run a fallible body, translating errors and panics into statuses.
fn guarded(body: impl FnOnce() -> Result<HsaStatus, HsaError>) -> HsaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(st)) => st,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic");
            HsaStatus::HsaStatusPanic
        }
    }
}

fn write_str(buf: *mut c_char, cap: usize, s: &str) -> HsaStatus {
    if buf.is_null() {
        set_error("null output buffer");
        return HsaStatus::HsaStatusNullPointer;
    }
    let bytes = s.as_bytes();
    if bytes.len() + 1 > cap {
        set_error(format!("need {} bytes, buffer holds {cap}", bytes.len() + 1));
        return HsaStatus::HsaStatusBufferTooSmall;
    }
    unsafe {
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
        *buf.add(bytes.len()) = 0;
    }
    HsaStatus::HsaStatusOk
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, HsaStatus> {
    if p.is_null() {
        set_error("null string argument");
        return Err(HsaStatus::HsaStatusNullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        HsaStatus::HsaStatusInvalidArgument
    })
}

/// Opaque model handle: a loaded checkpoint (config + parameters).
pub struct HsaModel {
    cfg: ModelConfig,
    ps: ParamSet<f32>,
}

/// Library version as a NUL-terminated static string.
#[no_mangle]
pub extern "C" fn hsa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the most recent error message for this thread into `buf`.
#[no_mangle]
pub unsafe extern "C" fn hsa_last_error_message(buf: *mut c_char, cap: usize) -> HsaStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    write_str(buf, cap, &msg)
}

/// Load a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsa_model_open(
    path: *const c_char,
    out: *mut *mut HsaModel,
) -> HsaStatus {
    if out.is_null() {
        set_error("null output pointer");
        return HsaStatus::HsaStatusNullPointer;
    }
    let path = match cstr(path) {
        Ok(p) => p.to_string(),
        Err(st) => return st,
    };
    guarded(|| {
        let (cfg, ps) = load_checkpoint(std::path::Path::new(&path))?;
        unsafe { *out = Box::into_raw(Box::new(HsaModel { cfg, ps })) };
        Ok(HsaStatus::HsaStatusOk)
    })
}

/// Release a model handle. Passing NULL is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by `hsa_model_open`, freed once.
#[no_mangle]
pub unsafe extern "C" fn hsa_model_free(model: *mut HsaModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Write the model's config as canonical JSON.
///
/// # Safety
/// `model` must be a live handle; `buf` must hold `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hsa_model_config_json(
    model: *const HsaModel,
    buf: *mut c_char,
    cap: usize,
) -> HsaStatus {
    let Some(m) = (unsafe { model.as_ref() }) else {
        set_error("null model handle");
        return HsaStatus::HsaStatusNullPointer;
    };
    guarded(|| {
        let json = serde_json::to_string(&m.cfg).map_err(HsaError::from)?;
        Ok(write_str(buf, cap, &json))
    })
}

/// Total trainable parameter count of the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsa_model_param_count(
    model: *const HsaModel,
    out: *mut u64,
) -> HsaStatus {
    let Some(m) = (unsafe { model.as_ref() }) else {
        set_error("null model handle");
        return HsaStatus::HsaStatusNullPointer;
    };
    if out.is_null() {
        set_error("null output pointer");
        return HsaStatus::HsaStatusNullPointer;
    }
    let total: usize = m.ps.iter().map(|(_, e)| e.value.numel()).sum();
    unsafe { *out = total as u64 };
    HsaStatus::HsaStatusOk
}

/// Run one forward pass and write the next-token logits (vocab_size floats)
/// of the final position.
///
/// # Safety
/// `tokens` must point to `n_tokens` ids; `logits` must hold `vocab_size`
/// floats (see the model config).
#[no_mangle]
pub unsafe extern "C" fn hsa_model_logits(
    model: *const HsaModel,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f32,
) -> HsaStatus {
    let Some(m) = (unsafe { model.as_ref() }) else {
        set_error("null model handle");
        return HsaStatus::HsaStatusNullPointer;
    };
    if tokens.is_null() || logits.is_null() {
        set_error("null buffer argument");
        return HsaStatus::HsaStatusNullPointer;
    }
    let toks = unsafe { std::slice::from_raw_parts(tokens, n_tokens) };
    guarded(|| {
        let mut g = Graph::<f32>::new_inference();
        let out = forward(&mut g, &m.ps, toks, &m.cfg, &ForwardOptions::from_config(&m.cfg))?;
        let row = g.value(out.logits).row(n_tokens - 1);
        unsafe { std::ptr::copy_nonoverlapping(row.as_ptr(), logits, row.len()) };
        Ok(HsaStatus::HsaStatusOk)
    })
}

/// Validate a model config given as JSON; unknown fields are rejected.
///
/// # Safety
/// `json` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hsa_config_validate_json(json: *const c_char) -> HsaStatus {
    let json = match cstr(json) {
        Ok(j) => j.to_string(),
        Err(st) => return st,
    };
    guarded(|| {
        let cfg: ModelConfig = serde_json::from_str(&json).map_err(|e| {
            HsaError::InvalidArgument { op: "config", msg: e.to_string() }
        })?;
        cfg.validate()?;
        Ok(HsaStatus::HsaStatusOk)
    })
}

/// Synthetic tasks exposed through the C surface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsaTask {
    HsaTaskSniah = 0,
    HsaTaskVartrack = 1,
    HsaTaskLm = 2,
}

/// Generate one sample deterministically from `(seed, index)` and write it
/// as a JSON line (tokens, loss mask, metadata).
///
/// # Safety
/// `buf` must hold `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hsa_gen_sample_json(
    task: HsaTask,
    length: usize,
    seed: u64,
    index: u64,
    buf: *mut c_char,
    cap: usize,
) -> HsaStatus {
    guarded(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, index]));
        let sample = match task {
            HsaTask::HsaTaskSniah => {
                let depth = rand::Rng::gen_range(&mut rng, 0.0..=1.0);
                datagen::gen_sniah(length, depth, &mut rng)?
            }
            HsaTask::HsaTaskVartrack => datagen::gen_vartrack(length, 3, &mut rng)?,
            HsaTask::HsaTaskLm => datagen::gen_lm(length, &mut rng)?,
        };
        Ok(write_str(buf, cap, &sample.to_json_line()?))
    })
}

/// Evaluate the analytic cost model for a config (JSON) at one context
/// length and write the report row as JSON.
///
/// # Safety
/// `config_json` must be NUL-terminated; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn hsa_cost_report_json(
    config_json: *const c_char,
    n: u64,
    buf: *mut c_char,
    cap: usize,
) -> HsaStatus {
    let json = match cstr(config_json) {
        Ok(j) => j.to_string(),
        Err(st) => return st,
    };
    guarded(|| {
        let cfg: ModelConfig = serde_json::from_str(&json).map_err(|e| {
            HsaError::InvalidArgument { op: "config", msg: e.to_string() }
        })?;
        cfg.validate()?;
        let report = cost_model(&cfg, cfg.swa_window, cfg.top_k, &[n])?;
        let body = serde_json::to_string(&report.rows[0]).map_err(HsaError::from)?;
        Ok(write_str(buf, cap, &body))
    })
}
