//! C interface to trace-core.
//!
//! Models are opaque handles created by `trace_model_load` and released with
//! `trace_model_free`. Every fallible call returns a `TraceStatus`; the
//! message of the most recent failure on the calling thread is available
//! through `trace_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use trace_core::cli::commands::{generate_quiet, load_model};
use trace_core::cli::Checkpoint;
use trace_core::model::TraceModel;
use trace_core::numerics::Tensor;
use trace_core::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Integrity = 5,
    Io = 6,
    /// Input sizes disagree with the model.
    Shape = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

impl From<&Error> for TraceStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Sequencing(_) | Error::Geometry(_) => TraceStatus::Config,
            Error::Data(_) | Error::Contract(_) => TraceStatus::Data,
            Error::Shape { .. } => TraceStatus::Shape,
            Error::Io { .. } => TraceStatus::Io,
            Error::Numeric(_) => TraceStatus::Numeric,
            Error::Integrity(_) => TraceStatus::Integrity,
        }
    }
}

/// A loaded model together with the clip geometry it was trained for.
pub struct TraceModelHandle {
    model: TraceModel<f32>,
    height: usize,
    width: usize,
    frames: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: TraceStatus, msg: impl Into<String>) -> TraceStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), TraceStatus>) -> TraceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TraceStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(TraceStatus::Internal, "panic inside trace-core"),
    }
}

fn check(e: Error) -> TraceStatus {
    fail(TraceStatus::from(&e), e.to_string())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, TraceStatus> {
    if p.is_null() {
        return Err(fail(TraceStatus::NullArgument, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TraceStatus::Config, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn trace_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// NUL-terminated) and returns the full message length, or 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to at least `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn trace_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn trace_model_load(path: *const c_char, out: *mut *mut TraceModelHandle) -> TraceStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(TraceStatus::NullArgument, "out is null"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let (cfg, state) = load_model(&path).map_err(check)?;
        *out = Box::into_raw(Box::new(TraceModelHandle {
            model: state.model,
            height: cfg.data.height,
            width: cfg.data.width,
            frames: cfg.data.frames,
        }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from `trace_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn trace_model_free(model: *mut TraceModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the expected clip geometry. Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn trace_model_geometry(
    model: *const TraceModelHandle,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> TraceStatus {
    let Some(m) = model.as_ref() else {
        return fail(TraceStatus::NullArgument, "model is null");
    };
    for (dst, v) in [(frames, m.frames), (height, m.height), (width, m.width)] {
        if !dst.is_null() {
            *dst = v;
        }
    }
    TraceStatus::Ok
}

/// Segments and classifies one clip.
///
/// `frames` holds `t*3*h*w` values in `[0, 1]` laid out `[T, 3, H, W]`;
/// `gas` holds `t*h*w` values laid out `[T, H, W]`. On success `masks`
/// (`t*h*w` bytes) receives `{0, 1}` masks, `probs` (3 values) the class
/// probabilities in the order high-flux, control, low-flux, and `label`
/// the arg-max class. `probs` and `label` may be null.
///
/// # Safety
/// All non-null pointers must reference buffers of the sizes above.
#[no_mangle]
pub unsafe extern "C" fn trace_model_predict(
    model: *const TraceModelHandle,
    frames: *const f32,
    gas: *const f32,
    t: usize,
    h: usize,
    w: usize,
    masks: *mut u8,
    probs: *mut f64,
    label: *mut u32,
) -> TraceStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(TraceStatus::NullArgument, "model is null"))?;
        if frames.is_null() || gas.is_null() || masks.is_null() {
            return Err(fail(TraceStatus::NullArgument, "frames, gas and masks are required"));
        }
        if (t, h, w) != (m.frames, m.height, m.width) {
            return Err(fail(
                TraceStatus::Shape,
                format!(
                    "clip is {t}x{h}x{w}, model expects {}x{}x{}",
                    m.frames, m.height, m.width
                ),
            ));
        }
        let hw = h * w;
        let fv = std::slice::from_raw_parts(frames, t * 3 * hw).to_vec();
        let gv = std::slice::from_raw_parts(gas, t * hw).to_vec();
        let ft = Tensor::new(&[t, 3, h, w], fv).map_err(check)?;
        let gt = Tensor::new(&[t, 1, h, w], gv).map_err(check)?;
        let pred = m.model.predict_clip(&ft, &gt).map_err(check)?;
        let out = std::slice::from_raw_parts_mut(masks, t * hw);
        for (f, mask) in pred.masks.iter().enumerate() {
            out[f * hw..(f + 1) * hw].copy_from_slice(mask);
        }
        if !probs.is_null() {
            std::slice::from_raw_parts_mut(probs, pred.probs.len()).copy_from_slice(&pred.probs);
        }
        if !label.is_null() {
            *label = pred.label as u32;
        }
        Ok(())
    })
}

/// Checks a checkpoint's framing and digest without building a model.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn trace_checkpoint_verify(path: *const c_char) -> TraceStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        Checkpoint::load(&path).map(drop).map_err(check)
    })
}

/// Writes a synthetic dataset, as the `generate` command does.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn trace_generate_dataset(
    out_dir: *const c_char,
    clips: usize,
    animals: usize,
    seed: u64,
    height: usize,
    width: usize,
    frames: usize,
    force: bool,
) -> TraceStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        generate_quiet(&dir, clips, animals, seed, (height, width, frames), force)
            .map(drop)
            .map_err(check)
    })
}
