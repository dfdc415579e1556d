//! C interface to `uda-core`: patch counting, confusion-matrix scoring and
//! inference from a saved checkpoint.
//!
//! Every fallible function returns a [`UdaStatus`]; on failure the message is
//! available from [`uda_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use uda_core::checkpoint::load_checkpoint;
use uda_core::data::{normalize_images, PatchSpec, RasterImage};
use uda_core::error::ErrorCategory;
use uda_core::metrics::{ConfusionCounts, UndefinedPolicy};
use uda_core::trainer::{predict, TrainConfig, TrainState};
use uda_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UdaUndefinedPolicy {
    Exclude = 0,
    CountAsZero = 1,
}

impl From<UdaUndefinedPolicy> for UndefinedPolicy {
    fn from(p: UdaUndefinedPolicy) -> Self {
        match p {
            UdaUndefinedPolicy::Exclude => UndefinedPolicy::Exclude,
            UdaUndefinedPolicy::CountAsZero => UndefinedPolicy::CountAsZero,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(err: Error) -> UdaStatus {
    let status = match err.category() {
        ErrorCategory::InvalidInput => UdaStatus::InvalidInput,
        ErrorCategory::Config => UdaStatus::Config,
        ErrorCategory::Io => UdaStatus::Io,
        ErrorCategory::Checkpoint => UdaStatus::Checkpoint,
        ErrorCategory::Numeric => UdaStatus::Numeric,
    };
    set_error(err.to_string());
    status
}

fn null(what: &str) -> UdaStatus {
    set_error(format!("{} is null", what));
    UdaStatus::NullPointer
}

fn guard(f: impl FnOnce() -> UdaStatus) -> UdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(UdaStatus::Ok) => {
            set_error(String::new());
            UdaStatus::Ok
        }
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic".into());
            UdaStatus::Panic
        }
    }
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn uda_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Number of `patch × patch` tiles at `stride` covering a `height × width`
/// raster, remainder dropped.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn uda_crop_count(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
    out: *mut usize,
) -> UdaStatus {
    if out.is_null() {
        return null("out");
    }
    guard(|| {
        let spec = PatchSpec {
            patch_size: patch,
            stride,
        };
        match spec.validate() {
            Ok(()) => {
                *out = spec.count(height, width);
                UdaStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Opaque confusion-matrix accumulator.
pub struct UdaConfusion(ConfusionCounts);

/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn uda_confusion_new(num_classes: usize, out: *mut *mut UdaConfusion) -> UdaStatus {
    if out.is_null() {
        return null("out");
    }
    if !(1..=256).contains(&num_classes) {
        return fail(Error::InvalidArgument(format!("{} classes outside 1..=256", num_classes)));
    }
    guard(|| {
        *out = Box::into_raw(Box::new(UdaConfusion(ConfusionCounts::new(num_classes))));
        UdaStatus::Ok
    })
}

/// Adds `len` prediction/label pixel pairs.
///
/// # Safety
/// `handle` must come from [`uda_confusion_new`]; `pred` and `gt` must be
/// valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn uda_confusion_accumulate(
    handle: *mut UdaConfusion,
    pred: *const u8,
    gt: *const u8,
    len: usize,
) -> UdaStatus {
    if handle.is_null() {
        return null("handle");
    }
    if len > 0 && (pred.is_null() || gt.is_null()) {
        return null("pixel buffer");
    }
    guard(|| {
        let (p, g) = if len == 0 {
            (&[][..], &[][..])
        } else {
            (std::slice::from_raw_parts(pred, len), std::slice::from_raw_parts(gt, len))
        };
        match (*handle).0.accumulate(p, g) {
            Ok(()) => UdaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Mean IoU and mean F1 under `policy`. Fails when no class is defined.
///
/// # Safety
/// `handle` must come from [`uda_confusion_new`]; the outputs must be valid
/// for one write each.
#[no_mangle]
pub unsafe extern "C" fn uda_confusion_scores(
    handle: *const UdaConfusion,
    policy: UdaUndefinedPolicy,
    miou: *mut f64,
    mf1: *mut f64,
) -> UdaStatus {
    if handle.is_null() || miou.is_null() || mf1.is_null() {
        return null("argument");
    }
    guard(|| {
        let r = (*handle).0.evaluate(policy.into());
        match (r.iou.mean, r.f1.mean) {
            (Some(i), Some(f)) => {
                *miou = i;
                *mf1 = f;
                UdaStatus::Ok
            }
            _ => fail(Error::InvalidArgument("no class is defined".into())),
        }
    })
}

/// Per-class IoU into `out[0..num_classes]`, NaN where undefined.
///
/// # Safety
/// `handle` must come from [`uda_confusion_new`]; `out` must be valid for
/// `len` writes.
#[no_mangle]
pub unsafe extern "C" fn uda_confusion_class_iou(
    handle: *const UdaConfusion,
    out: *mut f64,
    len: usize,
) -> UdaStatus {
    if handle.is_null() || out.is_null() {
        return null("argument");
    }
    guard(|| {
        let counts = &(*handle).0;
        if len < counts.num_classes() {
            return fail(Error::InvalidArgument(format!(
                "buffer of {} for {} classes",
                len,
                counts.num_classes()
            )));
        }
        for (k, v) in counts.iou(UndefinedPolicy::Exclude).per_class.iter().enumerate() {
            *out.add(k) = v.unwrap_or(f64::NAN);
        }
        UdaStatus::Ok
    })
}

/// # Safety
/// `handle` must be null or come from [`uda_confusion_new`], and is invalid
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn uda_confusion_free(handle: *mut UdaConfusion) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Opaque trained model restored from a checkpoint directory.
pub struct UdaModel {
    cfg: TrainConfig,
    state: TrainState<f32>,
}

/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be valid for one
/// write.
#[no_mangle]
pub unsafe extern "C" fn uda_model_load(path: *const c_char, out: *mut *mut UdaModel) -> UdaStatus {
    if path.is_null() || out.is_null() {
        return null("argument");
    }
    guard(|| {
        let Ok(p) = CStr::from_ptr(path).to_str() else {
            return fail(Error::InvalidArgument("path is not UTF-8".into()));
        };
        match load_checkpoint::<f32>(Path::new(p)) {
            Ok((cfg, state)) => {
                *out = Box::into_raw(Box::new(UdaModel { cfg, state }));
                UdaStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `handle` must come from [`uda_model_load`].
#[no_mangle]
pub unsafe extern "C" fn uda_model_num_classes(handle: *const UdaModel) -> usize {
    if handle.is_null() {
        return 0;
    }
    (*handle).cfg.num_classes
}

/// Segments one interleaved 8-bit RGB image of `height × width` pixels into
/// `classes[0..height * width]`.
///
/// # Safety
/// `handle` must come from [`uda_model_load`]; `rgb` must be valid for
/// `height * width * 3` reads and `classes` for `height * width` writes.
#[no_mangle]
pub unsafe extern "C" fn uda_model_predict(
    handle: *const UdaModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    classes: *mut u8,
) -> UdaStatus {
    if handle.is_null() || rgb.is_null() || classes.is_null() {
        return null("argument");
    }
    guard(|| {
        let model = &*handle;
        let Some(n) = height.checked_mul(width).filter(|&n| n > 0) else {
            return fail(Error::InvalidArgument("empty image".into()));
        };
        let pixels = std::slice::from_raw_parts(rgb, n * 3).to_vec();
        let result = RasterImage::new(height, width, pixels)
            .and_then(|img| normalize_images::<f32>(&[&img]))
            .and_then(|x| predict(&model.state, &model.cfg, &x));
        match result {
            Ok(p) => {
                ptr::copy_nonoverlapping(p.classes.as_ptr(), classes, n);
                UdaStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `handle` must be null or come from [`uda_model_load`], and is invalid
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn uda_model_free(handle: *mut UdaModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
