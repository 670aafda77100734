//! C ABI over `spiro-core`.
//!
//! Functions return a [`SpiroStatus`]; on failure the message is kept per thread
//! and can be copied out with [`spiro_last_error`]. Models are opaque handles
//! released with [`spiro_model_free`].

use spiro_core::checkpoint;
use spiro_core::eval::roc_auc;
use spiro_core::interpret::{cls_attention_profile, Aggregation};
use spiro_core::model::forward;
use spiro_core::pipeline::TrialModel;
use spiro_core::preproc::{compute_summary, VolumeTimeSeries};
use spiro_core::synthdata::Demographics;
use spiro_core::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpiroStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Param = 3,
    Config = 4,
    Shape = 5,
    Degenerate = 6,
    CurveTooLong = 7,
    NonFinite = 8,
    Schema = 9,
    Integrity = 10,
    Io = 11,
    Json = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for SpiroStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Param(_) => SpiroStatus::Param,
            Error::Config(_) => SpiroStatus::Config,
            Error::Shape(_) => SpiroStatus::Shape,
            Error::Degenerate(_) => SpiroStatus::Degenerate,
            Error::CurveTooLong { .. } => SpiroStatus::CurveTooLong,
            Error::NonFinite(_) => SpiroStatus::NonFinite,
            Error::Schema(_) => SpiroStatus::Schema,
            Error::Integrity { .. } => SpiroStatus::Integrity,
            Error::Io { .. } => SpiroStatus::Io,
            Error::Json(_) => SpiroStatus::Json,
        }
    }
}

/// Opaque fitted model loaded from a checkpoint.
pub struct SpiroModel {
    inner: TrialModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpiroDemographics {
    pub age: u32,
    /// 1 = male, 0 = female.
    pub sex: u8,
    /// 1 = ever smoker.
    pub smoking: u8,
    pub height_cm: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpiroSummary {
    pub fev1_l: f64,
    pub fvc_l: f64,
    pub pef_lps: f64,
    pub fef25_lps: f64,
    pub fef50_lps: f64,
    pub fef75_lps: f64,
    pub ratio: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SpiroPrediction {
    pub probability: f64,
    pub logit: f64,
    /// NaN unless demographics were supplied.
    pub fused_probability: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), (SpiroStatus, String)>) -> SpiroStatus {
    set_error(String::new());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpiroStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            SpiroStatus::Panic
        }
    }
}

fn core(e: Error) -> (SpiroStatus, String) {
    (SpiroStatus::from(&e), e.to_string())
}

fn null(what: &str) -> (SpiroStatus, String) {
    (SpiroStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (SpiroStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// Version string, static and NUL-terminated.
#[no_mangle]
pub extern "C" fn spiro_version() -> *const c_char {
    static VERSION: std::sync::OnceLock<std::ffi::CString> = std::sync::OnceLock::new();
    VERSION
        .get_or_init(|| std::ffi::CString::new(spiro_core::cli::VERSION).unwrap_or_default())
        .as_ptr()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length plus one.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spiro_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Classical summary measures of a volume-time blow sampled every 10 ms.
///
/// # Safety
/// `volume_ml` must point to `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spiro_summary_from_volume(
    volume_ml: *const u32,
    n: usize,
    out: *mut SpiroSummary,
) -> SpiroStatus {
    guard(|| {
        let v = slice(volume_ml, n, "volume_ml")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let blow = VolumeTimeSeries {
            volume_ml: v.to_vec(),
            acceptability_code: 0,
        };
        let s = compute_summary(&blow).map_err(core)?;
        *out = SpiroSummary {
            fev1_l: s.fev1_l,
            fvc_l: s.fvc_l,
            pef_lps: s.pef_lps,
            fef25_lps: s.fef25_lps,
            fef50_lps: s.fef50_lps,
            fef75_lps: s.fef75_lps,
            ratio: s.ratio,
        };
        Ok(())
    })
}

/// Load a checkpoint. On success `*out` owns a handle for [`spiro_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spiro_model_load(path: *const c_char, out: *mut *mut SpiroModel) -> SpiroStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| (SpiroStatus::InvalidUtf8, format!("path: {e}")))?;
        let inner = checkpoint::load(Path::new(path)).map_err(core)?;
        *out = Box::into_raw(Box::new(SpiroModel { inner }));
        Ok(())
    })
}

/// Release a model handle; null is ignored.
///
/// # Safety
/// `model` must come from [`spiro_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spiro_model_free(model: *mut SpiroModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of patches in the model's input grid, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spiro_model_num_patches(model: *const SpiroModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.transformer.max_patches())
}

/// Predict from a raw blow; `demo` may be null, in which case `fused_probability` is NaN.
///
/// # Safety
/// `volume_ml` must point to `n` values; `demo` must be null or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spiro_model_predict_blow(
    model: *const SpiroModel,
    volume_ml: *const u32,
    n: usize,
    demo: *const SpiroDemographics,
    out: *mut SpiroPrediction,
) -> SpiroStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let v = slice(volume_ml, n, "volume_ml")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let blow = VolumeTimeSeries {
            volume_ml: v.to_vec(),
            acceptability_code: 0,
        };
        let demo = demo.as_ref().map(|d| Demographics {
            age: d.age,
            sex: d.sex,
            smoking: d.smoking,
            height: d.height_cm,
        });
        let seq = m.inner.sequence_for_blow(&blow).map_err(core)?;
        let (pred, fused) = m.inner.predict_sequence(&seq, demo.as_ref()).map_err(core)?;
        *out = SpiroPrediction {
            probability: pred.probability,
            logit: pred.logit,
            fused_probability: fused.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Per-patch CLS-attention importance for a raw blow. `importance` receives
/// `spiro_model_num_patches` values; pad patches get 0.
///
/// # Safety
/// `importance` must hold `cap` doubles; the two out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn spiro_model_attention(
    model: *const SpiroModel,
    volume_ml: *const u32,
    n: usize,
    importance: *mut f64,
    cap: usize,
    n_patches: *mut usize,
    most_important_patch: *mut usize,
) -> SpiroStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let v = slice(volume_ml, n, "volume_ml")?;
        if n_patches.is_null() || most_important_patch.is_null() {
            return Err(null("out"));
        }
        let blow = VolumeTimeSeries {
            volume_ml: v.to_vec(),
            acceptability_code: 0,
        };
        let seq = m.inner.sequence_for_blow(&blow).map_err(core)?;
        let trace = forward(&m.inner.transformer, &seq).map_err(core)?;
        let p = cls_attention_profile(&trace.attention, &seq.mask, Aggregation::default()).map_err(core)?;
        *n_patches = p.importance.len();
        if importance.is_null() || cap < p.importance.len() {
            return Err((
                SpiroStatus::BufferTooSmall,
                format!("importance needs {} slots, got {cap}", p.importance.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(p.importance.as_ptr(), importance, p.importance.len());
        *most_important_patch = p.most_important_patch;
        Ok(())
    })
}

/// Exact ROC-AUC with midrank ties; labels must be 0 or 1 and include both.
///
/// # Safety
/// `scores` and `labels` must each point to `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spiro_roc_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> SpiroStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        let l = slice(labels, n, "labels")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = roc_auc(s, l).map_err(core)?;
        Ok(())
    })
}
