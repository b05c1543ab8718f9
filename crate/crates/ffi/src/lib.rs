//! C interface to the few-shot segmenter.
//!
//! Every function returns an [`FcpStatus`]; on failure the message is kept
//! per thread and can be read with [`fcp_last_error_message`]. Models are
//! opaque [`FcpModel`] handles released with [`fcp_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fcp_core::harness::{
    evaluate, load_checkpoint, save_checkpoint, train, Episode, EpisodeImage, Model, Predictor, RunConfig,
};
use fcp_core::pseudomask::Mask;
use fcp_core::synth::{FeatureMap, Phase};
use fcp_core::FcpError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FcpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Degenerate = 4,
    Contract = 5,
    Config = 6,
    Format = 7,
    Sampling = 8,
    NonFinite = 9,
    Io = 10,
    Panic = 11,
}

/// Opaque trained or initialised model.
pub struct FcpModel {
    inner: Model,
}

/// Mean IoU figures of one evaluation; pseudo-mask fields are negative when
/// the variant has no such mask.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FcpEvalSummary {
    pub episodes: usize,
    pub miou: f64,
    pub conventional_miou: f64,
    pub attention_miou: f64,
    pub constant_miou: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(FcpError),
}

impl From<FcpError> for Failure {
    fn from(e: FcpError) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &FcpError) -> FcpStatus {
    match e {
        FcpError::Dimension { .. } => FcpStatus::Dimension,
        FcpError::Degenerate(_) => FcpStatus::Degenerate,
        FcpError::Contract(_) => FcpStatus::Contract,
        FcpError::Config(_) => FcpStatus::Config,
        FcpError::Format(_) => FcpStatus::Format,
        FcpError::Sampling(_) => FcpStatus::Sampling,
        FcpError::NonFinite { .. } => FcpStatus::NonFinite,
        FcpError::Io(_) => FcpStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FcpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FcpStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            FcpStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            FcpStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            FcpStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn model<'a>(p: *const FcpModel) -> Result<&'a Model, Failure> {
    p.as_ref().map(|m| &m.inner).ok_or(Failure::Null("model"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn hand_out(out: *mut *mut FcpModel, m: Model) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(FcpModel { inner: m })) };
    Ok(())
}

/// Most recent error message on this thread, or NULL. Valid until the next
/// call into this library from the same thread.
#[no_mangle]
pub extern "C" fn fcp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fcp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Freshly initialised model. `config` holds `key = value` lines and may be
/// NULL for the defaults.
///
/// # Safety
/// `config` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fcp_model_init(config: *const c_char, out: *mut *mut FcpModel) -> FcpStatus {
    guard(|| {
        let cfg = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::parse(text(config, "config")?)?
        };
        hand_out(out, Model::init(&cfg)?)
    })
}

/// Train a model from a config (NULL for the defaults).
///
/// # Safety
/// As [`fcp_model_init`].
#[no_mangle]
pub unsafe extern "C" fn fcp_model_train(config: *const c_char, out: *mut *mut FcpModel) -> FcpStatus {
    guard(|| {
        let cfg = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::parse(text(config, "config")?)?
        };
        hand_out(out, train(&cfg, None)?.model)
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fcp_model_load(path: *const c_char, out: *mut *mut FcpModel) -> FcpStatus {
    guard(|| hand_out(out, load_checkpoint(text(path, "path")?)?))
}

/// # Safety
/// `model` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fcp_model_save(model: *const FcpModel, path: *const c_char) -> FcpStatus {
    guard(|| Ok(save_checkpoint(text(path, "path")?, self::model(model)?)?))
}

/// Release a model. NULL is ignored.
///
/// # Safety
/// `model` comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fcp_model_free(model: *mut FcpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` comes from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fcp_model_parameter_count(model: *const FcpModel, out: *mut usize) -> FcpStatus {
    guard(|| {
        let n = self::model(model)?.parameter_count();
        *out.as_mut().ok_or(Failure::Null("out"))? = n;
        Ok(())
    })
}

/// Feature channels and grid size the model expects.
///
/// # Safety
/// `model` comes from this library; the outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn fcp_model_input_shape(
    model: *const FcpModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> FcpStatus {
    guard(|| {
        let cfg = &self::model(model)?.cfg;
        for (p, v) in [(channels, cfg.channels), (height, cfg.height), (width, cfg.width)] {
            *p.as_mut().ok_or(Failure::Null("shape output"))? = v;
        }
        Ok(())
    })
}

/// Evaluate on `episodes` novel-class episodes with `k` support shots.
///
/// # Safety
/// `model` comes from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fcp_model_evaluate(
    model: *const FcpModel,
    episodes: usize,
    k: usize,
    out: *mut FcpEvalSummary,
) -> FcpStatus {
    guard(|| {
        let rep = evaluate(self::model(model)?, episodes, k)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = FcpEvalSummary {
            episodes: rep.records.len(),
            miou: rep.miou,
            conventional_miou: rep.conventional_miou.unwrap_or(-1.0),
            attention_miou: rep.attention_miou.unwrap_or(-1.0),
            constant_miou: rep.constant_miou,
        };
        Ok(())
    })
}

/// Predict a soft query mask from one labelled support image.
///
/// Feature buffers are channel-major `C × H × W` with the model's input
/// shape; `support_mask` and `out_mask` hold `H × W` values, the support
/// mask with entries 0 or 1.
///
/// # Safety
/// Every pointer is valid for the stated number of `f64` values.
#[no_mangle]
pub unsafe extern "C" fn fcp_model_predict(
    model: *const FcpModel,
    support_sam: *const f64,
    support_backbone: *const f64,
    support_mask: *const f64,
    query_sam: *const f64,
    query_backbone: *const f64,
    out_mask: *mut f64,
) -> FcpStatus {
    guard(|| {
        let m = self::model(model)?;
        let (c, h, w) = (m.cfg.channels, m.cfg.height, m.cfg.width);
        let n = c * h * w;
        let fmap =
            |p, what| -> Result<FeatureMap, Failure> { Ok(FeatureMap::new(c, h, w, slice(p, n, what)?.to_vec())?) };
        let mask = Mask::binary(h, w, slice(support_mask, h * w, "support_mask")?.to_vec())?;
        let query_sam = fmap(query_sam, "query_sam")?;
        let ep = Episode {
            support: vec![EpisodeImage {
                sam: fmap(support_sam, "support_sam")?,
                backbone: fmap(support_backbone, "support_backbone")?,
                mask,
            }],
            // the query mask is not read by prediction
            query: EpisodeImage {
                backbone: fmap(query_backbone, "query_backbone")?,
                mask: Mask::filled(h, w, 1.0)?,
                sam: query_sam,
            },
            class: 0,
            phase: Phase::Novel,
        };
        if out_mask.is_null() {
            return Err(Failure::Null("out_mask"));
        }
        let pred = m.clone().predict(&ep)?;
        std::slice::from_raw_parts_mut(out_mask, h * w).copy_from_slice(pred.mask.values());
        Ok(())
    })
}
