//! C interface. Models and sessions are opaque heap handles; every call
//! returns an [`AdmtStatus`] and leaves a message for
//! [`admt_last_error_message`] when it fails.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use admtree::backbone::{checkpoint, ParameterSet};
use admtree::compressor::CompressionSession;
use admtree::segmenter::ScoringConfig;
use admtree::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdmtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    State = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// A loaded checkpoint.
pub struct AdmtModel {
    params: ParameterSet,
}

/// A compression session bound to no particular model.
pub struct AdmtSession {
    inner: CompressionSession,
}

/// Planning settings for [`admt_compress`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct AdmtScoring {
    pub tau: f64,
    pub segment_len: usize,
    pub lambda_ent: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AdmtStatus {
    match e {
        Error::Argument(_) | Error::Dimension { .. } | Error::Arity(_) => AdmtStatus::InvalidArgument,
        Error::Io(_) => AdmtStatus::Io,
        Error::Format { .. } | Error::Json(_) => AdmtStatus::Format,
        Error::State(_) => AdmtStatus::State,
        _ => AdmtStatus::Internal,
    }
}

struct Fail(AdmtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AdmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdmtStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("panic inside admtree".into());
            AdmtStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(AdmtStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AdmtStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn bytes_arg(p: *const u8, len: usize) -> Result<Vec<usize>, Fail> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null("byte buffer"));
    }
    Ok(slice::from_raw_parts(p, len).iter().map(|&b| usize::from(b)).collect())
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null("output pointer"))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn admt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default planning settings.
#[no_mangle]
pub extern "C" fn admt_scoring_default() -> AdmtScoring {
    let d = ScoringConfig::default();
    AdmtScoring {
        tau: d.tau,
        segment_len: d.n,
        lambda_ent: d.lambda_ent,
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn admt_model_load(path: *const c_char, out: *mut *mut AdmtModel) -> AdmtStatus {
    guard(|| {
        let out = out_arg(out)?;
        let params = checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AdmtModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`admt_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn admt_model_free(model: *mut AdmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Plans and compresses `len` bytes into a new sealed session.
///
/// # Safety
/// `model` must be a live handle, `bytes` must point at `len` readable
/// bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn admt_compress(
    model: *const AdmtModel,
    bytes: *const u8,
    len: usize,
    scoring: AdmtScoring,
    out: *mut *mut AdmtSession,
) -> AdmtStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_arg(out)?;
        let tokens = bytes_arg(bytes, len)?;
        let config = ScoringConfig {
            tau: scoring.tau,
            n: scoring.segment_len,
            lambda_ent: scoring.lambda_ent,
        };
        let inner = CompressionSession::compress_document(&tokens, &model.params, &config)?;
        *out = Box::into_raw(Box::new(AdmtSession { inner }));
        Ok(())
    })
}

/// Compresses another turn onto the session's tree. On failure the session
/// is left as it was.
///
/// # Safety
/// Handles must be live; `bytes` must point at `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn admt_session_append_turn(
    session: *mut AdmtSession,
    model: *const AdmtModel,
    bytes: *const u8,
    len: usize,
) -> AdmtStatus {
    guard(|| {
        let session = session.as_mut().ok_or_else(|| null("session"))?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let tokens = bytes_arg(bytes, len)?;
        let mut next = session.inner.clone();
        next.append_turn(&tokens, &model.params)?;
        session.inner = next;
        Ok(())
    })
}

/// Greedy continuation of `prompt`. A `keep_fraction` of 0 keeps every
/// node; other values must lie in (0, 1]. Writes up to `out_cap`
/// bytes and the count to `out_len`.
///
/// # Safety
/// Handles must be live, `prompt` readable for `prompt_len` bytes, `out`
/// writable for `out_cap` bytes and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn admt_generate(
    session: *const AdmtSession,
    model: *const AdmtModel,
    prompt: *const u8,
    prompt_len: usize,
    max_new: usize,
    keep_fraction: f64,
    out: *mut u8,
    out_cap: usize,
    out_len: *mut usize,
) -> AdmtStatus {
    guard(|| {
        let session = session.as_ref().ok_or_else(|| null("session"))?;
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out_len = out_arg(out_len)?;
        if out_cap < max_new {
            return Err(Fail(
                AdmtStatus::BufferTooSmall,
                format!("output buffer holds {out_cap} bytes, {max_new} needed"),
            ));
        }
        if out.is_null() && out_cap > 0 {
            return Err(null("output buffer"));
        }
        let keep = (keep_fraction != 0.0).then_some(keep_fraction);
        let tokens = session.inner.generate(&model.params, &bytes_arg(prompt, prompt_len)?, max_new, keep)?;
        let dst = slice::from_raw_parts_mut(out, tokens.len());
        for (d, &t) in dst.iter_mut().zip(&tokens) {
            *d = t as u8;
        }
        *out_len = tokens.len();
        Ok(())
    })
}

/// # Safety
/// `session` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn admt_session_ratio(session: *const AdmtSession, out: *mut f64) -> AdmtStatus {
    guard(|| {
        let session = session.as_ref().ok_or_else(|| null("session"))?;
        *out_arg(out)? = session.inner.achieved_ratio()?;
        Ok(())
    })
}

/// # Safety
/// `session` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn admt_session_leaf_count(session: *const AdmtSession, out: *mut usize) -> AdmtStatus {
    guard(|| {
        let session = session.as_ref().ok_or_else(|| null("session"))?;
        *out_arg(out)? = session.inner.tree().leaf_count();
        Ok(())
    })
}

/// # Safety
/// `session` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn admt_session_node_count(session: *const AdmtSession, out: *mut usize) -> AdmtStatus {
    guard(|| {
        let session = session.as_ref().ok_or_else(|| null("session"))?;
        *out_arg(out)? = session.inner.tree().node_count();
        Ok(())
    })
}

/// # Safety
/// `session` must be live and `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn admt_session_save(session: *const AdmtSession, path: *const c_char) -> AdmtStatus {
    guard(|| {
        let session = session.as_ref().ok_or_else(|| null("session"))?;
        session.inner.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be nul-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn admt_session_load(path: *const c_char, out: *mut *mut AdmtSession) -> AdmtStatus {
    guard(|| {
        let out = out_arg(out)?;
        let inner = CompressionSession::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AdmtSession { inner }));
        Ok(())
    })
}

/// # Safety
/// `session` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn admt_session_free(session: *mut AdmtSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
