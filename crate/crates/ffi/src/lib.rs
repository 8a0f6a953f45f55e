//! C ABI over `mas-core`.
//!
//! Every fallible call returns a [`MasStatus`]; on failure the message is
//! available from [`mas_last_error`] until the next call on the same thread.
//! Objects are opaque handles released with their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mas_core::engine::{self, KVCache};
use mas_core::masking::{build_mask, AttnMask, MaskMode, Role, SegmentedTokens, SENTINEL};
use mas_core::model::ModelWeights;
use mas_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MasStatus {
    Ok = 0,
    NullPointer = 1,
    BadString = 2,
    BufferTooSmall = 3,
    Shape = 10,
    DegenerateRow = 11,
    NonFinite = 12,
    State = 13,
    Config = 14,
    Segments = 15,
    Invalid = 16,
    Diverged = 17,
    Format = 18,
    Io = 19,
    Json = 20,
    Csv = 21,
    Panic = 99,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MasMode {
    Causal = 0,
    Segment = 1,
}

impl From<MasMode> for MaskMode {
    fn from(m: MasMode) -> Self {
        match m {
            MasMode::Causal => MaskMode::Causal,
            MasMode::Segment => MaskMode::Mas,
        }
    }
}

/// Loaded f32 model weights.
pub struct MasModel(ModelWeights<f32>);
/// Boolean attention mask.
pub struct MasMask(AttnMask);
/// Key/value cache of a prefilled sequence.
pub struct MasCache(KVCache<f32>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MasStatus {
    match e {
        Error::Shape(_) => MasStatus::Shape,
        Error::DegenerateRow { .. } => MasStatus::DegenerateRow,
        Error::NonFinite(_) => MasStatus::NonFinite,
        Error::State(_) => MasStatus::State,
        Error::Config(_) => MasStatus::Config,
        Error::Segments(_) => MasStatus::Segments,
        Error::Invalid(_) => MasStatus::Invalid,
        Error::Diverged { .. } => MasStatus::Diverged,
        Error::Format(_) => MasStatus::Format,
        Error::Io { .. } => MasStatus::Io,
        Error::Json(_) => MasStatus::Json,
        Error::Csv(_) => MasStatus::Csv,
    }
}

struct Fail(MasStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.code()))
    }
}

fn null(what: &str) -> Fail {
    Fail(MasStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MasStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MasStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MasStatus::BadString, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies logits into a caller buffer of `len` floats.
unsafe fn write_logits(logits: &[f32], out: *mut f32, len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Ok(());
    }
    if len < logits.len() {
        return Err(Fail(
            MasStatus::BufferTooSmall,
            format!("logits buffer holds {len}, need {}", logits.len()),
        ));
    }
    ptr::copy_nonoverlapping(logits.as_ptr(), out, logits.len());
    Ok(())
}

fn prompt(tokens: &[u32], segment_ids: &[i32]) -> Result<SegmentedTokens, Fail> {
    let roles = segment_ids
        .iter()
        .map(|&s| match s {
            SENTINEL => Role::Assistant,
            0 => Role::System,
            _ => Role::User,
        })
        .collect();
    Ok(SegmentedTokens::new(tokens.to_vec(), segment_ids.to_vec(), roles)?)
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn mas_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status, e.g. `"E_SEGMENTS"`.
#[no_mangle]
pub extern "C" fn mas_status_name(status: MasStatus) -> *const c_char {
    let s: &'static CStr = match status {
        MasStatus::Ok => c"OK",
        MasStatus::NullPointer => c"E_NULL",
        MasStatus::BadString => c"E_STRING",
        MasStatus::BufferTooSmall => c"E_BUFFER",
        MasStatus::Shape => c"E_SHAPE",
        MasStatus::DegenerateRow => c"E_DEGENERATE_ROW",
        MasStatus::NonFinite => c"E_NON_FINITE",
        MasStatus::State => c"E_STATE",
        MasStatus::Config => c"E_CONFIG",
        MasStatus::Segments => c"E_SEGMENTS",
        MasStatus::Invalid => c"E_INVALID",
        MasStatus::Diverged => c"E_DIVERGED",
        MasStatus::Format => c"E_FORMAT",
        MasStatus::Io => c"E_IO",
        MasStatus::Json => c"E_JSON",
        MasStatus::Csv => c"E_CSV",
        MasStatus::Panic => c"E_PANIC",
    };
    s.as_ptr()
}

/// Loads `path` (MASW1) and its JSON config.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mas_model_load(path: *const c_char, out: *mut *mut MasModel) -> MasStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let w = ModelWeights::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MasModel(w)));
        Ok(())
    })
}

/// # Safety
/// `model` is null or came from [`mas_model_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn mas_model_free(model: *mut MasModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size (the length of every logits vector); 0 for null.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mas_model_vocab_size(model: *const MasModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.vocab_size)
}

/// Builds the `n`×`n` mask of a segment layout (`-1` = generated token).
///
/// # Safety
/// `segment_ids` holds `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mas_mask_build(segment_ids: *const i32, n: usize, mode: MasMode, out: *mut *mut MasMask) -> MasStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let ids = slice_arg(segment_ids, n, "segment_ids")?;
        let seg = SegmentedTokens::from_layout(ids)?;
        *out = Box::into_raw(Box::new(MasMask(build_mask(&seg, mode.into()))));
        Ok(())
    })
}

/// # Safety
/// `mask` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mas_mask_size(mask: *const MasMask) -> usize {
    mask.as_ref().map_or(0, |m| m.0.n())
}

/// 1 if query `i` may attend to key `j`, 0 if masked, -1 out of range.
///
/// # Safety
/// `mask` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mas_mask_allowed(mask: *const MasMask, i: usize, j: usize) -> i32 {
    match mask.as_ref() {
        Some(m) if i < m.0.n() && j < m.0.n() => m.0.get(i, j) as i32,
        _ => -1,
    }
}

/// # Safety
/// `mask` is null or a live handle not used again.
#[no_mangle]
pub unsafe extern "C" fn mas_mask_free(mask: *mut MasMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Prefills a prompt (segment 0 = system, others = user) and writes the
/// next-token logits to `logits` (may be null).
///
/// # Safety
/// `tokens` and `segment_ids` hold `n` values; `logits` holds `logits_len`
/// floats; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mas_prefill(
    model: *const MasModel,
    tokens: *const u32,
    segment_ids: *const i32,
    n: usize,
    mode: MasMode,
    logits: *mut f32,
    logits_len: usize,
    out: *mut *mut MasCache,
) -> MasStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let out = mut_arg(out, "out")?;
        let seg = prompt(slice_arg(tokens, n, "tokens")?, slice_arg(segment_ids, n, "segment_ids")?)?;
        let (cache, l) = engine::prefill(&seg, &model.0, mode.into())?;
        write_logits(&l, logits, logits_len)?;
        *out = Box::into_raw(Box::new(MasCache(cache)));
        Ok(())
    })
}

/// Appends one generated token and writes its logits.
///
/// # Safety
/// Handles are live; `logits` holds `logits_len` floats or is null.
#[no_mangle]
pub unsafe extern "C" fn mas_decode_step(cache: *mut MasCache, model: *const MasModel, token: u32, logits: *mut f32, logits_len: usize) -> MasStatus {
    guard(|| {
        let cache = mut_arg(cache, "cache")?;
        let model = ref_arg(model, "model")?;
        let l = engine::decode_step(&mut cache.0, &model.0, token)?;
        write_logits(&l, logits, logits_len)
    })
}

/// Caches a system prompt (all tokens in segment 0) for reuse.
///
/// # Safety
/// `tokens` holds `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mas_snapshot_system(model: *const MasModel, tokens: *const u32, n: usize, mode: MasMode, out: *mut *mut MasCache) -> MasStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let out = mut_arg(out, "out")?;
        let tokens = slice_arg(tokens, n, "tokens")?;
        let seg = prompt(tokens, &vec![0; tokens.len()])?;
        let cache = engine::snapshot_system_cache(&seg, &model.0, mode.into())?;
        *out = Box::into_raw(Box::new(MasCache(cache)));
        Ok(())
    })
}

/// Extends a copy of `snapshot` with one user segment; the snapshot is
/// unchanged and can be resumed again.
///
/// # Safety
/// Handles are live; `tokens` holds `n` values; `logits` holds `logits_len`
/// floats or is null; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mas_resume_with_user(
    snapshot: *const MasCache,
    model: *const MasModel,
    tokens: *const u32,
    n: usize,
    segment_id: i32,
    logits: *mut f32,
    logits_len: usize,
    out: *mut *mut MasCache,
) -> MasStatus {
    guard(|| {
        let snapshot = ref_arg(snapshot, "snapshot")?;
        let model = ref_arg(model, "model")?;
        let out = mut_arg(out, "out")?;
        let tokens = slice_arg(tokens, n, "tokens")?;
        let user = prompt(tokens, &vec![segment_id; tokens.len()])?;
        let (cache, l) = engine::resume_with_user(&snapshot.0, &model.0, &user)?;
        write_logits(&l, logits, logits_len)?;
        *out = Box::into_raw(Box::new(MasCache(cache)));
        Ok(())
    })
}

/// Number of cached positions; 0 for null.
///
/// # Safety
/// `cache` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mas_cache_len(cache: *const MasCache) -> usize {
    cache.as_ref().map_or(0, |c| c.0.cached_len())
}

/// # Safety
/// `cache` is live; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mas_cache_save(cache: *const MasCache, path: *const c_char) -> MasStatus {
    guard(|| {
        let cache = ref_arg(cache, "cache")?;
        cache.0.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mas_cache_load(path: *const c_char, out: *mut *mut MasCache) -> MasStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let cache = KVCache::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MasCache(cache)));
        Ok(())
    })
}

/// # Safety
/// `cache` is null or a live handle not used again.
#[no_mangle]
pub unsafe extern "C" fn mas_cache_free(cache: *mut MasCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}
