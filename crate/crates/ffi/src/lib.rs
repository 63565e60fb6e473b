//! C ABI over `ape-core`.
//!
//! Every function returns an [`ApeStatus`]. On failure a message is kept in
//! thread-local storage and can be copied out with [`ape_last_error`].
//! Models and segments are opaque handles released with their `_free`
//! function. Panics never cross the boundary; they surface as
//! `APE_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use ape_core::attention::{ApeConfig, AttentionMode, ScalingMode};
use ape_core::cache_sim::{self, Workload};
use ape_core::kv_store::{self, ContextCacheEntry, PermutationCounting, Role};
use ape_core::model::{Model, ToyModelSpec};
use ape_core::tensor::logsumexp_f64;
use ape_core::ApeError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Format = 4,
    Numeric = 5,
    Io = 6,
    Panic = 7,
}

pub const APE_MODE_SEQUENTIAL: u32 = 0;
pub const APE_MODE_PARALLEL: u32 = 1;
pub const APE_MODE_APE: u32 = 2;

pub const APE_SCALING_AGGREGATE: u32 = 0;
pub const APE_SCALING_PER_CONTEXT: u32 = 1;

pub const APE_ROLE_PREFIX: u32 = 0;
pub const APE_ROLE_CONTEXT: u32 = 1;

pub const APE_COUNT_ORDERED_PREDECESSORS: u32 = 0;
pub const APE_COUNT_FULL_SEQUENCES: u32 = 1;

/// Opaque model handle.
pub struct ApeModel {
    inner: Model,
}

/// Opaque KV segment handle with its cache identity.
pub struct ApeSegment {
    entry: ContextCacheEntry,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(ApeStatus, String);

impl From<ApeError> for Fail {
    fn from(e: ApeError) -> Self {
        let status = match &e {
            ApeError::NotFound(_) => ApeStatus::NotFound,
            ApeError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ApeStatus::NotFound,
            ApeError::Io(_) => ApeStatus::Io,
            e if e.is_format_error() => ApeStatus::Format,
            ApeError::Numeric(_) | ApeError::Overflow(_) => ApeStatus::Numeric,
            _ => ApeStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ApeStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ApeStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ApeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ApeStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside ape-ffi");
            ApeStatus::Panic
        }
    }
}

unsafe fn bytes<'a>(ptr: *const u8, len: usize, what: &str) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn role(r: u32) -> Result<Role, Fail> {
    match r {
        APE_ROLE_PREFIX => Ok(Role::Prefix),
        APE_ROLE_CONTEXT => Ok(Role::Context),
        _ => Err(invalid(format!("unknown role {r}"))),
    }
}

fn mode(m: u32) -> Result<AttentionMode, Fail> {
    match m {
        APE_MODE_SEQUENTIAL => Ok(AttentionMode::Sequential),
        APE_MODE_PARALLEL => Ok(AttentionMode::Parallel),
        APE_MODE_APE => Ok(AttentionMode::Ape),
        _ => Err(invalid(format!("unknown attention mode {m}"))),
    }
}

fn scaling(s: u32) -> Result<ScalingMode, Fail> {
    match s {
        APE_SCALING_AGGREGATE => Ok(ScalingMode::Aggregate),
        APE_SCALING_PER_CONTEXT => Ok(ScalingMode::PerContext),
        _ => Err(invalid(format!("unknown scaling mode {s}"))),
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length excluding the NUL.
#[no_mangle]
pub unsafe extern "C" fn ape_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a toy model; `init_std <= 0` selects the default.
#[no_mangle]
pub unsafe extern "C" fn ape_model_new(
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    seed: u64,
    init_std: f32,
    out_model: *mut *mut ApeModel,
) -> ApeStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let defaults = ToyModelSpec::default();
        let spec = ToyModelSpec {
            n_layers,
            n_heads,
            head_dim,
            seed,
            init_std: if init_std > 0.0 { init_std } else { defaults.init_std },
            ..defaults
        };
        let model = Model::new(spec)?;
        *slot = Box::into_raw(Box::new(ApeModel { inner: model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ape_model_free(model: *mut ApeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ape_model_checksum(model: *const ApeModel, out_checksum: *mut u64) -> ApeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out(out_checksum, "out_checksum")? = m.inner.checksum();
        Ok(())
    })
}

/// Encodes `tokens` after an optional prefix segment (which may be null).
#[no_mangle]
pub unsafe extern "C" fn ape_encode_segment(
    model: *const ApeModel,
    tokens: *const u8,
    n_tokens: usize,
    role_code: u32,
    prefix: *const ApeSegment,
    out_segment: *mut *mut ApeSegment,
) -> ApeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let slot = out(out_segment, "out_segment")?;
        let toks = bytes(tokens, n_tokens, "tokens")?;
        let r = role(role_code)?;
        let prefix_kv = prefix.as_ref().map(|p| &p.entry.segment);
        if r == Role::Prefix && prefix_kv.is_some() {
            return Err(invalid("a prefix segment cannot itself have a prefix"));
        }
        let start = prefix_kv.map_or(0, |p| p.seq_len);
        let seg = m.inner.encode_segment(toks, r, prefix_kv, start)?;
        let entry = ContextCacheEntry::new(toks, m.inner.checksum(), seg)?;
        *slot = Box::into_raw(Box::new(ApeSegment { entry }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ape_segment_free(segment: *mut ApeSegment) {
    if !segment.is_null() {
        drop(Box::from_raw(segment));
    }
}

/// Token count, first absolute position, and content id of a segment.
#[no_mangle]
pub unsafe extern "C" fn ape_segment_info(
    segment: *const ApeSegment,
    out_seq_len: *mut usize,
    out_position_offset: *mut usize,
    out_id: *mut u64,
) -> ApeStatus {
    guard(|| {
        let s = segment.as_ref().ok_or_else(|| null("segment"))?;
        *out(out_seq_len, "out_seq_len")? = s.entry.segment.seq_len;
        *out(out_position_offset, "out_position_offset")? = s.entry.segment.position_offset;
        *out(out_id, "out_id")? = s.entry.id;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ape_segment_save(segment: *const ApeSegment, file: *const c_char) -> ApeStatus {
    guard(|| {
        let s = segment.as_ref().ok_or_else(|| null("segment"))?;
        kv_store::persist(&s.entry, path(file)?)?;
        Ok(())
    })
}

/// Loads a persisted segment; fails with `APE_STATUS_FORMAT` if it was built
/// by a different model.
#[no_mangle]
pub unsafe extern "C" fn ape_segment_load(
    model: *const ApeModel,
    file: *const c_char,
    out_segment: *mut *mut ApeSegment,
) -> ApeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let slot = out(out_segment, "out_segment")?;
        let entry = kv_store::load(path(file)?)?;
        if entry.model_checksum != m.inner.checksum() {
            return Err(Fail(
                ApeStatus::Format,
                format!(
                    "segment built by model {:016x}, not {:016x}",
                    entry.model_checksum,
                    m.inner.checksum()
                ),
            ));
        }
        *slot = Box::into_raw(Box::new(ApeSegment { entry }));
        Ok(())
    })
}

/// Greedy decoding of `query` over cached segments. Writes up to
/// `max_new` tokens to `out_tokens` (capacity `max_new`) and the count to
/// `out_len`. `prefix` may be null; `contexts` may be null when `n_contexts`
/// is 0.
#[no_mangle]
pub unsafe extern "C" fn ape_decode(
    model: *const ApeModel,
    query: *const u8,
    n_query: usize,
    prefix: *const ApeSegment,
    contexts: *const *const ApeSegment,
    n_contexts: usize,
    mode_code: u32,
    temperature: f64,
    scale: f64,
    scaling_code: u32,
    max_new: usize,
    out_tokens: *mut u8,
    out_len: *mut usize,
) -> ApeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let len_slot = out(out_len, "out_len")?;
        if max_new > 0 && out_tokens.is_null() {
            return Err(null("out_tokens"));
        }
        let q = bytes(query, n_query, "query")?;
        let handles: &[*const ApeSegment] = if n_contexts == 0 {
            &[]
        } else if contexts.is_null() {
            return Err(null("contexts"));
        } else {
            slice::from_raw_parts(contexts, n_contexts)
        };
        let mut segs = Vec::with_capacity(handles.len());
        for (i, h) in handles.iter().enumerate() {
            let s = h.as_ref().ok_or_else(|| null(&format!("contexts[{i}]")))?;
            segs.push(s.entry.segment.clone());
        }
        let cfg = ApeConfig::new(temperature, scale, scaling(scaling_code)?)?;
        let prefix_kv = prefix.as_ref().map(|p| &p.entry.segment);
        let result = m
            .inner
            .decode_with_cache(q, prefix_kv, &segs, mode(mode_code)?, &cfg, max_new)?;
        let dst = slice::from_raw_parts_mut(out_tokens, result.generated.len());
        dst.copy_from_slice(&result.generated);
        *len_slot = result.generated.len();
        Ok(())
    })
}

/// Numerically stable `log Σ exp(values)`.
#[no_mangle]
pub unsafe extern "C" fn ape_logsumexp(values: *const f64, n: usize, out_value: *mut f64) -> ApeStatus {
    guard(|| {
        if n == 0 {
            return Err(invalid("logsumexp of an empty slice"));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        *out(out_value, "out_value")? = logsumexp_f64(slice::from_raw_parts(values, n))?;
        Ok(())
    })
}

/// Hit rates for all `k`-subsets of `n` unit-length contexts under `budget`.
#[no_mangle]
pub unsafe extern "C" fn ape_cache_hit_rates(
    n_contexts: usize,
    retrieve_k: usize,
    budget: u64,
    out_ape_rate: *mut f64,
    out_prefix_rate: *mut f64,
) -> ApeStatus {
    guard(|| {
        let ape_slot = out(out_ape_rate, "out_ape_rate")?;
        let prefix_slot = out(out_prefix_rate, "out_prefix_rate")?;
        let w = Workload::all_subsets(n_contexts, retrieve_k, budget)?;
        let r = cache_sim::report(&w)?;
        *ape_slot = r.ape_rate;
        *prefix_slot = r.best_prefix_rate;
        Ok(())
    })
}

/// Bytes needed to cache every order-dependent KV state of `chunks` chunks.
/// Fails with `APE_STATUS_NUMERIC` if the count exceeds 64 bits.
#[no_mangle]
pub unsafe extern "C" fn ape_permutation_cache_bytes(
    chunks: u64,
    tokens_per_chunk: u64,
    layers: u64,
    kv_heads: u64,
    head_dim: u64,
    bytes_per_elem: u64,
    counting: u32,
    out_bytes: *mut u64,
) -> ApeStatus {
    guard(|| {
        let slot = out(out_bytes, "out_bytes")?;
        let c = match counting {
            APE_COUNT_ORDERED_PREDECESSORS => PermutationCounting::OrderedPredecessors,
            APE_COUNT_FULL_SEQUENCES => PermutationCounting::FullSequences,
            _ => return Err(invalid(format!("unknown counting mode {counting}"))),
        };
        let total = kv_store::estimate_permutation_cache(
            chunks,
            tokens_per_chunk,
            layers,
            kv_heads,
            head_dim,
            bytes_per_elem,
            c,
        )?;
        *slot = u64::try_from(total)
            .map_err(|_| Fail(ApeStatus::Numeric, format!("{total} bytes does not fit in 64 bits")))?;
        Ok(())
    })
}
