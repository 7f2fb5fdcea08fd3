//! C ABI over `mamba-adaptor`.
//!
//! Every fallible call returns an [`MaStatus`]; on failure the message is
//! kept per thread and read with [`ma_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Tensors are row-major f64.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mamba_adaptor::adaptor_s::depthwise_conv2d;
use mamba_adaptor::grad::ParamStore;
use mamba_adaptor::harness::RunConfig;
use mamba_adaptor::model::{block_forward, ss2d_forward, Block};
use mamba_adaptor::rng::SplitMix64;
use mamba_adaptor::ssm::{scan_parallel_with, scan_sequential, ScanOptions};
use mamba_adaptor::{matd, Error, Precision, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    NonFinite = 3,
    Domain = 4,
    Config = 5,
    Contract = 6,
    Format = 7,
    Io = 8,
    Internal = 9,
}

/// Dense f64 tensor.
pub struct MaTensor(Tensor);

/// One vision-Mamba block with its weights.
pub struct MaBlock(Block);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MaStatus {
    match e {
        Error::Shape { .. } => MaStatus::Shape,
        Error::NonFinite(_) => MaStatus::NonFinite,
        Error::Domain(_) => MaStatus::Domain,
        Error::Config(_) => MaStatus::Config,
        Error::Contract(_) | Error::Tape(_) => MaStatus::Contract,
        Error::Format(_) => MaStatus::Format,
        Error::Io(_) => MaStatus::Io,
    }
}

struct Null;

enum Fail {
    Null,
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

impl From<Null> for Fail {
    fn from(_: Null) -> Self {
        Fail::Null
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MaStatus::Ok,
        Ok(Err(Fail::Null)) => {
            set_error("null pointer argument".into());
            MaStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            MaStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, Null> {
    p.as_ref().ok_or(Null)
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null);
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::Format("string is not utf-8".into())))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null);
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ma_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ma_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Advances a SplitMix64 state and returns the next output.
///
/// # Safety
/// `state` must point to a writable `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn ma_splitmix64_next(state: *mut u64) -> u64 {
    let Some(s) = state.as_mut() else { return 0 };
    let mut r = SplitMix64::new(*s);
    let v = r.next_u64();
    *s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
    v
}

/// Copies `shape[0..rank]` and `data[0..Π shape]` into a new tensor.
///
/// # Safety
/// `shape` must hold `rank` values and `data` their product; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut MaTensor,
) -> MaStatus {
    guard(|| {
        if shape.is_null() || data.is_null() {
            return Err(Fail::Null);
        }
        let shape = std::slice::from_raw_parts(shape, rank).to_vec();
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Domain("tensor extent overflows".into()))?;
        let data = std::slice::from_raw_parts(data, n).to_vec();
        emit(out, MaTensor(Tensor::new(shape, data)?))
    })
}

/// # Safety
/// `t` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_free(t: *mut MaTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_rank(t: *const MaTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rank())
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_len(t: *const MaTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Writes the extents into `shape[0..cap]`; fails if `cap < rank`.
///
/// # Safety
/// `t` must be a live handle and `shape` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_shape(t: *const MaTensor, shape: *mut usize, cap: usize) -> MaStatus {
    guard(|| {
        let t = deref(t)?;
        if shape.is_null() {
            return Err(Fail::Null);
        }
        if cap < t.0.rank() {
            return Err(Error::Domain(format!("shape buffer holds {cap}, rank is {}", t.0.rank())).into());
        }
        ptr::copy_nonoverlapping(t.0.shape().as_ptr(), shape, t.0.rank());
        Ok(())
    })
}

/// Copies the row-major values into `data[0..cap]`; fails if `cap < len`.
///
/// # Safety
/// `t` must be a live handle and `data` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ma_tensor_data(t: *const MaTensor, data: *mut f64, cap: usize) -> MaStatus {
    guard(|| {
        let t = deref(t)?;
        if data.is_null() {
            return Err(Fail::Null);
        }
        if cap < t.0.len() {
            return Err(Error::Domain(format!("data buffer holds {cap}, tensor has {}", t.0.len())).into());
        }
        ptr::copy_nonoverlapping(t.0.data().as_ptr(), data, t.0.len());
        Ok(())
    })
}

/// Reads a MATD file (f32 payloads are widened).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ma_matd_read(path: *const c_char, out: *mut *mut MaTensor) -> MaStatus {
    guard(|| {
        let (t, _) = matd::read(text(path)?)?;
        emit(out, MaTensor(t))
    })
}

/// Writes `t` as MATD with `dtype` 8 (f64) or 4 (f32).
///
/// # Safety
/// `path` must be a NUL-terminated string and `t` a live handle.
#[no_mangle]
pub unsafe extern "C" fn ma_matd_write(path: *const c_char, t: *const MaTensor, dtype: u8) -> MaStatus {
    guard(|| {
        let t = deref(t)?;
        let p = Precision::from_dtype_byte(dtype)
            .ok_or_else(|| Error::Config(format!("dtype must be 4 or 8, got {dtype}")))?;
        matd::write(text(path)?, &t.0, p)?;
        Ok(())
    })
}

/// `h_t = Ā_t ⊙ h_{t−1} + B̄u_t` from `h_{−1} = 0`, time on the leading axis.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ma_scan_sequential(
    abar: *const MaTensor,
    bu: *const MaTensor,
    out: *mut *mut MaTensor,
) -> MaStatus {
    guard(|| {
        let h = scan_sequential(&deref(abar)?.0, &deref(bu)?.0)?;
        emit(out, MaTensor(h))
    })
}

/// Chunked parallel scan; `chunk` must be a power of two, `workers` ≤ 1
/// runs on the calling thread.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ma_scan_parallel(
    abar: *const MaTensor,
    bu: *const MaTensor,
    chunk: usize,
    workers: usize,
    out: *mut *mut MaTensor,
) -> MaStatus {
    guard(|| {
        let opts = ScanOptions { chunk, workers };
        let h = scan_parallel_with(&deref(abar)?.0, &deref(bu)?.0, opts)?;
        emit(out, MaTensor(h))
    })
}

/// Depthwise "same" convolution of `y[H×W×D]` with `w[D×K×K]`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ma_depthwise_conv2d(
    y: *const MaTensor,
    w: *const MaTensor,
    dilation: usize,
    out: *mut *mut MaTensor,
) -> MaStatus {
    guard(|| {
        let z = depthwise_conv2d(&deref(y)?.0, &deref(w)?.0, dilation)?;
        emit(out, MaTensor(z))
    })
}

/// Builds a block from the `[block]` table (and optional top-level
/// `[adaptor_t]` / `[adaptor_s]`) of a run config, initialized from `seed`.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ma_block_new(config_toml: *const c_char, seed: u64, out: *mut *mut MaBlock) -> MaStatus {
    guard(|| {
        let cfg = RunConfig::from_toml(text(config_toml)?)?;
        let b = Block::new(cfg.block, &mut SplitMix64::new(seed))?;
        emit(out, MaBlock(b))
    })
}

/// Replaces the block weights with those in a checkpoint, which must name
/// exactly the block's parameters.
///
/// # Safety
/// `b` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ma_block_load(b: *mut MaBlock, path: *const c_char) -> MaStatus {
    guard(|| {
        let b = b.as_mut().ok_or(Null)?;
        let stored = ParamStore::load(text(path)?)?;
        let mut store = b.0.store.clone();
        if stored.len() != store.len() || store.load_matching(&stored)? != stored.len() {
            return Err(Error::Format("checkpoint does not match the block".into()).into());
        }
        b.0.store = store;
        Ok(())
    })
}

/// # Safety
/// `b` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ma_block_param_count(b: *const MaBlock) -> usize {
    b.as_ref().map_or(0, |b| b.0.store.total_count())
}

/// SS2D path only: routes, scan, adaptors, merge. `x` is `[H×W×D]`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ma_block_ss2d(b: *const MaBlock, x: *const MaTensor, out: *mut *mut MaTensor) -> MaStatus {
    guard(|| {
        let y = ss2d_forward(&deref(x)?.0, &deref(b)?.0)?;
        emit(out, MaTensor(y))
    })
}

/// Full pre-norm block: `y = x + SS2D(LN x)`, `y + FFN(LN y)`.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ma_block_forward(b: *const MaBlock, x: *const MaTensor, out: *mut *mut MaTensor) -> MaStatus {
    guard(|| {
        let y = block_forward(&deref(x)?.0, &deref(b)?.0)?;
        emit(out, MaTensor(y))
    })
}

/// # Safety
/// `b` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ma_block_free(b: *mut MaBlock) {
    if !b.is_null() {
        drop(Box::from_raw(b));
    }
}
