//! C ABI over the `framesel` selection core.
//!
//! Every function returns an [`FsStatus`]. On failure a description is kept
//! per thread and can be read with [`fs_last_error_message`]. Output buffers
//! are caller-owned; models are opaque handles released with [`fs_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use framesel::autodiff::{Graph, Tensor};
use framesel::io::{load_snapshot, save_snapshot};
use framesel::pipeline::Model;
use framesel::sampler::{hard_topk, selection_probabilities, wrs_indices};
use framesel::scoring::{score_frames, FrameSet, Mechanisms, QuestionEmbedding, ScorerDims};
use framesel::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Status codes returned by every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    Shape = 2,
    Domain = 3,
    Contract = 4,
    Validation = 5,
    Format = 6,
    Io = 7,
    Internal = 8,
}

impl From<&Error> for FsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => FsStatus::Shape,
            Error::Domain { .. } => FsStatus::Domain,
            Error::Contract(_) => FsStatus::Contract,
            Error::Validation { .. } => FsStatus::Validation,
            Error::BadMagic { .. } | Error::BadVersion { .. } | Error::SizeMismatch { .. } | Error::Json { .. } => {
                FsStatus::Format
            }
            Error::Io { .. } => FsStatus::Io,
            Error::Evaluation { .. } => FsStatus::Internal,
        }
    }
}

/// Opaque scorer handle.
pub struct FsModel {
    model: Model,
}

/// Scorer dimensions as seen from C.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FsDims {
    pub d_v: usize,
    pub d_t: usize,
    pub d_h: usize,
    pub d_p: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(FsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(FsStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(FsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FsStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            FsStatus::Internal
        }
    }
}

unsafe fn input<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure(FsStatus::Validation, "path is not valid UTF-8".into()))
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Writes `softmax(scores / tau)` into `out` (length `m`).
///
/// # Safety
/// `scores` and `out` must point to `m` valid doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_selection_probabilities(
    scores: *const f64,
    m: usize,
    tau: f64,
    out: *mut f64,
) -> FsStatus {
    guard(|| {
        let s = input(scores, m, "scores")?;
        let out = output(out, m, "out")?;
        out.copy_from_slice(&selection_probabilities(s, tau)?);
        Ok(())
    })
}

/// Ascending indices of the `k` highest scores into `out_indices` (length `k`).
///
/// # Safety
/// `scores` must hold `m` doubles and `out_indices` room for `k` entries.
#[no_mangle]
pub unsafe extern "C" fn fs_hard_topk(
    scores: *const f64,
    m: usize,
    k: usize,
    out_indices: *mut usize,
) -> FsStatus {
    guard(|| {
        let s = input(scores, m, "scores")?;
        let r = hard_topk(s, k)?;
        output(out_indices, k, "out_indices")?.copy_from_slice(&r.indices);
        Ok(())
    })
}

/// `k` distinct indices sampled by Gumbel-top-k at temperature `tau`,
/// seeded with `seed`, written in ascending order.
///
/// # Safety
/// `scores` must hold `m` doubles and `out_indices` room for `k` entries.
#[no_mangle]
pub unsafe extern "C" fn fs_wrs_indices(
    scores: *const f64,
    m: usize,
    k: usize,
    tau: f64,
    seed: u64,
    out_indices: *mut usize,
) -> FsStatus {
    guard(|| {
        let s = input(scores, m, "scores")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = wrs_indices(s, k, tau, &mut rng)?;
        output(out_indices, k, "out_indices")?.copy_from_slice(&idx);
        Ok(())
    })
}

fn boxed(model: Model, out: *mut *mut FsModel) {
    // SAFETY: callers check `out` for null before building the model
    unsafe { *out = Box::into_raw(Box::new(FsModel { model })) };
}

/// Freshly initialised scorer with every mechanism enabled.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn fs_model_new(dims: FsDims, seed: u64, out: *mut *mut FsModel) -> FsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dims = ScorerDims {
            d_v: dims.d_v,
            d_t: dims.d_t,
            d_h: dims.d_h,
            d_p: dims.d_p,
        };
        boxed(Model::new(dims, seed)?, out);
        Ok(())
    })
}

/// Loads a parameter snapshot directory (or its `index.json`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn fs_model_load(path: *const c_char, out: *mut *mut FsModel) -> FsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        boxed(load_snapshot(path)?, out);
        Ok(())
    })
}

/// Writes the model's parameters as a snapshot directory.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fs_model_save(model: *const FsModel, path: *const c_char) -> FsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path)?;
        save_snapshot(&m.model, path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fs_model_dims(model: *const FsModel, out: *mut FsDims) -> FsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let d = m.model.dims();
        *out = FsDims {
            d_v: d.d_v,
            d_t: d.d_t,
            d_h: d.d_h,
            d_p: d.d_p,
        };
        Ok(())
    })
}

/// Switches mechanisms off for later calls; `ablate` is a comma list of
/// `qfs`, `qfm`, `ifd` (empty enables all).
///
/// # Safety
/// `model` must come from this library; `ablate` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fs_model_set_ablation(model: *mut FsModel, ablate: *const c_char) -> FsStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let list = path_arg(ablate)?;
        m.model.mechanisms = Mechanisms::with_ablated(&list)?;
        Ok(())
    })
}

/// Scores `m` frames (row-major `m x d_v`) against a question (`d_t`) and
/// writes the `k` selected indices. `out_scores` (length `m`) receives the
/// aggregate scores and may be NULL.
///
/// # Safety
/// Every non-null pointer must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn fs_model_select(
    model: *const FsModel,
    frames: *const f64,
    m: usize,
    question: *const f64,
    k: usize,
    out_indices: *mut usize,
    out_scores: *mut f64,
) -> FsStatus {
    guard(|| {
        let fm = model.as_ref().ok_or_else(|| null("model"))?;
        let dims = fm.model.dims();
        let rows = input(frames, m * dims.d_v, "frames")?;
        let q = input(question, dims.d_t, "question")?;
        let frames = FrameSet::new("ffi", Tensor::matrix(m, dims.d_v, rows.to_vec()))?;
        let question = QuestionEmbedding::new("ffi", q.to_vec())?;
        let mut g = Graph::new();
        let nodes = score_frames(
            &mut g,
            &fm.model.store,
            &fm.model.scorer,
            &frames,
            &question,
            fm.model.mechanisms,
        )?;
        let scores = nodes.breakdown(&g).aggregate;
        let r = hard_topk(&scores, k)?;
        output(out_indices, k, "out_indices")?.copy_from_slice(&r.indices);
        if !out_scores.is_null() {
            output(out_scores, m, "out_scores")?.copy_from_slice(&scores);
        }
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_model_free(model: *mut FsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
