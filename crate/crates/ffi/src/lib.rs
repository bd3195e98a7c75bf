//! C ABI over `advlab`.
//!
//! Every fallible function returns an [`AdvlabStatus`]; on failure the message
//! is available from [`advlab_last_error_message`] on the same thread until the
//! next failing call. Models and datasets are opaque handles that must be
//! released with their `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use advlab::attack::{self, AttackConfig, PgdOperator};
use advlab::bound::{self, BoundInputs};
use advlab::data::{self, BlobsConfig, LabeledDataset};
use advlab::harness::checkpoint;
use advlab::metrics::{self, McConfig};
use advlab::models::{self, ModelSpec, Params};
use advlab::training::{self, Checkpoint, TrainConfig};
use advlab::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Io = 5,
    ChecksumMismatch = 6,
    UnsupportedVersion = 7,
    CorruptCheckpoint = 8,
    Numerical = 9,
    Panic = 10,
}

/// Trained or freshly initialised model parameters.
pub struct AdvlabParams {
    inner: Params,
}

/// Labelled dataset of flat input vectors.
pub struct AdvlabDataset {
    inner: LabeledDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(AdvlabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } | Error::DataLength { .. } => AdvlabStatus::ShapeMismatch,
            Error::NonFinite(_) | Error::Divergence { .. } => AdvlabStatus::NonFinite,
            Error::Io { .. } => AdvlabStatus::Io,
            Error::ChecksumMismatch => AdvlabStatus::ChecksumMismatch,
            Error::UnsupportedVersion(_) => AdvlabStatus::UnsupportedVersion,
            Error::CorruptCheckpoint(_) | Error::SpecMismatch(_) | Error::Truncated { .. } | Error::BadMagic { .. } => {
                AdvlabStatus::CorruptCheckpoint
            }
            Error::AllPairsSkipped { .. } | Error::NotInterpolated { .. } | Error::InsufficientSamples { .. } => {
                AdvlabStatus::Numerical
            }
            _ => AdvlabStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AdvlabStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(AdvlabStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AdvlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdvlabStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            AdvlabStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn params_ref<'a>(p: *const AdvlabParams) -> Result<&'a Params, Failure> {
    p.as_ref().map(|h| &h.inner).ok_or_else(|| null("params"))
}

unsafe fn dataset_ref<'a>(d: *const AdvlabDataset) -> Result<&'a LabeledDataset, Failure> {
    d.as_ref().map(|h| &h.inner).ok_or_else(|| null("dataset"))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

unsafe fn path_in(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn input_for(params: &Params, x: *const f64, len: usize) -> Result<Tensor, Failure> {
    let dim = params.spec().input_dim();
    if len != dim {
        return Err(Failure(
            AdvlabStatus::ShapeMismatch,
            format!("input has {len} values, model expects {dim}"),
        ));
    }
    let data = slice_in(x, len, "input")?.to_vec();
    Ok(Tensor::new(params.spec().input_shape.clone(), data)?)
}

fn box_params(p: Params) -> *mut AdvlabParams {
    Box::into_raw(Box::new(AdvlabParams { inner: p }))
}

/// Message of the most recent failure on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn advlab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn advlab_status_name(status: AdvlabStatus) -> *const c_char {
    let s: &'static CStr = match status {
        AdvlabStatus::Ok => c"ok",
        AdvlabStatus::NullPointer => c"null pointer",
        AdvlabStatus::InvalidArgument => c"invalid argument",
        AdvlabStatus::ShapeMismatch => c"shape mismatch",
        AdvlabStatus::NonFinite => c"non-finite value",
        AdvlabStatus::Io => c"i/o error",
        AdvlabStatus::ChecksumMismatch => c"checksum mismatch",
        AdvlabStatus::UnsupportedVersion => c"unsupported version",
        AdvlabStatus::CorruptCheckpoint => c"corrupt checkpoint",
        AdvlabStatus::Numerical => c"numerical failure",
        AdvlabStatus::Panic => c"panic",
    };
    s.as_ptr()
}

/// Generalisation bound for the given constants.
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn advlab_theorem_bound(
    beta: f64,
    loss_bound: f64,
    dim: usize,
    epsilon: f64,
    m: usize,
    eld: f64,
    tau: f64,
    out: *mut f64,
) -> AdvlabStatus {
    guard(|| {
        let v = bound::theorem_bound(&BoundInputs {
            beta,
            loss_bound,
            dim,
            epsilon,
            m,
            eld,
            tau,
        })?;
        write_out(out, v, "out")
    })
}

/// Initialises an MLP with layer widths `widths[0..n_widths]`.
///
/// # Safety
/// `widths` must point to `n_widths` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_params_new_mlp(
    widths: *const usize,
    n_widths: usize,
    seed: u64,
    out: *mut *mut AdvlabParams,
) -> AdvlabStatus {
    guard(|| {
        let w = slice_in(widths, n_widths, "widths")?.to_vec();
        let p = models::init(&ModelSpec::mlp(w), seed)?;
        write_out(out, box_params(p), "out")
    })
}

/// Initialises the small CNN over `channels x height x width` inputs.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_params_new_small_cnn(
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut AdvlabParams,
) -> AdvlabStatus {
    guard(|| {
        let p = models::init(&ModelSpec::small_cnn([channels, height, width], classes), seed)?;
        write_out(out, box_params(p), "out")
    })
}

/// # Safety
/// `params` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advlab_params_free(params: *mut AdvlabParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn advlab_params_num_params(params: *const AdvlabParams) -> usize {
    params.as_ref().map_or(0, |h| h.inner.num_params())
}

/// Flattened input length, or 0 for a null handle.
///
/// # Safety
/// `params` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn advlab_params_input_dim(params: *const AdvlabParams) -> usize {
    params.as_ref().map_or(0, |h| h.inner.spec().input_dim())
}

/// Predicted class of one input.
///
/// # Safety
/// `x` must point to `len` values; `out_label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_params_predict(
    params: *const AdvlabParams,
    x: *const f64,
    len: usize,
    out_label: *mut usize,
) -> AdvlabStatus {
    guard(|| {
        let p = params_ref(params)?;
        let label = p.predict(&input_for(p, x, len)?)?;
        write_out(out_label, label, "out_label")
    })
}

/// Cross-entropy loss of one labelled input.
///
/// # Safety
/// `x` must point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_params_loss(
    params: *const AdvlabParams,
    x: *const f64,
    len: usize,
    label: usize,
    out: *mut f64,
) -> AdvlabStatus {
    guard(|| {
        let p = params_ref(params)?;
        let v = p.loss(&input_for(p, x, len)?, label)?;
        write_out(out, v, "out")
    })
}

/// `steps` PGD steps from the clean point; writes the adversarial input to
/// `out[0..len]`.
///
/// # Safety
/// `x` must point to `len` readable values and `out` to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn advlab_pgd(
    params: *const AdvlabParams,
    x: *const f64,
    len: usize,
    label: usize,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    out: *mut f64,
) -> AdvlabStatus {
    guard(|| {
        let p = params_ref(params)?;
        let xt = input_for(p, x, len)?;
        let cfg = AttackConfig::new(epsilon, step_size, steps);
        cfg.validate()?;
        let adv = attack::pgd_k(&xt, &xt, label, p, &cfg)?;
        if out.is_null() {
            return Err(null("out"));
        }
        slice::from_raw_parts_mut(out, len).copy_from_slice(adv.data());
        Ok(())
    })
}

/// Monte Carlo local dispersion of the PGD operator at one input, with its
/// standard error.
///
/// # Safety
/// `x` must point to `len` values; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_local_dispersion(
    params: *const AdvlabParams,
    x: *const f64,
    len: usize,
    label: usize,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    n_pairs: usize,
    seed: u64,
    out_value: *mut f64,
    out_std_error: *mut f64,
) -> AdvlabStatus {
    guard(|| {
        let p = params_ref(params)?;
        let xt = input_for(p, x, len)?;
        let cfg = AttackConfig::new(epsilon, step_size, steps);
        cfg.validate()?;
        let op = PgdOperator::new(p, cfg);
        let est = metrics::local_dispersion(&xt, label, &op, &McConfig::new(n_pairs, seed))?;
        write_out(out_value, est.value, "out_value")?;
        write_out(out_std_error, est.std_error, "out_std_error")
    })
}

/// Dataset from `n` row-major inputs of length `dim` and their labels.
///
/// # Safety
/// `inputs` must point to `n * dim` values, `labels` to `n` values.
#[no_mangle]
pub unsafe extern "C" fn advlab_dataset_new(
    inputs: *const f64,
    n: usize,
    dim: usize,
    labels: *const usize,
    classes: usize,
    out: *mut *mut AdvlabDataset,
) -> AdvlabStatus {
    guard(|| {
        let total = n.checked_mul(dim).ok_or_else(|| invalid("n * dim overflows"))?;
        let xs = slice_in(inputs, total, "inputs")?;
        let ys = slice_in(labels, n, "labels")?.to_vec();
        let rows = (0..n).map(|i| Tensor::vector(xs[i * dim..(i + 1) * dim].to_vec())).collect();
        let ds = LabeledDataset::new("ffi", rows, ys, classes)?;
        write_out(out, Box::into_raw(Box::new(AdvlabDataset { inner: ds })), "out")
    })
}

/// Gaussian blobs on a lattice in `[0, 1]^dim`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_dataset_blobs(
    dim: usize,
    classes: usize,
    n_per_class: usize,
    separation: f64,
    spread: f64,
    seed: u64,
    out: *mut *mut AdvlabDataset,
) -> AdvlabStatus {
    guard(|| {
        let cfg = BlobsConfig {
            dim,
            classes,
            n_per_class,
            separation,
            spread,
            smoothing_epsilon: None,
        };
        let ds = data::gen_blobs(&cfg, seed)?;
        write_out(out, Box::into_raw(Box::new(AdvlabDataset { inner: ds })), "out")
    })
}

/// # Safety
/// `dataset` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn advlab_dataset_free(dataset: *mut AdvlabDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of examples, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn advlab_dataset_len(dataset: *const AdvlabDataset) -> usize {
    dataset.as_ref().map_or(0, |h| h.inner.len())
}

/// PGD adversarial training of an MLP; `epsilon = 0` is standard training.
///
/// # Safety
/// `widths` must point to `n_widths` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_pgd_at_train_mlp(
    widths: *const usize,
    n_widths: usize,
    dataset: *const AdvlabDataset,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    seed: u64,
    out: *mut *mut AdvlabParams,
) -> AdvlabStatus {
    guard(|| {
        let spec = ModelSpec::mlp(slice_in(widths, n_widths, "widths")?.to_vec());
        let ds = dataset_ref(dataset)?;
        let mut cfg = TrainConfig::new(epochs, batch_size, learning_rate, seed);
        cfg.schedule.clear();
        let atk = AttackConfig::new(epsilon, step_size, steps);
        let traj = training::pgd_at_train(&spec, ds, &cfg, &atk)?;
        write_out(out, box_params(traj.final_params), "out")
    })
}

/// Clean and robust error of `params` on `dataset`.
///
/// # Safety
/// Both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_eval_errors(
    params: *const AdvlabParams,
    dataset: *const AdvlabDataset,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    seed: u64,
    out_standard: *mut f64,
    out_robust: *mut f64,
) -> AdvlabStatus {
    guard(|| {
        let p = params_ref(params)?;
        let ds = dataset_ref(dataset)?;
        let atk = AttackConfig::new(epsilon, step_size, steps);
        let r = training::eval_errors(p, ds, Some(&atk), seed)?;
        write_out(out_standard, r.standard_error, "out_standard")?;
        write_out(out_robust, r.robust_error, "out_robust")
    })
}

/// Writes `params` as the checkpoint at epoch `t`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn advlab_checkpoint_save(params: *const AdvlabParams, t: usize, path: *const c_char) -> AdvlabStatus {
    guard(|| {
        let ck = Checkpoint {
            t,
            params: params_ref(params)?.clone(),
            metrics: Vec::new(),
        };
        Ok(checkpoint::save_checkpoint(&path_in(path)?, &ck)?)
    })
}

/// Loads a checkpoint, verifying its checksum.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn advlab_checkpoint_load(
    path: *const c_char,
    out_params: *mut *mut AdvlabParams,
    out_t: *mut usize,
) -> AdvlabStatus {
    guard(|| {
        if out_params.is_null() {
            return Err(null("out_params"));
        }
        let ck = checkpoint::load_checkpoint(&path_in(path)?)?;
        write_out(out_t, ck.t, "out_t")?;
        write_out(out_params, box_params(ck.params), "out_params")
    })
}
