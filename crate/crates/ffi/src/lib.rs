//! C ABI over the subband-shake library.
//!
//! Every function returns an `int32_t` status (`SBS_OK` on success). On
//! failure the message is kept per thread and can be read with
//! `sbs_last_error_message`. Models are opaque handles owned by the caller
//! and released with `sbs_model_free`. Output buffers are caller-allocated;
//! functions that fill one take its capacity and fail with `SBS_ERR_SHAPE`
//! if it is too small.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use rand::SeedableRng;
use subband_shake::features::{extract_features, frame_count, FeatureConfig, Waveform};
use subband_shake::models::{deep_spec, load_checkpoint, save_checkpoint, shallow_spec, Model};
use subband_shake::rng::RandomStream;
use subband_shake::shake::{sample_simplex, FrameLayout, ShakeMode};
use subband_shake::train::{paired_t_test_one_sided, unweighted_accuracy};
use subband_shake::{Error, Tensor};

pub const SBS_OK: i32 = 0;
pub const SBS_ERR_NULL: i32 = 1;
pub const SBS_ERR_SHAPE: i32 = 2;
pub const SBS_ERR_PARAM: i32 = 3;
pub const SBS_ERR_DEGENERATE: i32 = 4;
pub const SBS_ERR_IO: i32 = 5;
pub const SBS_ERR_FORMAT: i32 = 6;
pub const SBS_ERR_OTHER: i32 = 7;
pub const SBS_ERR_PANIC: i32 = 8;

pub const SBS_MODEL_SHALLOW: u32 = 0;
pub const SBS_MODEL_DEEP: u32 = 1;

pub const SBS_SHAKE_NONE: u32 = 0;
pub const SBS_SHAKE_FULL: u32 = 1;
pub const SBS_SHAKE_UPPER: u32 = 2;
pub const SBS_SHAKE_LOWER: u32 = 3;
pub const SBS_SHAKE_BOTH: u32 = 4;

/// Values per spliced frame (16 context frames of 257 bins).
pub const SBS_FRAME_VALUES: usize = 16 * 257;

/// A built network.
pub struct SbsModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Shape { .. } => SBS_ERR_SHAPE,
            Error::Param(_)
            | Error::Index { .. }
            | Error::EmptySequence(_)
            | Error::BandTooNarrow { .. }
            | Error::WaveformTooShort { .. } => SBS_ERR_PARAM,
            Error::DegenerateBatch { .. } | Error::DegenerateUtterance { .. } | Error::DegenerateVariance => {
                SBS_ERR_DEGENERATE
            }
            Error::Io { .. } => SBS_ERR_IO,
            Error::Format { .. } | Error::Wav { .. } | Error::Csv { .. } => SBS_ERR_FORMAT,
            _ => SBS_ERR_OTHER,
        };
        Failure(code, e.to_string())
    }
}

fn fail(code: i32, msg: impl Into<String>) -> Failure {
    Failure(code, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SBS_OK
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SBS_ERR_PANIC
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(SBS_ERR_NULL, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(fail(SBS_ERR_NULL, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_value<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| fail(SBS_ERR_NULL, format!("{what} is null")))
}

unsafe fn model_ref<'a>(m: *mut SbsModel) -> Result<&'a mut SbsModel, Failure> {
    m.as_mut().ok_or_else(|| fail(SBS_ERR_NULL, "model handle is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(fail(SBS_ERR_NULL, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SBS_ERR_PARAM, "path is not UTF-8"))?;
    Ok(Path::new(s))
}

fn shake_mode(code: u32) -> Result<ShakeMode, Failure> {
    ShakeMode::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| fail(SBS_ERR_PARAM, format!("unknown shake mode code {code}")))
}

/// Length of the last error message on this thread, excluding the NUL.
#[no_mangle]
pub extern "C" fn sbs_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message on this thread into `buf` as a
/// NUL-terminated string, truncating to `capacity - 1` bytes.
///
/// # Safety
/// `buf` must point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sbs_last_error_message(buf: *mut c_char, capacity: usize) -> i32 {
    if buf.is_null() || capacity == 0 {
        return SBS_ERR_NULL;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(capacity - 1);
        let dst = slice::from_raw_parts_mut(buf as *mut u8, capacity);
        dst[..n].copy_from_slice(&msg.as_bytes()[..n]);
        dst[n] = 0;
    });
    SBS_OK
}

/// Builds a model with deterministic initialization from `seed`.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn sbs_model_new(kind: u32, mode: u32, seed: u64, out: *mut *mut SbsModel) -> i32 {
    guard(|| {
        let slot = out_value(out, "out")?;
        let mode = shake_mode(mode)?;
        let spec = match kind {
            SBS_MODEL_SHALLOW => shallow_spec(mode),
            SBS_MODEL_DEEP => deep_spec(mode),
            other => return Err(fail(SBS_ERR_PARAM, format!("unknown model kind {other}"))),
        };
        *slot = Box::into_raw(Box::new(SbsModel {
            model: spec.build(seed),
        }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `m` must come from `sbs_model_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sbs_model_free(m: *mut SbsModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of trainable scalars.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbs_model_parameter_count(m: *mut SbsModel, out: *mut usize) -> i32 {
    guard(|| {
        let m = model_ref(m)?;
        *out_value(out, "out")? = m.model.params().scalar_count();
        Ok(())
    })
}

/// Eval-phase logits for a batch of utterances.
///
/// `frames` holds `sum(frame_counts)` spliced frames of `SBS_FRAME_VALUES`
/// values each, utterances back to back. `logits` receives
/// `utterances * 4` values, row-major.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sbs_model_logits(
    m: *mut SbsModel,
    frames: *const f64,
    frames_len: usize,
    frame_counts: *const usize,
    utterances: usize,
    logits: *mut f64,
    logits_len: usize,
) -> i32 {
    guard(|| {
        let m = model_ref(m)?;
        let counts = input(frame_counts, utterances, "frame_counts")?;
        let layout = FrameLayout::from_frame_counts(counts)?;
        let (h, w) = m.model.spec().frame_dims;
        let need = layout.rows() * h * w;
        if frames_len != need {
            return Err(fail(
                SBS_ERR_SHAPE,
                format!("frames has {frames_len} values, expected {need}"),
            ));
        }
        let data = input(frames, frames_len, "frames")?.to_vec();
        let x = Tensor::new(&[layout.rows(), h, w], data)?;
        let out = m.model.logits(&x, &layout)?;
        let dst = output(logits, logits_len, "logits")?;
        if dst.len() < out.numel() {
            return Err(fail(
                SBS_ERR_SHAPE,
                format!("logits buffer holds {logits_len}, need {}", out.numel()),
            ));
        }
        dst[..out.numel()].copy_from_slice(out.data());
        Ok(())
    })
}

/// Writes the model's parameters and running statistics.
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sbs_model_save(m: *mut SbsModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = model_ref(m)?;
        save_checkpoint(&m.model, path_arg(path)?)?;
        Ok(())
    })
}

/// Loads a checkpoint written for a model of the same architecture.
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sbs_model_load(m: *mut SbsModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = model_ref(m)?;
        load_checkpoint(&mut m.model, path_arg(path)?)?;
        Ok(())
    })
}

/// Number of spliced frames `sbs_extract_features` produces for
/// `samples` samples at `sample_rate`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbs_feature_frame_count(samples: usize, sample_rate: u32, out: *mut usize) -> i32 {
    guard(|| {
        let cfg = FeatureConfig::default();
        let raw = frame_count(samples, cfg.window_samples(sample_rate), cfg.hop_samples(sample_rate));
        if raw == 0 {
            return Err(fail(SBS_ERR_PARAM, "waveform shorter than one analysis window"));
        }
        *out_value(out, "out")? = raw.div_ceil(cfg.downsample);
        Ok(())
    })
}

/// Spectrogram, CMVN, splicing and downsampling of a mono waveform with
/// samples in `[-1, 1]`. `out` receives `frames * SBS_FRAME_VALUES` values;
/// `frames_out` the frame count.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sbs_extract_features(
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    out: *mut f64,
    out_len: usize,
    frames_out: *mut usize,
) -> i32 {
    guard(|| {
        let wave = Waveform::new(input(samples, len, "samples")?.to_vec(), sample_rate)?;
        let seq = extract_features(&wave, &FeatureConfig::default())?;
        let dst = output(out, out_len, "out")?;
        if dst.len() < seq.frames.numel() {
            return Err(fail(
                SBS_ERR_SHAPE,
                format!("output holds {out_len}, need {}", seq.frames.numel()),
            ));
        }
        dst[..seq.frames.numel()].copy_from_slice(seq.frames.data());
        *out_value(frames_out, "frames_out")? = seq.len();
        Ok(())
    })
}

/// Draws `n` simplex coefficients from a stream seeded with `seed`.
///
/// # Safety
/// `out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn sbs_sample_simplex(n: usize, seed: u64, out: *mut f64) -> i32 {
    guard(|| {
        let mut rng = RandomStream::seed_from_u64(seed);
        let draw = sample_simplex(n, &mut rng)?;
        output(out, n, "out")?.copy_from_slice(&draw);
        Ok(())
    })
}

/// One-sided paired t-test of `mean(a - b) > 0`.
///
/// # Safety
/// `a` and `b` must hold `n` values; `t`, `df`, `p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbs_paired_t_test(
    a: *const f64,
    b: *const f64,
    n: usize,
    t: *mut f64,
    df: *mut usize,
    p: *mut f64,
) -> i32 {
    guard(|| {
        let r = paired_t_test_one_sided(input(a, n, "a")?, input(b, n, "b")?)?;
        *out_value(t, "t")? = r.t;
        *out_value(df, "df")? = r.df;
        *out_value(p, "p")? = r.p;
        Ok(())
    })
}

/// Mean per-class recall in percent.
///
/// # Safety
/// `preds` and `truth` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbs_unweighted_accuracy(
    preds: *const u32,
    truth: *const u32,
    n: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let preds: Vec<usize> = input(preds, n, "preds")?.iter().map(|&v| v as usize).collect();
        let truth: Vec<usize> = input(truth, n, "truth")?.iter().map(|&v| v as usize).collect();
        *out_value(out, "out")? = unweighted_accuracy(&preds, &truth)?;
        Ok(())
    })
}
