//! C ABI over the `rgba-dit` sampler and metrics.
//!
//! Every fallible function returns an `int32_t` status: `RD_OK` or one of
//! the `RD_ERR_*` codes. The message of the last failure on the calling
//! thread is available from `rd_last_error`. Handles are opaque and owned by
//! the caller until passed to the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rgba_dit::cli::{sample_video, ExperimentConfig};
use rgba_dit::dataset::{read_video_dir, RgbaVideo};
use rgba_dit::diffusion::SamplerConfig;
use rgba_dit::metrics::{alpha_alignment_iou, video_flow_difference};
use rgba_dit::model::{checkpoint, DiT};
use rgba_dit::Error;

pub const RD_OK: i32 = 0;
/// Null pointer, bad UTF-8 or undersized buffer.
pub const RD_ERR_ARGUMENT: i32 = 1;
pub const RD_ERR_DIMENSION: i32 = 2;
pub const RD_ERR_CONFIG: i32 = 3;
pub const RD_ERR_NUMERIC: i32 = 4;
pub const RD_ERR_CONTRACT: i32 = 5;
/// Not enough data to produce a value, e.g. an IoU with no foreground.
pub const RD_ERR_NO_DATA: i32 = 6;
pub const RD_ERR_FORMAT: i32 = 7;
pub const RD_ERR_IO: i32 = 8;
pub const RD_ERR_PANIC: i32 = 9;

/// Experiment configuration.
pub struct RdConfig {
    inner: ExperimentConfig,
}

/// A loaded checkpoint.
pub struct RdModel {
    inner: DiT,
}

/// An RGBA video, straight alpha, values in [0, 1].
pub struct RdVideo {
    inner: RgbaVideo,
}

/// Static facts about a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RdModelInfo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// 0 for an RGB-only base model, 1 for a model that also generates alpha.
    pub has_alpha: i32,
    pub trainable_params: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(e.code(), e.to_string())
    }
}

fn argument(msg: &str) -> Fail {
    Fail(RD_ERR_ARGUMENT, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RD_OK,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            RD_ERR_PANIC
        }
    }
}

unsafe fn string_arg(p: *const c_char, what: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(argument(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| argument(&format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| argument(&format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| argument(&format!("{what} is null")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a config: defaults, then the TOML file at `path` (may be null),
/// then `n_overrides` `key=value` strings.
///
/// # Safety
/// `path` is null or a NUL-terminated string; `overrides` points to
/// `n_overrides` such strings (or is null when `n_overrides` is 0); `out`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_config_load(
    path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut RdConfig,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = if path.is_null() { None } else { Some(PathBuf::from(string_arg(path, "path")?)) };
        if overrides.is_null() && n_overrides > 0 {
            return Err(argument("overrides is null"));
        }
        let mut sets = Vec::with_capacity(n_overrides);
        for i in 0..n_overrides {
            sets.push(string_arg(*overrides.add(i), "override")?);
        }
        let inner = ExperimentConfig::load(path.as_deref(), &sets)?;
        *out = Box::into_raw(Box::new(RdConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `config` is null or came from `rd_config_load` and is not used again.
#[no_mangle]
pub unsafe extern "C" fn rd_config_free(config: *mut RdConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// # Safety
/// `path` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_model_load(path: *const c_char, out: *mut *mut RdModel) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(string_arg(path, "path")?);
        let inner = checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(RdModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or came from `rd_model_load` and is not used again.
#[no_mangle]
pub unsafe extern "C" fn rd_model_free(model: *mut RdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` is a live handle and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_model_info(model: *const RdModel, out: *mut RdModelInfo) -> i32 {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let out = out_arg(out, "out")?;
        let c = m.config();
        *out = RdModelInfo {
            frames: c.frames,
            height: c.height,
            width: c.width,
            has_alpha: m.design().is_some() as i32,
            trainable_params: m.params().trainable_count(),
        };
        Ok(())
    })
}

/// Samples one video for class `cond_id`. `steps == 0` uses the config's
/// sampler steps. The config's model section must match the checkpoint.
///
/// # Safety
/// `model` and `config` are live handles and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_sample(
    model: *const RdModel,
    config: *const RdConfig,
    cond_id: usize,
    seed: u64,
    steps: usize,
    out: *mut *mut RdVideo,
) -> i32 {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let cfg = &handle(config, "config")?.inner;
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if m.config() != &cfg.model {
            return Err(Fail(RD_ERR_CONFIG, "config model section does not match the checkpoint".into()));
        }
        let sampler = SamplerConfig { steps: if steps == 0 { cfg.sampler.steps } else { steps }, seed };
        let inner = sample_video(m, cfg, cond_id, &sampler)?;
        *out = Box::into_raw(Box::new(RdVideo { inner }));
        Ok(())
    })
}

/// Reads a video directory (numbered RGBA frames plus `video.json`).
///
/// # Safety
/// `dir` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_video_read_dir(dir: *const c_char, out: *mut *mut RdVideo) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dir = PathBuf::from(string_arg(dir, "dir")?);
        let (inner, _, _) = read_video_dir(&dir)?;
        *out = Box::into_raw(Box::new(RdVideo { inner }));
        Ok(())
    })
}

/// # Safety
/// `video` is null or came from this library and is not used again.
#[no_mangle]
pub unsafe extern "C" fn rd_video_free(video: *mut RdVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// # Safety
/// `video` is a live handle; the out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn rd_video_dims(
    video: *const RdVideo,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> i32 {
    guard(|| {
        let v = &handle(video, "video")?.inner;
        *out_arg(frames, "frames")? = v.frames();
        *out_arg(height, "height")? = v.height();
        *out_arg(width, "width")? = v.width();
        Ok(())
    })
}

/// Copies the samples, frame-major then row-major, four per pixel.
/// `len` must be at least `frames * height * width * 4`.
///
/// # Safety
/// `video` is a live handle and `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rd_video_copy_rgba(video: *const RdVideo, buf: *mut f64, len: usize) -> i32 {
    guard(|| {
        let data = handle(video, "video")?.inner.data();
        if buf.is_null() {
            return Err(argument("buf is null"));
        }
        if len < data.len() {
            return Err(argument(&format!("buffer holds {len} values, video has {}", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// Mean flow difference between the RGB and alpha streams, with the
/// config's flow parameters fitted to the frame size.
///
/// # Safety
/// `video` and `config` are live handles and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_video_flow_difference(
    video: *const RdVideo,
    config: *const RdConfig,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let v = &handle(video, "video")?.inner;
        let cfg = &handle(config, "config")?.inner;
        let out = out_arg(out, "out")?;
        *out = video_flow_difference(v, &cfg.eval.flow_for(v.height(), v.width()))?;
        Ok(())
    })
}

/// IoU between the thresholded alpha and the foreground derived from RGB.
///
/// # Safety
/// `video` and `config` are live handles and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rd_video_alignment_iou(video: *const RdVideo, config: *const RdConfig, out: *mut f64) -> i32 {
    guard(|| {
        let v = &handle(video, "video")?.inner;
        let cfg = &handle(config, "config")?.inner;
        let out = out_arg(out, "out")?;
        *out = alpha_alignment_iou(v, cfg.eval.iou_threshold)?;
        Ok(())
    })
}
