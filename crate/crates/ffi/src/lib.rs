//! C ABI over the detector, non-maximum suppression and the cost model.
//!
//! Every function returns a [`TscStatus`]; on failure the message is kept per
//! thread and read with [`tsc_last_error`]. Handles are opaque and owned by
//! the caller until passed to their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tscode::cost::{compare_heads, full_scale_report, full_scale_variant};
use tscode::detection::{nms_indices, postprocess, DecodeConfig, Detection};
use tscode::harness::config::ExperimentConfig;
use tscode::harness::experiment::{CHECKPOINT_STEM, CONFIG_FILE};
use tscode::model::Detector;
use tscode::nn::ParamStore;
use tscode::{Error, Shape, Tensor4};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TscStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Divergence = 3,
    Shape = 4,
    Io = 5,
    InvalidArgument = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// One detection in input-image pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TscDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class_id: u32,
}

/// A detector with its weights and decoding settings.
pub struct TscDetector {
    detector: Detector,
    params: ParamStore,
    decode: DecodeConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> TscStatus {
    match e {
        Error::Config(_) => TscStatus::Config,
        Error::Divergence { .. } => TscStatus::Divergence,
        Error::Shape { .. } => TscStatus::Shape,
        Error::Io(_) | Error::Format(_) | Error::Json(_) => TscStatus::Io,
        Error::InvalidArgument(_) | Error::MissingParameter(_) => TscStatus::InvalidArgument,
    }
}

/// Runs `f`, recording errors and containing panics.
fn guard(f: impl FnOnce() -> Result<(), (TscStatus, String)>) -> TscStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TscStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TscStatus::Panic
        }
    }
}

fn lib<T>(r: tscode::Result<T>) -> Result<T, (TscStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (TscStatus, String) {
    (TscStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (TscStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (TscStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn build(cfg: &ExperimentConfig, params: Option<ParamStore>) -> tscode::Result<TscDetector> {
    let detector = Detector::new(&cfg.model_config()?)?;
    let params = match params {
        Some(p) => {
            detector.check_params(&p)?;
            p
        }
        None => detector.init_params(cfg.seed),
    };
    Ok(TscDetector { detector, params, decode: cfg.eval })
}

/// Copies the last error message of this thread, NUL-terminated and
/// truncated to `len` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tsc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a freshly initialized detector from TOML config text (empty text
/// means defaults).
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_detector_new(config_toml: *const c_char, out: *mut *mut TscDetector) -> TscStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(config_toml, "config_toml")?;
        let cfg = lib(ExperimentConfig::parse(text, &[]))?;
        *out = Box::into_raw(Box::new(lib(build(&cfg, None))?));
        Ok(())
    })
}

/// Loads the config and checkpoint of a finished training run.
///
/// # Safety
/// `run_dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_detector_load(run_dir: *const c_char, out: *mut *mut TscDetector) -> TscStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = Path::new(str_arg(run_dir, "run_dir")?);
        let cfg = lib(ExperimentConfig::load(&dir.join(CONFIG_FILE), &[]))?;
        let params = lib(ParamStore::load(dir.join(CHECKPOINT_STEM)))?;
        *out = Box::into_raw(Box::new(lib(build(&cfg, Some(params)))?));
        Ok(())
    })
}

/// # Safety
/// `det` must be null or come from a constructor above, freed once.
#[no_mangle]
pub unsafe extern "C" fn tsc_detector_free(det: *mut TscDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// # Safety
/// `det` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_detector_num_classes(det: *const TscDetector, out: *mut u32) -> TscStatus {
    guard(|| {
        let (Some(d), false) = (det.as_ref(), out.is_null()) else { return Err(null("det or out")) };
        *out = d.detector.num_classes() as u32;
        Ok(())
    })
}

/// Detects objects in one planar RGB image (`3 × height × width` values,
/// channel-major). Writes up to `capacity` detections, best first, and the
/// number found to `count`; returns `BufferTooSmall` if they did not fit.
///
/// # Safety
/// `image` must hold `3·height·width` values; `out` must hold `capacity`
/// entries (or be null with `capacity` 0); `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_detect(
    det: *const TscDetector,
    image: *const f64,
    height: usize,
    width: usize,
    out: *mut TscDetection,
    capacity: usize,
    count: *mut usize,
) -> TscStatus {
    guard(|| {
        let d = det.as_ref().ok_or_else(|| null("det"))?;
        if image.is_null() || count.is_null() || (out.is_null() && capacity > 0) {
            return Err(null("image, out or count"));
        }
        let n = 3usize
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| (TscStatus::InvalidArgument, "image size overflows".to_string()))?;
        let data = std::slice::from_raw_parts(image, n).to_vec();
        let x = lib(Tensor4::new(Shape::new(1, 3, height, width), data))?;
        let preds = lib(d.detector.predict(&d.params, &x))?;
        let dets = postprocess(&preds, 0, height, width, &d.decode);
        *count = dets.len();
        for (i, det) in dets.iter().take(capacity).enumerate() {
            *out.add(i) = TscDetection {
                x1: det.bbox[0],
                y1: det.bbox[1],
                x2: det.bbox[2],
                y2: det.bbox[3],
                score: det.score,
                class_id: det.class as u32,
            };
        }
        if dets.len() > capacity {
            return Err((TscStatus::BufferTooSmall, format!("{} detections, capacity {capacity}", dets.len())));
        }
        Ok(())
    })
}

/// Class-aware greedy suppression. Writes the kept input indices, highest
/// score first, to `keep` and their number to `kept`; `keep` must hold `n`.
///
/// # Safety
/// `dets` and `keep` must hold `n` entries; `kept` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_nms(
    dets: *const TscDetection,
    n: usize,
    iou_threshold: f64,
    keep: *mut usize,
    kept: *mut usize,
) -> TscStatus {
    guard(|| {
        if kept.is_null() || (n > 0 && (dets.is_null() || keep.is_null())) {
            return Err(null("dets, keep or kept"));
        }
        if !(0.0..=1.0).contains(&iou_threshold) {
            return Err((TscStatus::InvalidArgument, format!("iou threshold {iou_threshold} outside [0, 1]")));
        }
        let input: Vec<Detection> = if n == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(dets, n)
                .iter()
                .map(|d| Detection { bbox: [d.x1, d.y1, d.x2, d.y2], score: d.score, class: d.class_id as usize })
                .collect()
        };
        let idx = nms_indices(&input, iou_threshold);
        for (i, &k) in idx.iter().enumerate() {
            *keep.add(i) = k;
        }
        *kept = idx.len();
        Ok(())
    })
}

/// Full-scale (ResNet-50, 1280×800, 256 channels, 80 classes) totals for a
/// named head: `decoupled`, `coupled`, `tscode`, `sce-only` or `dpe-only`.
/// `delta_gflops` is the head's difference from the decoupled head.
///
/// # Safety
/// `head` must be a NUL-terminated string; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsc_full_scale_cost(
    head: *const c_char,
    gflops: *mut f64,
    params: *mut u64,
    delta_gflops: *mut f64,
) -> TscStatus {
    guard(|| {
        if gflops.is_null() || params.is_null() || delta_gflops.is_null() {
            return Err(null("output"));
        }
        let name = str_arg(head, "head")?;
        let r = lib(full_scale_variant(name).and_then(|v| full_scale_report(&v)))?;
        let base = lib(full_scale_variant("decoupled").and_then(|v| full_scale_report(&v)))?;
        *gflops = r.gflops();
        *params = r.total_params;
        *delta_gflops = lib(compare_heads(&base, &r))?.delta_gflops();
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_codes_match_cli_exit_codes() {
        assert_eq!(TscStatus::Config as i32, 2);
        assert_eq!(TscStatus::Divergence as i32, 3);
        assert_eq!(status_of(&Error::Config("x".into())), TscStatus::Config);
    }
}
