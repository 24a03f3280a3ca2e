//! C ABI over the mtnet synthesis library.
//!
//! Every fallible call returns an `MtnetStatus`; on failure the message is
//! available from `mtnet_last_error` on the same thread until the next call.
//! Images are row-major `float` buffers with values in [0, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mtnet::checkpoint;
use mtnet::edge::{edge_map, Detector};
use mtnet::image::{Image, Modality};
use mtnet::metrics::{nmse, psnr, ssim_global};
use mtnet::mt_net::{synthesize, MtNet};
use mtnet::nn::ParamStore;
use mtnet::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Checkpoint = 6,
    Internal = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtnetDetector {
    Sobel = 0,
    Prewitt = 1,
}

impl From<MtnetDetector> for Detector {
    fn from(d: MtnetDetector) -> Self {
        match d {
            MtnetDetector::Sobel => Detector::Sobel,
            MtnetDetector::Prewitt => Detector::Prewitt,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MtnetScores {
    pub psnr_db: f64,
    pub nmse: f64,
    pub ssim: f64,
}

/// Opaque loaded synthesizer.
pub struct MtnetSynthesizer {
    net: MtNet,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> MtnetStatus {
    match err {
        Error::Config(_) => MtnetStatus::Config,
        Error::Io { .. } => MtnetStatus::Io,
        Error::Format { .. } => MtnetStatus::Format,
        Error::Checkpoint { .. } => MtnetStatus::Checkpoint,
        _ => MtnetStatus::Internal,
    }
}

struct Failure(MtnetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MtnetStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MtnetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtnetStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside mtnet");
            MtnetStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(MtnetStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `pixels` must point to `height * width` readable floats.
unsafe fn read_image(pixels: *const f32, height: usize, width: usize, modality: Modality) -> Result<Image, Failure> {
    nonnull(pixels, "pixels")?;
    let n = height.checked_mul(width).filter(|&n| n > 0).ok_or_else(|| invalid("image must be non-empty"))?;
    let data = std::slice::from_raw_parts(pixels, n).to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("pixels must be finite"));
    }
    Ok(Image::new(height, width, data, modality, 0))
}

/// # Safety
/// `out` must point to `len` writable floats.
unsafe fn write_out(out: *mut f32, len: usize, src: &[f32]) -> Result<(), Failure> {
    nonnull(out, "out")?;
    if len < src.len() {
        return Err(invalid(format!("output buffer holds {len} floats, need {}", src.len())));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next mtnet call on this thread.
#[no_mangle]
pub extern "C" fn mtnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a synthesizer checkpoint directory into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtnet_synthesizer_load(dir: *const c_char, out: *mut *mut MtnetSynthesizer) -> MtnetStatus {
    guard(|| {
        nonnull(dir, "dir")?;
        nonnull(out, "out")?;
        *out = std::ptr::null_mut();
        let dir = CStr::from_ptr(dir).to_str().map_err(|_| invalid("dir is not valid UTF-8"))?;
        let (net, store) = checkpoint::load_synthesizer(Path::new(dir))?;
        *out = Box::into_raw(Box::new(MtnetSynthesizer { net, store }));
        Ok(())
    })
}

/// Releases a synthesizer; null is ignored.
///
/// # Safety
/// `model` must come from `mtnet_synthesizer_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtnet_synthesizer_free(model: *mut MtnetSynthesizer) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square images the synthesizer accepts.
///
/// # Safety
/// `model` must be a live handle; `size` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtnet_synthesizer_image_size(model: *const MtnetSynthesizer, size: *mut usize) -> MtnetStatus {
    guard(|| {
        nonnull(model, "model")?;
        nonnull(size, "size")?;
        *size = (*model).net.enc.image_size;
        Ok(())
    })
}

/// Synthesizes the target modality of a `height x width` source image.
///
/// # Safety
/// `source` must hold `height * width` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mtnet_synthesize(
    model: *const MtnetSynthesizer,
    source: *const f32,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> MtnetStatus {
    guard(|| {
        nonnull(model, "model")?;
        let model = &*model;
        let size = model.net.enc.image_size;
        if (height, width) != (size, size) {
            return Err(invalid(format!("model expects {size}x{size}, got {height}x{width}")));
        }
        let img = read_image(source, height, width, Modality::A)?;
        let y = synthesize(&model.store, &model.net, &img);
        write_out(out, out_len, &y.pixels)
    })
}

/// PSNR, NMSE and global SSIM of `pred` against `target`.
///
/// # Safety
/// Both buffers must hold `height * width` floats; `scores` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtnet_metrics(
    target: *const f32,
    pred: *const f32,
    height: usize,
    width: usize,
    scores: *mut MtnetScores,
) -> MtnetStatus {
    guard(|| {
        nonnull(scores, "scores")?;
        let y = read_image(target, height, width, Modality::B)?;
        let g = read_image(pred, height, width, Modality::B)?;
        *scores = MtnetScores { psnr_db: psnr(&y, &g), nmse: nmse(&y, &g), ssim: ssim_global(&y, &g) };
        Ok(())
    })
}

/// Normalized gradient-magnitude map of an image, written to `out`.
///
/// # Safety
/// `pixels` must hold `height * width` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mtnet_edge_map(
    pixels: *const f32,
    height: usize,
    width: usize,
    detector: MtnetDetector,
    out: *mut f32,
    out_len: usize,
) -> MtnetStatus {
    guard(|| {
        let img = read_image(pixels, height, width, Modality::A)?;
        write_out(out, out_len, &edge_map(&img, detector.into()).pixels)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = mtnet_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn null_pointers_are_reported() {
        let mut out = std::ptr::null_mut();
        let status = unsafe { mtnet_synthesizer_load(std::ptr::null(), &mut out) };
        assert_eq!(status, MtnetStatus::NullPointer);
        assert!(last_error().contains("dir"));
    }

    #[test]
    fn short_output_buffer_is_rejected() {
        let px = [0.5f32; 16];
        let mut out = vec![0.0f32; 8];
        let status = unsafe { mtnet_edge_map(px.as_ptr(), 4, 4, MtnetDetector::Sobel, out.as_mut_ptr(), out.len()) };
        assert_eq!(status, MtnetStatus::InvalidArgument);
    }

    #[test]
    fn success_clears_last_error() {
        let px = [0.25f32; 16];
        let mut s = MtnetScores::default();
        assert_eq!(unsafe { mtnet_metrics(px.as_ptr(), std::ptr::null(), 4, 4, &mut s) }, MtnetStatus::NullPointer);
        assert_eq!(unsafe { mtnet_metrics(px.as_ptr(), px.as_ptr(), 4, 4, &mut s) }, MtnetStatus::Ok);
        assert!(mtnet_last_error().is_null());
        assert!(s.psnr_db.is_infinite() && s.nmse == 0.0);
    }
}
