//! C ABI over `facepipe`.
//!
//! Every fallible function returns an [`FpStatus`]; on failure a message is
//! available from [`fp_last_error`] on the same thread. Images are opaque
//! [`FpImage`] handles owned by the caller and released with
//! [`fp_image_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use facepipe::colornorm::equalize;
use facepipe::dataset::EmotionLabel;
use facepipe::imagebuf::{rotate_about, BoundingBox, FaceLandmarks, ImageBuffer, Point};
use facepipe::metrics::{accuracy, confusion, mean_sensitivity, sensitivity_sd, ConfusionMatrix};
use facepipe::pipeline::{mask_half, normalize_face, Half, MaskMode, NormalizeConfig};
use facepipe::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Geometry = 4,
    Undefined = 5,
    Panic = 6,
}

/// Which half of the image stays visible.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpHalf {
    Top = 0,
    Bottom = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpPoint {
    pub x: f64,
    pub y: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpLandmarks {
    pub left_eye: FpPoint,
    pub right_eye: FpPoint,
    pub nose: FpPoint,
}

/// Opaque RGB8 image.
pub struct FpImage {
    inner: ImageBuffer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> FpStatus {
    match err {
        Error::Io { .. } | Error::Image { .. } | Error::MissingImage { .. } => FpStatus::Io,
        Error::InvalidBox(_) | Error::DegenerateLandmarks(_) | Error::LandmarkOutOfFrame { .. } => {
            FpStatus::Geometry
        }
        Error::Undefined(_) => FpStatus::Undefined,
        _ => FpStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (FpStatus, String)>) -> FpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FpStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FpStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (FpStatus, String) {
    (FpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn image_ref<'a>(img: *const FpImage) -> Result<&'a ImageBuffer, (FpStatus, String)> {
    img.as_ref().map(|i| &i.inner).ok_or_else(|| null("image"))
}

unsafe fn put_image(out: *mut *mut FpImage, img: ImageBuffer) -> Result<(), (FpStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(FpImage { inner: img }));
    Ok(())
}

unsafe fn path_arg(path: *const c_char) -> Result<String, (FpStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_string)
        .map_err(|_| {
            (
                FpStatus::InvalidArgument,
                "path is not valid UTF-8".to_string(),
            )
        })
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates an image from `len = width * height * 3` interleaved RGB bytes.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_image_new(
    width: u32,
    height: u32,
    data: *const u8,
    len: usize,
    out: *mut *mut FpImage,
) -> FpStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let bytes = std::slice::from_raw_parts(data, len).to_vec();
        put_image(
            out,
            ImageBuffer::new(width, height, bytes).map_err(lib_err)?,
        )
    })
}

/// Releases an image. Null is ignored.
///
/// # Safety
/// `img` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fp_image_free(img: *mut FpImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_image_load_png(
    path: *const c_char,
    out: *mut *mut FpImage,
) -> FpStatus {
    guard(|| {
        let path = path_arg(path)?;
        put_image(out, ImageBuffer::load_png(path).map_err(lib_err)?)
    })
}

/// # Safety
/// `img` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fp_image_save_png(img: *const FpImage, path: *const c_char) -> FpStatus {
    guard(|| {
        let img = image_ref(img)?;
        img.save_png(path_arg(path)?).map_err(lib_err)
    })
}

/// Width in pixels, 0 for a null handle.
///
/// # Safety
/// `img` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_image_width(img: *const FpImage) -> u32 {
    img.as_ref().map_or(0, |i| i.inner.width())
}

/// Height in pixels, 0 for a null handle.
///
/// # Safety
/// `img` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_image_height(img: *const FpImage) -> u32 {
    img.as_ref().map_or(0, |i| i.inner.height())
}

/// Borrowed pointer to the interleaved RGB bytes; `len` receives their
/// count. Valid while the handle lives.
///
/// # Safety
/// `img` must be null or a live handle; `len` null or writable.
#[no_mangle]
pub unsafe extern "C" fn fp_image_data(img: *const FpImage, len: *mut usize) -> *const u8 {
    match img.as_ref() {
        Some(i) => {
            if !len.is_null() {
                *len = i.inner.as_raw().len();
            }
            i.inner.as_raw().as_ptr()
        }
        None => {
            if !len.is_null() {
                *len = 0;
            }
            ptr::null()
        }
    }
}

/// Per-channel histogram equalization into a new image.
///
/// # Safety
/// `img` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_equalize(img: *const FpImage, out: *mut *mut FpImage) -> FpStatus {
    guard(|| put_image(out, equalize(image_ref(img)?)))
}

/// Zeroes the half opposite to `visible` into a new image.
///
/// # Safety
/// `img` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_mask_half(
    img: *const FpImage,
    visible: FpHalf,
    out: *mut *mut FpImage,
) -> FpStatus {
    guard(|| {
        let half = match visible {
            FpHalf::Top => Half::Top,
            FpHalf::Bottom => Half::Bottom,
        };
        put_image(out, mask_half(image_ref(img)?, half))
    })
}

/// Rotates about `center` (radians, bilinear, black corners).
///
/// # Safety
/// `img` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_rotate_about(
    img: *const FpImage,
    center: FpPoint,
    angle: f64,
    out: *mut *mut FpImage,
) -> FpStatus {
    guard(|| {
        if !(center.x.is_finite() && center.y.is_finite() && angle.is_finite()) {
            return Err((FpStatus::InvalidArgument, "non-finite rotation".into()));
        }
        put_image(
            out,
            rotate_about(image_ref(img)?, Point::new(center.x, center.y), angle),
        )
    })
}

fn point(p: FpPoint) -> Point {
    Point::new(p.x, p.y)
}

fn fp_point(p: Point) -> FpPoint {
    FpPoint { x: p.x, y: p.y }
}

/// Full face normalization: square, zoom out, crop, equalize, level the
/// eyes, resize to `size x size`. `out_landmarks` (optional) receives the
/// landmarks in output coordinates.
///
/// # Safety
/// `img` must be a live handle; `out` writable; `out_landmarks` null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fp_normalize_face(
    img: *const FpImage,
    face: FpBox,
    landmarks: FpLandmarks,
    zoom: f64,
    size: u32,
    out: *mut *mut FpImage,
    out_landmarks: *mut FpLandmarks,
) -> FpStatus {
    guard(|| {
        let img = image_ref(img)?;
        let b = BoundingBox::new(face.x, face.y, face.w, face.h).map_err(lib_err)?;
        let lm = FaceLandmarks::new(
            point(landmarks.left_eye),
            point(landmarks.right_eye),
            point(landmarks.nose),
        )
        .map_err(lib_err)?;
        let cfg = NormalizeConfig {
            zoom_factor: zoom,
            output_size: size,
            mask_mode: MaskMode::None,
        };
        let sample = normalize_face(img, &b, &lm, &cfg).map_err(lib_err)?;
        if !out_landmarks.is_null() {
            *out_landmarks = FpLandmarks {
                left_eye: fp_point(sample.landmarks.left_eye),
                right_eye: fp_point(sample.landmarks.right_eye),
                nose: fp_point(sample.landmarks.nose),
            };
        }
        put_image(out, sample.image)
    })
}

/// Builds a confusion matrix from parallel class-index arrays.
unsafe fn matrix(
    predicted: *const u32,
    truth: *const u32,
    n: usize,
    num_classes: u32,
) -> Result<ConfusionMatrix, (FpStatus, String)> {
    if predicted.is_null() || truth.is_null() {
        return Err(null("label array"));
    }
    let k = num_classes as usize;
    if !(1..=EmotionLabel::CLASSES.len()).contains(&k) {
        return Err((
            FpStatus::InvalidArgument,
            format!("num_classes must be 1..=8, got {num_classes}"),
        ));
    }
    let classes = &EmotionLabel::CLASSES[..k];
    let predicted = std::slice::from_raw_parts(predicted, n);
    let truth = std::slice::from_raw_parts(truth, n);
    let mut pairs = Vec::with_capacity(n);
    for (&p, &t) in predicted.iter().zip(truth) {
        if p as usize >= k || t as usize >= k {
            return Err((
                FpStatus::InvalidArgument,
                format!("class index out of range 0..{k}"),
            ));
        }
        pairs.push((classes[p as usize], classes[t as usize]));
    }
    confusion(&pairs, classes).map_err(lib_err)
}

unsafe fn metric(
    predicted: *const u32,
    truth: *const u32,
    n: usize,
    num_classes: u32,
    out: *mut f64,
    f: fn(&ConfusionMatrix) -> facepipe::Result<f64>,
) -> FpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let cm = matrix(predicted, truth, n, num_classes)?;
        *out = f(&cm).map_err(lib_err)?;
        Ok(())
    })
}

/// Overall accuracy of `n` (predicted, true) class indices.
///
/// # Safety
/// `predicted` and `truth` must point to `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_accuracy(
    predicted: *const u32,
    truth: *const u32,
    n: usize,
    num_classes: u32,
    out: *mut f64,
) -> FpStatus {
    metric(predicted, truth, n, num_classes, out, accuracy)
}

/// Unweighted mean of per-class sensitivities over classes with support.
///
/// # Safety
/// `predicted` and `truth` must point to `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_mean_sensitivity(
    predicted: *const u32,
    truth: *const u32,
    n: usize,
    num_classes: u32,
    out: *mut f64,
) -> FpStatus {
    metric(predicted, truth, n, num_classes, out, mean_sensitivity)
}

/// Sample standard deviation of per-class sensitivities.
///
/// # Safety
/// `predicted` and `truth` must point to `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_sensitivity_sd(
    predicted: *const u32,
    truth: *const u32,
    n: usize,
    num_classes: u32,
    out: *mut f64,
) -> FpStatus {
    metric(predicted, truth, n, num_classes, out, sensitivity_sd)
}
