//! Face normalization: square, zoom out, crop, equalize, rotate, resize, and
//! optional half-face masking.
//!
//! Equalization always runs before rotation so the black corners introduced
//! by rotation never enter the histogram.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colornorm::equalize;
use crate::error::{Error, Result};
use crate::imagebuf::{
    crop_origin, crop_to_box, resize_bilinear, roll_angle, rotate_about, rotate_point, BoundingBox,
    FaceLandmarks, ImageBuffer, Point,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    None,
    Top,
    Bottom,
}

/// Which half of the face stays visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    Top,
    Bottom,
}

/// Face region available to the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Full,
    Top,
    Bottom,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Full, Condition::Top, Condition::Bottom];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Full => "full",
            Condition::Top => "top",
            Condition::Bottom => "bottom",
        }
    }

    pub fn mask_mode(self) -> MaskMode {
        match self {
            Condition::Full => MaskMode::None,
            Condition::Top => MaskMode::Top,
            Condition::Bottom => MaskMode::Bottom,
        }
    }

    /// `<stem>_norm.png`, `<stem>_norm_top.png` or `<stem>_norm_bottom.png`.
    pub fn file_name(self, stem: &str) -> String {
        match self {
            Condition::Full => format!("{stem}_norm.png"),
            Condition::Top => format!("{stem}_norm_top.png"),
            Condition::Bottom => format!("{stem}_norm_bottom.png"),
        }
    }

    pub fn apply(self, img: &ImageBuffer) -> ImageBuffer {
        match self {
            Condition::Full => img.clone(),
            Condition::Top => mask_half(img, Half::Top),
            Condition::Bottom => mask_half(img, Half::Bottom),
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Condition::Full),
            "top" => Ok(Condition::Top),
            "bottom" | "bot" => Ok(Condition::Bottom),
            other => Err(Error::InvalidConfig(format!("unknown condition {other:?}"))),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizeConfig {
    pub zoom_factor: f64,
    pub output_size: u32,
    pub mask_mode: MaskMode,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            zoom_factor: 1.10,
            output_size: 64,
            mask_mode: MaskMode::None,
        }
    }
}

impl NormalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zoom_factor.is_finite() && self.zoom_factor >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "zoom factor must be >= 1.0, got {}",
                self.zoom_factor
            )));
        }
        if self.output_size < 8 {
            return Err(Error::InvalidConfig(format!(
                "output size must be >= 8, got {}",
                self.output_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Crop,
    Square,
    Zoom,
    Equalize,
    Rotate,
    Resize,
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSample {
    pub image: ImageBuffer,
    /// Landmarks in output-image coordinates.
    pub landmarks: FaceLandmarks,
    pub provenance: Vec<Step>,
}

/// Intermediate rasters of one normalization run, for inspection.
#[derive(Debug, Clone)]
pub struct StageImages {
    pub cropped: ImageBuffer,
    pub equalized: ImageBuffer,
    pub rotated: ImageBuffer,
}

/// Extends the shorter side symmetrically so the box becomes square.
pub fn square_box(b: &BoundingBox) -> BoundingBox {
    let side = b.w.max(b.h);
    BoundingBox {
        x: b.x - (side - b.w) / 2.0,
        y: b.y - (side - b.h) / 2.0,
        w: side,
        h: side,
    }
}

/// Scales the box extents by `factor` about its center.
pub fn zoom_out_box(b: &BoundingBox, factor: f64) -> BoundingBox {
    let w = b.w * factor;
    let h = b.h * factor;
    BoundingBox {
        x: b.x - (w - b.w) / 2.0,
        y: b.y - (h - b.h) / 2.0,
        w,
        h,
    }
}

/// Zeroes the masked half. The split row is `height / 2` (floored), so for odd
/// heights the bottom half is one row taller.
pub fn mask_half(img: &ImageBuffer, visible: Half) -> ImageBuffer {
    let mut out = img.clone();
    let row_len = img.width() as usize * 3;
    let mid = (img.height() / 2) as usize * row_len;
    let raw = out.as_raw_mut();
    match visible {
        Half::Top => raw[mid..].fill(0),
        Half::Bottom => raw[..mid].fill(0),
    }
    out
}

fn check_in_frame(img: &ImageBuffer, lm: &FaceLandmarks) -> Result<()> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    for (name, p) in lm.points() {
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= w && p.y <= h) {
            return Err(Error::LandmarkOutOfFrame {
                name,
                x: p.x,
                y: p.y,
                width: img.width(),
                height: img.height(),
            });
        }
    }
    Ok(())
}

pub fn normalize_face(
    img: &ImageBuffer,
    b: &BoundingBox,
    lm: &FaceLandmarks,
    cfg: &NormalizeConfig,
) -> Result<NormalizedSample> {
    normalize_face_staged(img, b, lm, cfg).map(|(sample, _)| sample)
}

/// [`normalize_face`], also returning the rasters after crop, equalization,
/// and rotation.
pub fn normalize_face_staged(
    img: &ImageBuffer,
    b: &BoundingBox,
    lm: &FaceLandmarks,
    cfg: &NormalizeConfig,
) -> Result<(NormalizedSample, StageImages)> {
    cfg.validate()?;
    b.validate()?;
    lm.validate()?;
    check_in_frame(img, lm)?;

    let region = zoom_out_box(&square_box(b), cfg.zoom_factor);
    let cropped = crop_to_box(img, &region)?;
    let (ox, oy) = crop_origin(&region);
    let lm_crop = lm.map(|p| Point::new(p.x - ox as f64, p.y - oy as f64));

    let equalized = equalize(&cropped);

    let angle = roll_angle(&lm_crop)?;
    let pivot = lm_crop.nose;
    let rotated = rotate_about(&equalized, pivot, angle);
    let lm_rot = lm_crop.map(|p| rotate_point(p, pivot, angle));

    let size = cfg.output_size;
    let resized = resize_bilinear(&rotated, size, size)?;
    let sx = size as f64 / rotated.width() as f64;
    let sy = size as f64 / rotated.height() as f64;
    let landmarks = lm_rot.map(|p| Point::new(p.x * sx, p.y * sy));

    let mut provenance = vec![
        Step::Crop,
        Step::Square,
        Step::Zoom,
        Step::Equalize,
        Step::Rotate,
        Step::Resize,
    ];
    let image = match cfg.mask_mode {
        MaskMode::None => resized,
        MaskMode::Top => {
            provenance.push(Step::Mask);
            mask_half(&resized, Half::Top)
        }
        MaskMode::Bottom => {
            provenance.push(Step::Mask);
            mask_half(&resized, Half::Bottom)
        }
    };

    Ok((
        NormalizedSample {
            image,
            landmarks,
            provenance,
        },
        StageImages {
            cropped,
            equalized,
            rotated,
        },
    ))
}

/// One batch entry: source image, face box, landmarks.
pub type FaceInput = (ImageBuffer, BoundingBox, FaceLandmarks);

/// Normalizes every sample, keeping input order. Per-sample failures are
/// returned in place and do not stop the batch.
pub fn normalize_batch(
    samples: &[FaceInput],
    cfg: &NormalizeConfig,
) -> Result<Vec<Result<NormalizedSample>>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("normalization batch"));
    }
    cfg.validate()?;
    Ok(samples
        .par_iter()
        .map(|(img, b, lm)| normalize_face(img, b, lm, cfg))
        .collect())
}

/// Serial reference for [`normalize_batch`].
pub fn normalize_batch_serial(
    samples: &[FaceInput],
    cfg: &NormalizeConfig,
) -> Result<Vec<Result<NormalizedSample>>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("normalization batch"));
    }
    cfg.validate()?;
    Ok(samples
        .iter()
        .map(|(img, b, lm)| normalize_face(img, b, lm, cfg))
        .collect())
}
