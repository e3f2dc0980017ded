//! Raster, geometry, and landmark primitives.
//!
//! Continuous coordinates put the origin at the top-left corner of the
//! top-left pixel, with `y` growing downward. Pixel `(col, row)` covers the
//! unit square whose center is `(col + 0.5, row + 0.5)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BLACK: [u8; 3] = [0, 0, 0];

/// An 8-bit, 3-channel raster stored row-major with interleaved RGB samples.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "image dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::SampleCount {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for row in 0..height {
            for col in 0..width {
                data.extend_from_slice(&f(col, row));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    fn offset(&self, col: u32, row: u32) -> usize {
        (row as usize * self.width as usize + col as usize) * 3
    }

    /// # Panics
    /// If `(col, row)` is outside the image.
    #[inline]
    pub fn pixel(&self, col: u32, row: u32) -> [u8; 3] {
        assert!(col < self.width && row < self.height, "pixel out of bounds");
        let o = self.offset(col, row);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Pixel at signed coordinates, black outside the frame.
    #[inline]
    pub fn pixel_or_black(&self, col: i64, row: i64) -> [u8; 3] {
        if col < 0 || row < 0 || col >= self.width as i64 || row >= self.height as i64 {
            BLACK
        } else {
            self.pixel(col as u32, row as u32)
        }
    }

    #[inline]
    pub fn put_pixel(&mut self, col: u32, row: u32, rgb: [u8; 3]) {
        assert!(col < self.width && row < self.height, "pixel out of bounds");
        let o = self.offset(col, row);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn as_raw_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    /// Iterates the samples of one channel (0 = R, 1 = G, 2 = B) in raster order.
    pub fn channel_samples(&self, channel: usize) -> impl Iterator<Item = u8> + '_ {
        self.data.iter().skip(channel).step_by(3).copied()
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = decoded.into_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned box given by its top-left corner and extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite box {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got {}x{}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// Eye centers and nose tip. `left_eye` is the eye on the image-left side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceLandmarks {
    pub left_eye: Point,
    pub right_eye: Point,
    pub nose: Point,
}

impl FaceLandmarks {
    pub fn new(left_eye: Point, right_eye: Point, nose: Point) -> Result<Self> {
        let lm = Self {
            left_eye,
            right_eye,
            nose,
        };
        lm.validate()?;
        Ok(lm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.left_eye.is_finite() && self.right_eye.is_finite() && self.nose.is_finite()) {
            return Err(Error::DegenerateLandmarks("non-finite coordinate".into()));
        }
        let dx = (self.right_eye.x - self.left_eye.x).abs();
        let dy = (self.right_eye.y - self.left_eye.y).abs();
        if dx <= 1e-9 && dy <= 1e-9 {
            return Err(Error::DegenerateLandmarks(format!(
                "eyes coincide at ({}, {})",
                self.left_eye.x, self.left_eye.y
            )));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(Point) -> Point) -> Self {
        Self {
            left_eye: f(self.left_eye),
            right_eye: f(self.right_eye),
            nose: f(self.nose),
        }
    }

    pub fn points(&self) -> [(&'static str, Point); 3] {
        [
            ("left_eye", self.left_eye),
            ("right_eye", self.right_eye),
            ("nose", self.nose),
        ]
    }
}

/// Rounds half away from zero and checks the result fits an `i64`.
fn round_coord(v: f64) -> i64 {
    v.round() as i64
}

/// Integer top-left corner used by [`crop_to_box`] for `b`.
pub fn crop_origin(b: &BoundingBox) -> (i64, i64) {
    (round_coord(b.x), round_coord(b.y))
}

/// Cuts `b` out of `img`. The box may overhang the frame; overhang is black.
pub fn crop_to_box(img: &ImageBuffer, b: &BoundingBox) -> Result<ImageBuffer> {
    b.validate()?;
    let w = round_coord(b.w);
    let h = round_coord(b.h);
    if w < 1 || h < 1 {
        return Err(Error::InvalidBox(format!(
            "rounded extents {w}x{h} are below one pixel"
        )));
    }
    if w > u32::MAX as i64 || h > u32::MAX as i64 {
        return Err(Error::InvalidBox(format!("extents {w}x{h} too large")));
    }
    let (ox, oy) = crop_origin(b);
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |col, row| {
        img.pixel_or_black(ox + col as i64, oy + row as i64)
    }))
}

/// In-plane roll of the eye line, in radians.
pub fn roll_angle(lm: &FaceLandmarks) -> Result<f64> {
    lm.validate()?;
    Ok((lm.right_eye.y - lm.left_eye.y).atan2(lm.right_eye.x - lm.left_eye.x))
}

#[inline]
fn rotate_by(p: Point, center: Point, cos: f64, sin: f64) -> Point {
    let dx = p.x - center.x;
    let dy = p.y - center.y;
    Point::new(
        center.x + cos * dx - sin * dy,
        center.y + sin * dx + cos * dy,
    )
}

/// Maps a point the way [`rotate_about`] moves image content: rotation about
/// `center` by `-angle`.
pub fn rotate_point(p: Point, center: Point, angle: f64) -> Point {
    rotate_by(p, center, angle.cos(), -angle.sin())
}

/// Snaps sampling positions that are integral up to floating noise.
#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Bilinear sample at continuous position `(sx, sy)`. Positions outside the
/// frame give black; inside, neighbours are clamped to the border.
pub fn sample_bilinear(img: &ImageBuffer, sx: f64, sy: f64) -> [u8; 3] {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(sx >= 0.0 && sy >= 0.0 && sx <= w && sy <= h) {
        return BLACK;
    }
    let u = snap(sx - 0.5);
    let v = snap(sy - 0.5);
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let max_c = img.width() as i64 - 1;
    let max_r = img.height() as i64 - 1;
    let c0 = (x0 as i64).clamp(0, max_c) as u32;
    let c1 = (x0 as i64 + 1).clamp(0, max_c) as u32;
    let r0 = (y0 as i64).clamp(0, max_r) as u32;
    let r1 = (y0 as i64 + 1).clamp(0, max_r) as u32;

    let p00 = img.pixel(c0, r0);
    let p10 = img.pixel(c1, r0);
    let p01 = img.pixel(c0, r1);
    let p11 = img.pixel(c1, r1);
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let top = p00[ch] as f64 * (1.0 - fx) + p10[ch] as f64 * fx;
        let bottom = p01[ch] as f64 * (1.0 - fx) + p11[ch] as f64 * fx;
        let value = top * (1.0 - fy) + bottom * fy;
        out[ch] = value.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Rotates image content about `center`. Output pixel `p` takes the input at
/// `p` rotated by `+angle`; uncovered corners are black.
pub fn rotate_about(img: &ImageBuffer, center: Point, angle: f64) -> ImageBuffer {
    if angle == 0.0 {
        return img.clone();
    }
    let (cos, sin) = (angle.cos(), angle.sin());
    ImageBuffer::from_fn(img.width(), img.height(), |col, row| {
        let p = Point::new(col as f64 + 0.5, row as f64 + 0.5);
        let s = rotate_by(p, center, cos, sin);
        sample_bilinear(img, s.x, s.y)
    })
}

/// Bilinear resize. A point `(x, y)` in the source lands at
/// `(x * width / src_width, y * height / src_height)` in the output.
pub fn resize_bilinear(img: &ImageBuffer, width: u32, height: u32) -> Result<ImageBuffer> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig(format!(
            "resize target must be at least 1x1, got {width}x{height}"
        )));
    }
    if width == img.width() && height == img.height() {
        return Ok(img.clone());
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    Ok(ImageBuffer::from_fn(width, height, |col, row| {
        sample_bilinear(img, (col as f64 + 0.5) * sx, (row as f64 + 0.5) * sy)
    }))
}
