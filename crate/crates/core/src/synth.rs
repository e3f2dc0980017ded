//! Synthetic face images and manifests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::dataset::{EmotionLabel, Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::imagebuf::{BoundingBox, FaceLandmarks, ImageBuffer, Point};

/// Single-label FePh-style class counts, in table order.
pub const FEPH_COUNTS: [(EmotionLabel, usize); 7] = [
    (EmotionLabel::Happiness, 179),
    (EmotionLabel::Sadness, 349),
    (EmotionLabel::Surprise, 818),
    (EmotionLabel::Fear, 308),
    (EmotionLabel::Anger, 507),
    (EmotionLabel::Disgust, 187),
    (EmotionLabel::Neutral, 199),
];

/// Total frames before removing `other` and multi-label annotations.
pub const FEPH_RAW_TOTAL: usize = 3359;

/// A 3359-record manifest in which exactly the [`FEPH_COUNTS`] records carry
/// a single expression label; the rest are tagged `other` or carry two
/// labels.
pub fn feph_like_manifest(seed: u64) -> Manifest {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut records = Vec::with_capacity(FEPH_RAW_TOTAL);
    let mut push = |labels: Vec<EmotionLabel>| {
        let id = format!("feph{:04}", records.len());
        records.push(SampleRecord {
            image_path: format!("{id}.png"),
            id,
            raw_labels: labels,
            landmarks: None,
            bbox: None,
        });
    };
    for (label, n) in FEPH_COUNTS {
        for _ in 0..n {
            push(vec![label]);
        }
    }
    let kept: usize = FEPH_COUNTS.iter().map(|(_, n)| n).sum();
    for i in 0..FEPH_RAW_TOTAL - kept {
        if i % 3 == 0 {
            push(vec![EmotionLabel::Other]);
        } else {
            let a = FEPH_COUNTS[rng.random_range(0..7)].0;
            let mut b = FEPH_COUNTS[rng.random_range(0..7)].0;
            if a == b {
                b = if a == EmotionLabel::Neutral {
                    EmotionLabel::Happiness
                } else {
                    EmotionLabel::Neutral
                };
            }
            push(vec![a, b]);
        }
    }
    Manifest::from_records(records).expect("ids are unique")
}

fn noise_pixel(rng: &mut impl Rng, base: i32, spread: i32) -> [u8; 3] {
    let mut px = [0u8; 3];
    for v in px.iter_mut() {
        *v = (base + rng.random_range(-spread..=spread)).clamp(0, 255) as u8;
    }
    px
}

fn fill_rect(img: &mut ImageBuffer, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [u8; 3]) {
    let c0 = x0.max(0.0).round() as u32;
    let r0 = y0.max(0.0).round() as u32;
    let c1 = (x1.round() as u32).min(img.width());
    let r1 = (y1.round() as u32).min(img.height());
    for r in r0..r1 {
        for c in c0..c1 {
            img.put_pixel(c, r, rgb);
        }
    }
}

fn fill_disc(img: &mut ImageBuffer, center: Point, radius: f64, rgb: [u8; 3]) {
    for r in 0..img.height() {
        for c in 0..img.width() {
            let dx = c as f64 + 0.5 - center.x;
            let dy = r as f64 + 0.5 - center.y;
            if dx * dx + dy * dy <= radius * radius {
                img.put_pixel(c, r, rgb);
            }
        }
    }
}

/// A random face on a `size x size` canvas: noisy background, skin-toned
/// face box with dark eye and nose marks, random roll.
pub fn random_face(rng: &mut impl Rng, size: u32) -> (ImageBuffer, BoundingBox, FaceLandmarks) {
    let s = size as f64;
    let w = rng.random_range(0.35 * s..0.6 * s);
    let h = w * rng.random_range(0.8..1.3);
    let x = rng.random_range(0.05 * s..(0.95 * s - w).max(0.06 * s));
    let y = rng.random_range(0.05 * s..(0.95 * s - h).max(0.06 * s));
    let b = BoundingBox { x, y, w, h };
    let center = b.center();
    let half_span = w * rng.random_range(0.18..0.3);
    let roll: f64 = rng.random_range(-0.6..0.6);
    let (sin, cos) = roll.sin_cos();
    let eye_mid = Point::new(center.x, center.y - 0.15 * h);
    let left = Point::new(eye_mid.x - cos * half_span, eye_mid.y - sin * half_span);
    let right = Point::new(eye_mid.x + cos * half_span, eye_mid.y + sin * half_span);
    let nose = Point::new(center.x - sin * 0.15 * h, center.y + cos * 0.15 * h);
    let lm = FaceLandmarks::new(left, right, nose).expect("eyes are apart");

    let bg = rng.random_range(40..120);
    let mut img = ImageBuffer::from_fn(size, size, |_, _| [0, 0, 0]);
    for px in img.as_raw_mut().chunks_exact_mut(3) {
        px.copy_from_slice(&noise_pixel(rng, bg, 25));
    }
    let skin = [
        rng.random_range(150..230),
        rng.random_range(100..170),
        rng.random_range(80..150),
    ];
    fill_rect(&mut img, x, y, x + w, y + h, skin);
    let eye_r = (0.06 * w).max(1.0);
    fill_disc(&mut img, left, eye_r, [20, 20, 30]);
    fill_disc(&mut img, right, eye_r, [20, 20, 30]);
    fill_disc(&mut img, nose, eye_r * 0.7, [90, 50, 40]);
    (img, b, lm)
}

/// One sample of the XOR corpus: the class is `top_bit ^ bottom_bit`, so
/// neither half alone carries any information about it.
#[derive(Debug, Clone)]
pub struct XorSample {
    pub record: SampleRecord,
    pub image: ImageBuffer,
    pub top_bit: bool,
    pub bottom_bit: bool,
}

pub const XOR_CLASSES: [EmotionLabel; 2] = [EmotionLabel::Happiness, EmotionLabel::Sadness];

/// Draws a face whose upper region holds a bright block on the left or
/// right (`top_bit`) and whose lower region does the same for `bottom_bit`.
fn xor_face(
    rng: &mut impl Rng,
    size: u32,
    top_bit: bool,
    bottom_bit: bool,
) -> (ImageBuffer, BoundingBox, FaceLandmarks) {
    let s = size as f64;
    let w = s * rng.random_range(0.7..0.76);
    let h = w * rng.random_range(0.95..1.05);
    let x = (s - w) / 2.0 + rng.random_range(-1.5..1.5);
    let y = (s - h) / 2.0 + rng.random_range(-1.5..1.5);
    let b = BoundingBox { x, y, w, h };

    let eye_y = y + 0.45 * h;
    let tilt = rng.random_range(-0.04..0.04) * w;
    let left = Point::new(x + 0.3 * w, eye_y - tilt);
    let right = Point::new(x + 0.7 * w, eye_y + tilt);
    let nose = Point::new(x + 0.5 * w, y + 0.55 * h);
    let lm = FaceLandmarks::new(left, right, nose).expect("eyes are apart");

    let mut img = ImageBuffer::from_fn(size, size, |_, _| [0, 0, 0]);
    for px in img.as_raw_mut().chunks_exact_mut(3) {
        px.copy_from_slice(&noise_pixel(rng, 110, 30));
    }
    let bright = [235, 225, 215];
    let block = |img: &mut ImageBuffer, bit: bool, y0: f64, y1: f64| {
        let (x0, x1) = if bit {
            (x + 0.55 * w, x + 0.9 * w)
        } else {
            (x + 0.1 * w, x + 0.45 * w)
        };
        fill_rect(img, x0, y0, x1, y1, bright);
    };
    block(&mut img, top_bit, y + 0.08 * h, y + 0.3 * h);
    block(&mut img, bottom_bit, y + 0.7 * h, y + 0.92 * h);
    (img, b, lm)
}

/// Balanced XOR corpus of `n` faces on `size x size` canvases.
pub fn xor_corpus(n: usize, size: u32, seed: u64) -> Vec<XorSample> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let top_bit = i % 2 == 1;
            let bottom_bit = (i / 2) % 2 == 1;
            let (image, bbox, lm) = xor_face(&mut rng, size, top_bit, bottom_bit);
            let label = XOR_CLASSES[usize::from(top_bit ^ bottom_bit)];
            let id = format!("xor{i:05}");
            XorSample {
                record: SampleRecord {
                    image_path: format!("{id}.png"),
                    id,
                    raw_labels: vec![label],
                    landmarks: Some(lm),
                    bbox: Some(bbox),
                },
                image,
                top_bit,
                bottom_bit,
            }
        })
        .collect()
}

/// Writes an XOR corpus as PNGs plus `manifest.csv` under `dir`.
pub fn write_xor_corpus(dir: impl AsRef<Path>, n: usize, size: u32, seed: u64) -> Result<Manifest> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let samples = xor_corpus(n, size, seed);
    let mut records = Vec::with_capacity(n);
    for s in samples {
        s.image.save_png(images.join(&s.record.image_path))?;
        records.push(s.record);
    }
    let manifest = Manifest::from_records(records)?;
    manifest.write_csv(dir.join("manifest.csv"))?;
    Ok(manifest)
}
