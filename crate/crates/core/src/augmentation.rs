//! Stochastic augmentation: resized crop, horizontal flip, color jitter and
//! random grayscale. Every random draw comes from the caller's rng, so a
//! fixed stream state reproduces the output exactly.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the full frame.
    pub crop_area: (f64, f64),
    /// Crop aspect ratio `w / h`, sampled log-uniformly.
    pub crop_aspect: (f64, f64),
    pub flip_prob: f64,
    pub flip_enabled: bool,
    pub grayscale_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `[1 - s, 1 + s]`.
    pub jitter_strength: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop_area: (0.2, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            flip_enabled: true,
            grayscale_prob: 0.2,
            jitter_strength: 0.4,
        }
    }
}

impl AugmentPolicy {
    /// Every stage is a no-op.
    pub fn identity() -> Self {
        AugmentPolicy {
            crop_area: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            flip_prob: 0.0,
            flip_enabled: false,
            grayscale_prob: 0.0,
            jitter_strength: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.crop_area;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::param(format!("crop area range ({a0}, {a1}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (r0, r1) = self.crop_aspect;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::param(format!("crop aspect range ({r0}, {r1}) must be positive and ordered")));
        }
        for (name, p) in [("flip", self.flip_prob), ("grayscale", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        if !(self.jitter_strength >= 0.0) || !self.jitter_strength.is_finite() {
            return Err(Error::param(format!(
                "jitter strength must be non-negative, got {}",
                self.jitter_strength
            )));
        }
        Ok(())
    }
}

pub fn horizontal_flip(img: &Image) -> Image {
    let mut out = img.clone();
    let w = img.width;
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..w {
                out.set(c, y, x, img.at(c, y, w - 1 - x));
            }
        }
    }
    out
}

/// Replaces every channel with the luma plane.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::param(format!(
            "grayscale conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let gray = img.luma();
    let data = [gray.as_slice(), gray.as_slice(), gray.as_slice()].concat();
    Image::new(img.height, img.width, 3, data)
}

/// Crop window in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a crop window; falls back to the full frame after ten misses.
pub fn sample_crop<R: Rng + ?Sized>(height: usize, width: usize, policy: &AugmentPolicy, rng: &mut R) -> CropBox {
    let area = (height * width) as f64;
    let (lr0, lr1) = (policy.crop_aspect.0.ln(), policy.crop_aspect.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(policy.crop_area.0..=policy.crop_area.1);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropBox {
                top,
                left,
                height: h,
                width: w,
            };
        }
    }
    CropBox {
        top: 0,
        left: 0,
        height,
        width,
    }
}

/// Bilinear resampling of `crop` back to the full frame, pixel-center aligned.
pub fn resize_crop(img: &Image, crop: CropBox) -> Image {
    let (out_h, out_w) = (img.height, img.width);
    let mut out = Image::filled(out_h, out_w, img.channels, 0.0);
    let src = |o: usize, out_len: usize, start: usize, len: usize| -> (usize, usize, f64) {
        let pos = (o as f64 + 0.5) * len as f64 / out_len as f64 - 0.5;
        let pos = pos.clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (start + lo, start + hi, pos - lo as f64)
    };
    for y in 0..out_h {
        let (y0, y1, fy) = src(y, out_h, crop.top, crop.height);
        for x in 0..out_w {
            let (x0, x1, fx) = src(x, out_w, crop.left, crop.width);
            for c in 0..img.channels {
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

pub fn random_resized_crop<R: Rng + ?Sized>(img: &Image, policy: &AugmentPolicy, rng: &mut R) -> Result<Image> {
    if img.height < 2 || img.width < 2 {
        return Err(Error::param("resized crop needs at least 2x2 pixels"));
    }
    let crop = sample_crop(img.height, img.width, policy, rng);
    Ok(resize_crop(img, crop))
}

pub fn adjust_brightness(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for x in &mut out.data {
        *x *= factor;
    }
    out.clamp_unit();
    out
}

/// Blend toward the image's mean luma.
pub fn adjust_contrast(img: &Image, factor: f64) -> Image {
    let gray = img.luma();
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    let mut out = img.clone();
    for x in &mut out.data {
        *x = factor * *x + (1.0 - factor) * mean;
    }
    out.clamp_unit();
    out
}

/// Blend each pixel toward its own luma. No-op on single-channel images.
pub fn adjust_saturation(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    if img.channels == 3 {
        let gray = img.luma();
        let n = gray.len();
        for c in 0..3 {
            for (x, g) in out.data[c * n..(c + 1) * n].iter_mut().zip(&gray) {
                *x = factor * *x + (1.0 - factor) * g;
            }
        }
    }
    out.clamp_unit();
    out
}

/// Brightness, contrast and saturation in a random order, each with a
/// factor drawn from `[1 - strength, 1 + strength]`.
pub fn color_jitter<R: Rng + ?Sized>(img: &Image, rng: &mut R, strength: f64) -> Result<Image> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::param(format!("jitter strength must be non-negative, got {strength}")));
    }
    let mut order = [0u8, 1, 2];
    order.shuffle(rng);
    let lo = (1.0 - strength).max(0.0);
    let hi = 1.0 + strength;
    let mut out = img.clone();
    for op in order {
        let factor = rng.random_range(lo..=hi);
        out = match op {
            0 => adjust_brightness(&out, factor),
            1 => adjust_contrast(&out, factor),
            _ => adjust_saturation(&out, factor),
        };
    }
    Ok(out)
}

/// Crop, flip, jitter, grayscale, in that order.
pub fn augment<R: Rng + ?Sized>(img: &Image, rng: &mut R, policy: &AugmentPolicy) -> Result<Image> {
    policy.validate()?;
    let mut out = random_resized_crop(img, policy, rng)?;
    // the coin is drawn even when flipping is disabled so that both settings
    // consume the same stream
    let flip = rng.random::<f64>() < policy.flip_prob;
    if flip && policy.flip_enabled {
        out = horizontal_flip(&out);
    }
    out = color_jitter(&out, rng, policy.jitter_strength)?;
    let gray = rng.random::<f64>() < policy.grayscale_prob;
    if gray && out.channels == 3 {
        out = to_grayscale(&out)?;
    }
    Ok(out)
}
