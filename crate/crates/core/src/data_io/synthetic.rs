//! Colored-pattern blobs: a small labeled dataset with controllable noise.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Each class gets a base image: a per-channel color plus a plane wave with
/// random frequency and phase. Samples add i.i.d. Gaussian pixel noise and are
/// clamped to `[0, 1]`. Instances are ordered class by class.
pub fn gen_synthetic_blobs(spec: BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::param("synthetic blobs need at least two classes"));
    }
    if spec.image_size < 3 {
        return Err(Error::param("synthetic images must be at least 3x3"));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::param("noise sigma must be non-negative"));
    }
    let s = spec.image_size;
    let mut rng = rng::stream(spec.seed, Stream::Synthetic);
    let bases: Vec<Image> = (0..spec.classes)
        .map(|_| {
            let mut im = Image::filled(s, s, 3, 0.0);
            let fy = rng.random_range(0.5..2.0);
            let fx = rng.random_range(0.5..2.0);
            for c in 0..3 {
                let color = rng.random_range(0.25..0.75);
                let phase = rng.random_range(0.0..TAU);
                for y in 0..s {
                    for x in 0..s {
                        let wave = (TAU * (fy * y as f64 + fx * x as f64) / s as f64 + phase).sin();
                        im.set(c, y, x, (color + 0.25 * wave).clamp(0.0, 1.0));
                    }
                }
            }
            im
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::param(e.to_string()))?;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for (c, base) in bases.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut im = base.clone();
            if spec.noise_sigma > 0.0 {
                for x in &mut im.data {
                    *x += noise.sample(&mut rng);
                }
                im.clamp_unit();
            }
            images.push(im);
            labels.push(c as u32);
        }
    }
    Dataset::new("synthetic-blobs", "all", images, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64, seed: u64) -> BlobSpec {
        BlobSpec {
            classes: 3,
            per_class: 100,
            image_size: 8,
            noise_sigma: noise,
            seed,
        }
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let ds = gen_synthetic_blobs(spec(0.0, 1)).unwrap();
        let labels = ds.labels_for_evaluation().unwrap();
        for i in 1..ds.len() {
            if labels[i] == labels[i - 1] {
                assert_eq!(ds.images()[i], ds.images()[i - 1]);
            }
        }
        assert_ne!(ds.images()[0], ds.images()[100]);
    }

    #[test]
    fn seeded_and_balanced() {
        let a = gen_synthetic_blobs(spec(0.15, 4)).unwrap();
        assert_eq!(a, gen_synthetic_blobs(spec(0.15, 4)).unwrap());
        assert_eq!(a.len(), 300);
        let labels = a.labels_for_evaluation().unwrap();
        for c in 0..3 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert!(a.images().iter().all(|im| im.data.iter().all(|x| (0.0..=1.0).contains(x))));
    }

    #[test]
    fn needs_two_classes() {
        let mut s = spec(0.1, 1);
        s.classes = 1;
        assert!(gen_synthetic_blobs(s).is_err());
    }
}
