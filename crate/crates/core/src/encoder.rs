//! Reference feature extractor.
//!
//! Two one-layer branches, one over the raw pixels and one over the Sobel
//! magnitude of the luma plane, are rectified, concatenated, projected to
//! `embed_dim` and normalized onto the unit sphere. Backpropagation is exact,
//! including the Jacobian of the final normalization.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::norm;
use crate::rng::{self, Stream};

/// Sobel magnitude of the luma plane, zero padded, divided by 8.
pub fn sobel_filter(img: &Image) -> Result<Image> {
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return Err(Error::param(format!(
            "Sobel needs at least 3x3 pixels, got {h}x{w}"
        )));
    }
    let gray = img.luma();
    let px = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            gray[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt() / 8.0;
        }
    }
    Image::new(h, w, 1, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl EncoderShape {
    pub fn rgb_inputs(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sobel_inputs(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::param("encoder images must be at least 3x3"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::param("encoder images have 1 or 3 channels"));
        }
        if self.hidden == 0 || self.embed_dim < 2 {
            return Err(Error::param("encoder needs hidden >= 1 and embed_dim >= 2"));
        }
        Ok(())
    }
}

/// Weights and biases of the encoder, also used for their gradients and
/// momentum buffers. Matrices are row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub rgb_w: Vec<f64>,
    pub rgb_b: Vec<f64>,
    pub sobel_w: Vec<f64>,
    pub sobel_b: Vec<f64>,
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
}

impl Tensors {
    pub fn zeros(shape: &EncoderShape) -> Self {
        Tensors {
            rgb_w: vec![0.0; shape.hidden * shape.rgb_inputs()],
            rgb_b: vec![0.0; shape.hidden],
            sobel_w: vec![0.0; shape.hidden * shape.sobel_inputs()],
            sobel_b: vec![0.0; shape.hidden],
            proj_w: vec![0.0; shape.embed_dim * 2 * shape.hidden],
            proj_b: vec![0.0; shape.embed_dim],
        }
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            &self.rgb_w,
            &self.rgb_b,
            &self.sobel_w,
            &self.sobel_b,
            &self.proj_w,
            &self.proj_b,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.rgb_w,
            &mut self.rgb_b,
            &mut self.sobel_w,
            &mut self.sobel_b,
            &mut self.proj_w,
            &mut self.proj_b,
        ]
    }

    pub fn same_layout(&self, other: &Tensors) -> bool {
        self.slices()
            .iter()
            .zip(other.slices())
            .all(|(a, b)| a.len() == b.len())
    }

    pub fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensors) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn quantize(&mut self) {
        for t in self.slices_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub weights: Tensors,
    /// Bumped on every parameter update; forward caches remember it.
    pub(crate) generation: u64,
}

impl EncoderParams {
    pub fn from_weights(shape: EncoderShape, weights: Tensors) -> Result<Self> {
        shape.validate()?;
        if !weights.same_layout(&Tensors::zeros(&shape)) {
            return Err(Error::param("weight tensors do not match the encoder shape"));
        }
        Ok(EncoderParams {
            shape,
            weights,
            generation: 0,
        })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Marks every outstanding forward cache as stale.
    pub fn touch(&mut self) {
        self.generation += 1;
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_encoder(shape: EncoderShape, seed: u64) -> Result<EncoderParams> {
    shape.validate()?;
    let mut rng = rng::stream(seed, Stream::EncoderInit);
    let mut glorot = |fan_in: usize, fan_out: usize| -> Vec<f64> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect()
    };
    let mut weights = Tensors::zeros(&shape);
    weights.rgb_w = glorot(shape.rgb_inputs(), shape.hidden);
    weights.sobel_w = glorot(shape.sobel_inputs(), shape.hidden);
    weights.proj_w = glorot(2 * shape.hidden, shape.embed_dim);
    EncoderParams::from_weights(shape, weights)
}

/// Intermediate values kept by [`encode_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    x_rgb: Vec<f64>,
    x_sobel: Vec<f64>,
    /// Rectified `[h_rgb; h_sobel]`.
    hidden: Vec<f64>,
    pre_norm: f64,
    pub v: Vec<f64>,
}

fn affine_relu(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        let z: f64 = row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bias;
        *o = z.max(0.0);
    }
}

/// RGB pixels enter centered at 0.5; Sobel magnitudes enter as-is.
pub fn encode_forward(params: &EncoderParams, img: &Image) -> Result<(Vec<f64>, ForwardCache)> {
    let s = &params.shape;
    if img.height != s.height || img.width != s.width || img.channels != s.channels {
        return Err(Error::param(format!(
            "encoder expects {}x{}x{}, got {}x{}x{}",
            s.height, s.width, s.channels, img.height, img.width, img.channels
        )));
    }
    let t = &params.weights;
    let x_rgb: Vec<f64> = img.data.iter().map(|p| p - 0.5).collect();
    let x_sobel = sobel_filter(img)?.data;
    let mut hidden = vec![0.0; 2 * s.hidden];
    let (h_rgb, h_sobel) = hidden.split_at_mut(s.hidden);
    affine_relu(&t.rgb_w, &t.rgb_b, &x_rgb, h_rgb);
    affine_relu(&t.sobel_w, &t.sobel_b, &x_sobel, h_sobel);

    let u: Vec<f64> = t
        .proj_w
        .chunks_exact(2 * s.hidden)
        .zip(&t.proj_b)
        .map(|(row, b)| row.iter().zip(&hidden).map(|(a, h)| a * h).sum::<f64>() + b)
        .collect();
    let pre_norm = norm(&u);
    if !pre_norm.is_finite() {
        return Err(Error::Numeric("encoder output is not finite".into()));
    }
    if pre_norm == 0.0 {
        return Err(Error::degenerate("encoder produced a zero pre-normalization vector"));
    }
    let v: Vec<f64> = u.iter().map(|x| x / pre_norm).collect();
    let cache = ForwardCache {
        generation: params.generation,
        x_rgb,
        x_sobel,
        hidden,
        pre_norm,
        v: v.clone(),
    };
    Ok((v, cache))
}

/// Parameter gradient of `v(theta) . grad_v`.
pub fn encode_backward(params: &EncoderParams, cache: &ForwardCache, grad_v: &[f64]) -> Result<Tensors> {
    let mut grads = Tensors::zeros(&params.shape);
    encode_backward_into(params, cache, grad_v, &mut grads)?;
    Ok(grads)
}

/// Like [`encode_backward`] but accumulates into `grads`.
pub fn encode_backward_into(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_v: &[f64],
    grads: &mut Tensors,
) -> Result<()> {
    if cache.generation != params.generation {
        return Err(Error::State(format!(
            "forward cache from parameter generation {} used with generation {}",
            cache.generation, params.generation
        )));
    }
    let s = &params.shape;
    if grad_v.len() != s.embed_dim {
        return Err(Error::param(format!(
            "gradient has dimension {}, embeddings have {}",
            grad_v.len(),
            s.embed_dim
        )));
    }
    let t = &params.weights;
    let v = &cache.v;
    // d(u/|u|)/du = (I - v v^T) / |u|
    let radial: f64 = grad_v.iter().zip(v).map(|(g, x)| g * x).sum();
    let g_u: Vec<f64> = grad_v
        .iter()
        .zip(v)
        .map(|(g, x)| (g - radial * x) / cache.pre_norm)
        .collect();

    let width = 2 * s.hidden;
    let mut g_hidden = vec![0.0; width];
    for (o, gu) in g_u.iter().enumerate() {
        grads.proj_b[o] += gu;
        if *gu == 0.0 {
            continue;
        }
        let row = &t.proj_w[o * width..(o + 1) * width];
        let g_row = &mut grads.proj_w[o * width..(o + 1) * width];
        for j in 0..width {
            g_row[j] += gu * cache.hidden[j];
            g_hidden[j] += gu * row[j];
        }
    }

    let branch = |g_h: &[f64], h: &[f64], x: &[f64], g_w: &mut [f64], g_b: &mut [f64]| {
        let n_in = x.len();
        for j in 0..g_h.len() {
            if h[j] <= 0.0 || g_h[j] == 0.0 {
                continue;
            }
            g_b[j] += g_h[j];
            for (gw, xi) in g_w[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                *gw += g_h[j] * xi;
            }
        }
    };
    let (g_rgb, g_sob) = g_hidden.split_at(s.hidden);
    let (h_rgb, h_sob) = cache.hidden.split_at(s.hidden);
    branch(g_rgb, h_rgb, &cache.x_rgb, &mut grads.rgb_w, &mut grads.rgb_b);
    branch(g_sob, h_sob, &cache.x_sobel, &mut grads.sobel_w, &mut grads.sobel_b);
    Ok(())
}
