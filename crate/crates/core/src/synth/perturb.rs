use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub jpeg_prob: f64,
    /// Inclusive quality range, 1-100.
    pub jpeg_quality: (u8, u8),
    pub blur_prob: f64,
    pub blur_sigma: (f32, f32),
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            jpeg_prob: 0.1,
            jpeg_quality: (70, 95),
            blur_prob: 0.1,
            blur_sigma: (0.3, 0.6),
        }
    }
}

impl PerturbConfig {
    pub fn none() -> Self {
        PerturbConfig {
            jpeg_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Applies JPEG-like compression and/or Gaussian blur, each with its
/// configured probability. Output is clipped to `[0, 1]`.
pub fn perturb(image: &Tensor<f32>, seed: u64, cfg: &PerturbConfig) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    if cfg.jpeg_prob > 0.0 && rng.random_bool(cfg.jpeg_prob.min(1.0)) {
        let q = rng.random_range(cfg.jpeg_quality.0..=cfg.jpeg_quality.1.max(cfg.jpeg_quality.0));
        out = jpeg_like(&out, q);
    }
    if cfg.blur_prob > 0.0 && rng.random_bool(cfg.blur_prob.min(1.0)) {
        let (lo, hi) = cfg.blur_sigma;
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
        out = gaussian_blur(&out, sigma);
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

const LUMA_TABLE: [f32; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101.,
    72., 92., 95., 98., 112., 100., 103., 99.,
];

fn dct_basis() -> [[f32; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f32 / 8.0).sqrt() } else { (2.0f32 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f32::consts::PI * (2 * n + 1) as f32 * k as f32 / 16.0).cos();
        }
    }
    b
}

/// Per-channel 8×8 orthonormal DCT, quantized with the scaled standard
/// luminance table. Edge blocks are padded by replication.
pub(crate) fn jpeg_like(image: &Tensor<f32>, quality: u8) -> Tensor<f32> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let q = quality.clamp(1, 100) as f32;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let table: Vec<f32> = LUMA_TABLE
        .iter()
        .map(|t| ((t * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
        .collect();
    let basis = dct_basis();
    let src = image.data();
    let mut out = src.to_vec();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for ch in 0..c {
                let mut block = [[0.0f32; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        *v = src[(sy * w + sx) * c + ch] * 255.0 - 128.0;
                    }
                }
                let mut coef = [[0.0f32; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut s = 0.0;
                        for (y, row) in block.iter().enumerate() {
                            for (x, &p) in row.iter().enumerate() {
                                s += basis[u][y] * basis[v][x] * p;
                            }
                        }
                        let t = table[u * 8 + v];
                        coef[u][v] = (s / t).round() * t;
                    }
                }
                for y in 0..8 {
                    for x in 0..8 {
                        if by + y >= h || bx + x >= w {
                            continue;
                        }
                        let mut s = 0.0;
                        for (u, crow) in coef.iter().enumerate() {
                            for (v, &cv) in crow.iter().enumerate() {
                                s += basis[u][y] * basis[v][x] * cv;
                            }
                        }
                        out[((by + y) * w + bx + x) * c + ch] = (s + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(0.0) as i32;
    let k: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
pub(crate) fn gaussian_blur(image: &Tensor<f32>, sigma: f32) -> Tensor<f32> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut s = 0.0;
                    for (j, &kv) in k.iter().enumerate() {
                        let off = j as isize - r;
                        let (sy, sx) = if horizontal {
                            (y as isize, (x as isize + off).clamp(0, w as isize - 1))
                        } else {
                            ((y as isize + off).clamp(0, h as isize - 1), x as isize)
                        };
                        s += kv * src[(sy as usize * w + sx as usize) * c + ch];
                    }
                    dst[(y * w + x) * c + ch] = s;
                }
            }
        }
        dst
    };
    let tmp = pass(image.data(), true);
    Tensor::new(image.shape().to_vec(), pass(&tmp, false)).expect("same shape")
}
