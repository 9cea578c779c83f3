//! Artificial augmentation pipeline for the comparison arm.
//!
//! Horizontal flip, color jitter, random grayscale, and gaussian blur — the
//! transforms the temporal sampler deliberately avoids. Parameters are drawn
//! up front so application is a pure function.

use ndarray::Array3;
use rand::Rng;

const P_FLIP: f64 = 0.5;
const P_JITTER: f64 = 0.8;
const P_GRAY: f64 = 0.2;
const P_BLUR: f64 = 0.5;

const BRIGHTNESS: f64 = 0.4;
const CONTRAST: f64 = 0.4;
const SATURATION: f64 = 0.2;
const HUE: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

#[derive(Debug, Clone, Copy)]
pub struct AugParams {
    pub flip: bool,
    pub jitter: Option<JitterParams>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

impl AugParams {
    /// Consumes a fixed number of draws regardless of which branches fire,
    /// keeping downstream draws aligned across parameter choices.
    pub fn draw(rng: &mut impl Rng) -> Self {
        let flip = rng.random::<f64>() < P_FLIP;
        let do_jitter = rng.random::<f64>() < P_JITTER;
        let jitter = JitterParams {
            brightness: factor(rng, BRIGHTNESS),
            contrast: factor(rng, CONTRAST),
            saturation: factor(rng, SATURATION),
            hue: (HUE * (2.0 * rng.random::<f64>() - 1.0)) as f32,
        };
        let grayscale = rng.random::<f64>() < P_GRAY;
        let do_blur = rng.random::<f64>() < P_BLUR;
        let sigma = 0.1 + 1.9 * rng.random::<f64>();
        Self {
            flip,
            jitter: do_jitter.then_some(jitter),
            grayscale,
            blur_sigma: do_blur.then_some(sigma),
        }
    }
}

fn factor(rng: &mut impl Rng, amount: f64) -> f32 {
    (1.0 + amount * (2.0 * rng.random::<f64>() - 1.0)) as f32
}

pub fn apply(px: &mut Array3<f32>, params: &AugParams) {
    if params.flip {
        hflip(px);
    }
    if let Some(j) = &params.jitter {
        color_jitter(px, j);
    }
    if params.grayscale {
        grayscale(px);
    }
    if let Some(sigma) = params.blur_sigma {
        gaussian_blur(px, sigma);
    }
}

pub fn hflip(px: &mut Array3<f32>) {
    let (h, w, c) = px.dim();
    for y in 0..h {
        for x in 0..w / 2 {
            for ci in 0..c {
                let a = px[(y, x, ci)];
                px[(y, x, ci)] = px[(y, w - 1 - x, ci)];
                px[(y, w - 1 - x, ci)] = a;
            }
        }
    }
}

fn luma(px: &Array3<f32>, y: usize, x: usize) -> f32 {
    0.299 * px[(y, x, 0)] + 0.587 * px[(y, x, 1)] + 0.114 * px[(y, x, 2)]
}

pub fn color_jitter(px: &mut Array3<f32>, j: &JitterParams) {
    let (h, w, _) = px.dim();
    // brightness
    px.mapv_inplace(|v| (v * j.brightness).clamp(0.0, 1.0));
    // contrast around the mean gray level
    let mut mean = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            mean += luma(px, y, x) as f64;
        }
    }
    let mean = (mean / (h * w) as f64) as f32;
    px.mapv_inplace(|v| ((v - mean) * j.contrast + mean).clamp(0.0, 1.0));
    // saturation toward per-pixel gray
    for y in 0..h {
        for x in 0..w {
            let g = luma(px, y, x);
            for c in 0..3 {
                let v = px[(y, x, c)];
                px[(y, x, c)] = (g + (v - g) * j.saturation).clamp(0.0, 1.0);
            }
        }
    }
    // hue as a slight cyclic channel rotation
    let hmag = j.hue.abs();
    if hmag > 0.0 {
        let fwd = j.hue > 0.0;
        for y in 0..h {
            for x in 0..w {
                let r = px[(y, x, 0)];
                let g = px[(y, x, 1)];
                let b = px[(y, x, 2)];
                let (r2, g2, b2) = if fwd { (g, b, r) } else { (b, r, g) };
                px[(y, x, 0)] = ((1.0 - hmag) * r + hmag * r2).clamp(0.0, 1.0);
                px[(y, x, 1)] = ((1.0 - hmag) * g + hmag * g2).clamp(0.0, 1.0);
                px[(y, x, 2)] = ((1.0 - hmag) * b + hmag * b2).clamp(0.0, 1.0);
            }
        }
    }
}

pub fn grayscale(px: &mut Array3<f32>) {
    let (h, w, _) = px.dim();
    for y in 0..h {
        for x in 0..w {
            let g = luma(px, y, x);
            for c in 0..3 {
                px[(y, x, c)] = g;
            }
        }
    }
}

pub fn gaussian_blur(px: &mut Array3<f32>, sigma: f64) {
    let radius = (2.0 * sigma).ceil().max(1.0) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0f64;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let wgt = (-d * d / (2.0 * sigma * sigma)).exp();
        kernel.push(wgt);
        sum += wgt;
    }
    for k in kernel.iter_mut() {
        *k /= sum;
    }

    let (h, w, ch) = px.dim();
    // horizontal then vertical pass, clamped at the edges
    let mut tmp = px.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f64;
                for (i, &k) in kernel.iter().enumerate() {
                    let sx = (x as isize + i as isize - radius as isize).clamp(0, w as isize - 1);
                    acc += k * px[(y, sx as usize, c)] as f64;
                }
                tmp[(y, x, c)] = acc as f32;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0f64;
                for (i, &k) in kernel.iter().enumerate() {
                    let sy = (y as isize + i as isize - radius as isize).clamp(0, h as isize - 1);
                    acc += k * tmp[(sy as usize, x, c)] as f64;
                }
                px[(y, x, c)] = acc as f32;
            }
        }
    }
}
