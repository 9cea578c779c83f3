//! Temporal multi-crop sampling.
//!
//! One scene's T temporal views stand in for hand-crafted augmentation:
//! global and local crops are drawn across the views, resized to fixed
//! resolutions, and normalized. With `artificial_aug = false` (the default,
//! and the method's point) the only pixel transformations are crop, resize,
//! and normalization — no flips, no color jitter. The artificial pipeline
//! exists solely as the comparison arm and is applied before normalization.
//!
//! Sampling is a pure function of (scene, spec, seed): all random draws
//! happen up front in a fixed order, then crops render in parallel.

pub mod augment;
mod resize;

pub use resize::crop_and_resize;

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_for, stream};
use crate::scene_store::TemporalScene;

use augment::AugParams;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid crop spec: {0}")]
    InvalidSpec(String),
    #[error("scene {scene_id} view {view} is {h}x{w}; smaller than the minimum crop source {min}")]
    ViewTooSmall {
        scene_id: String,
        view: usize,
        h: usize,
        w: usize,
        min: usize,
    },
    #[error("rect ({x},{y},{w},{h}) out of bounds for {img_h}x{img_w} image")]
    RectOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        img_h: usize,
        img_w: usize,
    },
    #[error("output size must be at least 1")]
    ZeroOutput,
}

/// How crops are assigned to temporal views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// Evenly spread across views; remainders go to the earliest views.
    Stratified,
    /// Each crop draws its source view independently and uniformly.
    UniformRandom,
}

/// Per-channel normalization constants, applied last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub n_global: usize,
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    pub global_area_range: (f64, f64),
    pub local_area_range: (f64, f64),
    pub allocation: Allocation,
    pub artificial_aug: bool,
    /// Resolved before training from dataset statistics unless overridden;
    /// `None` leaves intensities in [0, 1].
    #[serde(default)]
    pub normalize: Option<ChannelStats>,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            n_global: 10,
            n_local: 30,
            global_size: 224,
            local_size: 96,
            global_area_range: (0.4, 1.0),
            local_area_range: (0.05, 0.4),
            allocation: Allocation::Stratified,
            artificial_aug: false,
            normalize: None,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.n_global == 0 {
            return Err(SampleError::InvalidSpec(
                "n_global must be at least 1 (the teacher needs a view)".into(),
            ));
        }
        if self.global_size == 0 || self.local_size == 0 {
            return Err(SampleError::InvalidSpec("crop sizes must be positive".into()));
        }
        for (name, (lo, hi)) in [
            ("global_area_range", self.global_area_range),
            ("local_area_range", self.local_area_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(SampleError::InvalidSpec(format!(
                    "{name} ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
                )));
            }
        }
        if self.local_area_range.1 > 0.5 {
            return Err(SampleError::InvalidSpec(format!(
                "local area upper bound {} exceeds 0.5; local crops must come from a smaller region",
                self.local_area_range.1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    Global,
    Local,
}

/// Source rectangle in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone)]
pub struct Crop {
    /// size x size x C, normalized when the spec carries stats.
    pub pixels: Array3<f32>,
    pub kind: CropKind,
    pub source_view: usize,
    pub rect: CropRect,
}

#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub crops: Vec<Crop>,
    /// Temporal depth of the source scene.
    pub t: usize,
}

impl ViewBatch {
    pub fn n_global(&self) -> usize {
        self.crops.iter().filter(|c| c.kind == CropKind::Global).count()
    }

    pub fn n_local(&self) -> usize {
        self.crops.len() - self.n_global()
    }

    /// Indices of global crops within the crop list.
    pub fn global_indices(&self) -> Vec<usize> {
        self.crops
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == CropKind::Global)
            .map(|(i, _)| i)
            .collect()
    }

    /// Stack the addressed crops into an NCHW tensor.
    pub fn stack_nchw(&self, indices: &[usize]) -> Array4<f32> {
        let size = self.crops[indices[0]].pixels.dim().0;
        let ch = self.crops[indices[0]].pixels.dim().2;
        let mut out = Array4::<f32>::zeros((indices.len(), ch, size, size));
        for (n, &i) in indices.iter().enumerate() {
            let px = &self.crops[i].pixels;
            for c in 0..ch {
                let mut plane = out.index_axis_mut(Axis(0), n);
                let mut plane = plane.index_axis_mut(Axis(0), c);
                plane.assign(&px.index_axis(Axis(2), c));
            }
        }
        out
    }
}

struct CropPlan {
    kind: CropKind,
    source_view: usize,
    rect: CropRect,
    out_size: usize,
    aug: Option<AugParams>,
}

/// Spread `count` crops over `t` views; remainders land on the earliest views.
pub fn stratified_counts(count: usize, t: usize) -> Vec<usize> {
    let base = count / t;
    let rem = count % t;
    (0..t).map(|v| base + usize::from(v < rem)).collect()
}

/// Sample the multi-crop batch for one scene.
///
/// Crop order is globals first then locals, each group ordered by source
/// view. Every random decision comes from a ChaCha stream seeded by
/// `rng_seed`, drawn in a fixed order before any pixel work, so the result
/// is identical regardless of render parallelism.
pub fn sample_views(
    scene: &TemporalScene,
    spec: &CropSpec,
    rng_seed: u64,
) -> Result<ViewBatch, SampleError> {
    spec.validate()?;
    let t = scene.t();
    for (vi, view) in scene.views.iter().enumerate() {
        if view.height() < spec.local_size.min(spec.global_size)
            || view.width() < spec.local_size.min(spec.global_size)
        {
            return Err(SampleError::ViewTooSmall {
                scene_id: scene.scene_id.clone(),
                view: vi,
                h: view.height(),
                w: view.width(),
                min: spec.local_size.min(spec.global_size),
            });
        }
    }

    let mut rng = rng_for(&[stream::SCENE_CROPS, rng_seed]);

    // assign source views
    let assign = |rng: &mut rand_chacha::ChaCha8Rng, count: usize| -> Vec<usize> {
        match spec.allocation {
            Allocation::Stratified => {
                let counts = stratified_counts(count, t);
                let mut views = Vec::with_capacity(count);
                for (v, &n) in counts.iter().enumerate() {
                    views.extend(std::iter::repeat_n(v, n));
                }
                views
            }
            Allocation::UniformRandom => (0..count)
                .map(|_| draw_index(rng, t))
                .collect(),
        }
    };
    let global_views = assign(&mut rng, spec.n_global);
    let local_views = assign(&mut rng, spec.n_local);

    // draw rects and augmentation parameters in crop order
    let mut plans = Vec::with_capacity(spec.n_global + spec.n_local);
    for &sv in &global_views {
        let view = &scene.views[sv];
        let rect = draw_rect(&mut rng, view.height(), view.width(), spec.global_area_range);
        let aug = spec
            .artificial_aug
            .then(|| AugParams::draw(&mut rng));
        plans.push(CropPlan {
            kind: CropKind::Global,
            source_view: sv,
            rect,
            out_size: spec.global_size,
            aug,
        });
    }
    for &sv in &local_views {
        let view = &scene.views[sv];
        let rect = draw_rect(&mut rng, view.height(), view.width(), spec.local_area_range);
        let aug = spec
            .artificial_aug
            .then(|| AugParams::draw(&mut rng));
        plans.push(CropPlan {
            kind: CropKind::Local,
            source_view: sv,
            rect,
            out_size: spec.local_size,
            aug,
        });
    }

    // render in parallel; each plan is self-contained
    let crops: Result<Vec<Crop>, SampleError> = plans
        .par_iter()
        .map(|plan| {
            let view = &scene.views[plan.source_view];
            let img = crop_and_resize(
                view,
                (plan.rect.x, plan.rect.y, plan.rect.w, plan.rect.h),
                plan.out_size,
            )?;
            let mut px = img.pixels().clone();
            if let Some(aug) = &plan.aug {
                augment::apply(&mut px, aug);
            }
            if let Some(stats) = &spec.normalize {
                for c in 0..3 {
                    let mean = stats.mean[c];
                    let inv = 1.0 / stats.std[c].max(1e-6);
                    for v in px.index_axis_mut(Axis(2), c).iter_mut() {
                        *v = (*v - mean) * inv;
                    }
                }
            }
            Ok(Crop {
                pixels: px,
                kind: plan.kind,
                source_view: plan.source_view,
                rect: plan.rect,
            })
        })
        .collect();

    Ok(ViewBatch { crops: crops?, t })
}

fn draw_index(rng: &mut impl Rng, n: usize) -> usize {
    ((rng.random::<f64>() * n as f64) as usize).min(n - 1)
}

const ASPECT_LO: f64 = 0.75;
const ASPECT_HI: f64 = 4.0 / 3.0;
const RECT_ATTEMPTS: usize = 10;

/// Sample a rectangle with area fraction uniform in `range` and aspect ratio
/// uniform in [3/4, 4/3]; after ten infeasible draws, fall back to the
/// largest centered square within the area range.
fn draw_rect(rng: &mut impl Rng, img_h: usize, img_w: usize, range: (f64, f64)) -> CropRect {
    let area = (img_h * img_w) as f64;
    for _ in 0..RECT_ATTEMPTS {
        let frac = range.0 + (range.1 - range.0) * rng.random::<f64>();
        let ar = ASPECT_LO + (ASPECT_HI - ASPECT_LO) * rng.random::<f64>();
        let target = frac * area;
        let w = (target * ar).sqrt().round() as usize;
        let h = (target / ar).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= img_w && h <= img_h {
            let x = draw_index(rng, img_w - w + 1);
            let y = draw_index(rng, img_h - h + 1);
            return CropRect { x, y, w, h };
        }
    }
    let side = ((range.1 * area).sqrt() as usize)
        .min(img_h)
        .min(img_w)
        .max(1);
    CropRect {
        x: (img_w - side) / 2,
        y: (img_h - side) / 2,
        w: side,
        h: side,
    }
}

/// Convenience for tests and the trainer: resolve normalization stats from a
/// dataset when the spec leaves them unset.
pub fn resolve_normalization(
    spec: &CropSpec,
    dataset: &crate::scene_store::SceneDataset,
) -> Result<CropSpec, crate::scene_store::StoreError> {
    if spec.normalize.is_some() {
        return Ok(spec.clone());
    }
    let (mean, std) = dataset.channel_stats(64)?;
    let mut out = spec.clone();
    out.normalize = Some(ChannelStats { mean, std });
    Ok(out)
}
