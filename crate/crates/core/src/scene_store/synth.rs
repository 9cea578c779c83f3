//! Deterministic synthetic temporal scenes for desk-scale runs.
//!
//! Each scene carries a latent class rendered as a procedural texture family
//! (stripe orientation / blob grid); color, frequency, phase, and waveform
//! vary per scene so class identity lives in spatial structure rather than
//! palette. Temporal views apply smooth photometric drift (brightness and a
//! small hue rotation) plus one localized content change that grows over the
//! view sequence, standing in for illumination, weather, and construction
//! style changes. Generation is a pure function of the spec: same arguments,
//! same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;

use crate::rng::{rng_for, stream};

use super::{
    load_labeled_dataset, load_scene_dataset, Image, LabeledDataset, SceneDataset, StoreError,
    MANIFEST_NAME, MIN_SCENE_DIM,
};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_scenes: usize,
    pub t: usize,
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// Render a synthetic dataset under `root` and return it loaded.
///
/// Layout matches the scene contract (`root/<scene_id>/view_<t>.png`) with a
/// `manifest.json` sidecar mapping scene_id to class_name. Classes are
/// assigned round-robin so counts stay balanced.
pub fn generate_synthetic_dataset(root: &Path, spec: &SynthSpec) -> Result<SceneDataset, StoreError> {
    if spec.height < MIN_SCENE_DIM || spec.width < MIN_SCENE_DIM {
        return Err(StoreError::SizeBelowMinimum {
            h: spec.height,
            w: spec.width,
            min: MIN_SCENE_DIM,
        });
    }
    if spec.n_scenes == 0 || spec.t == 0 || spec.n_classes == 0 {
        return Err(StoreError::InvalidSpec(format!(
            "n_scenes={}, t={}, n_classes={} must all be at least 1",
            spec.n_scenes, spec.t, spec.n_classes
        )));
    }
    fs::create_dir_all(root).map_err(|e| StoreError::Io {
        path: root.to_path_buf(),
        source: e,
    })?;

    let digits = spec.n_scenes.to_string().len().max(4);
    let results: Vec<Result<(), StoreError>> = (0..spec.n_scenes)
        .into_par_iter()
        .map(|idx| {
            let scene_id = format!("scene_{idx:0width$}", width = digits);
            let dir = root.join(&scene_id);
            fs::create_dir_all(&dir).map_err(|e| StoreError::Io {
                path: dir.clone(),
                source: e,
            })?;
            let class = idx % spec.n_classes;
            for view in 0..spec.t {
                let img = render_view(spec, idx, class, view);
                let path = dir.join(format!("view_{view:02}.png"));
                img.save_png(&path)?;
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }

    let manifest: BTreeMap<String, String> = (0..spec.n_scenes)
        .map(|idx| {
            (
                format!("scene_{idx:0width$}", width = digits),
                format!("class_{}", idx % spec.n_classes),
            )
        })
        .collect();
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializable");
    let mpath = root.join(MANIFEST_NAME);
    fs::write(&mpath, text).map_err(|e| StoreError::Io {
        path: mpath,
        source: e,
    })?;

    load_scene_dataset(root, spec.t)
}

struct SceneParams {
    color_lo: [f32; 3],
    color_hi: [f32; 3],
    freq: f64,
    freq2: f64,
    phase: f64,
    phase2: f64,
    sharp: f64,
    thresholded: bool,
    duty: f64,
    noise_amp: f64,
    bright_amp: f64,
    bright_phase: f64,
    hue_amp: f64,
    change_x: usize,
    change_y: usize,
    change_r: usize,
    change_amp: f64,
}

fn draw_params(spec: &SynthSpec, scene_idx: usize, class: usize) -> SceneParams {
    let mut rng = rng_for(&[stream::SYNTH, spec.seed, scene_idx as u64]);
    // shared palette with mild per-scene jitter: color carries almost no
    // scene identity, so representations must rely on spatial structure
    let base_lo = [0.18f64, 0.24, 0.30];
    let base_hi = [0.72f64, 0.66, 0.60];
    let mut jitter = |base: [f64; 3]| -> [f32; 3] {
        [
            (base[0] + 0.05 * (2.0 * rng.random::<f64>() - 1.0)) as f32,
            (base[1] + 0.05 * (2.0 * rng.random::<f64>() - 1.0)) as f32,
            (base[2] + 0.05 * (2.0 * rng.random::<f64>() - 1.0)) as f32,
        ]
    };
    let color_lo = jitter(base_lo);
    let color_hi = jitter(base_hi);
    let tier = (class / 4) as f64;
    let base: f64 = 3.0 + 5.0 * rng.random::<f64>();
    let freq = base * 2.0f64.powf(tier);
    let freq2 = (3.0 + 5.0 * rng.random::<f64>()) * 2.0f64.powf(tier);
    let phase = std::f64::consts::TAU * rng.random::<f64>();
    let phase2 = std::f64::consts::TAU * rng.random::<f64>();
    let sharp = 0.6 + 1.9 * rng.random::<f64>();
    let thresholded = rng.random::<f64>() < 0.5;
    let duty = 0.35 + 0.3 * rng.random::<f64>();
    let noise_amp = 0.02 + 0.02 * rng.random::<f64>();
    let bright_amp = 0.05 + 0.15 * rng.random::<f64>();
    let bright_phase = std::f64::consts::TAU * rng.random::<f64>();
    let hue_amp = 0.04 + 0.08 * rng.random::<f64>();
    let max_r = (spec.height.min(spec.width) / 6).max(4);
    let change_r = 4 + (rng.random::<f64>() * (max_r - 4) as f64) as usize;
    let change_x = change_r + (rng.random::<f64>() * (spec.width - 2 * change_r) as f64) as usize;
    let change_y = change_r + (rng.random::<f64>() * (spec.height - 2 * change_r) as f64) as usize;
    let change_amp = 0.25 + 0.25 * rng.random::<f64>();
    SceneParams {
        color_lo,
        color_hi,
        freq,
        freq2,
        phase,
        phase2,
        sharp,
        thresholded,
        duty,
        noise_amp,
        bright_amp,
        bright_phase,
        hue_amp,
        change_x,
        change_y,
        change_r,
        change_amp,
    }
}

fn pattern_value(p: &SceneParams, class: usize, x: usize, y: usize, h: usize, w: usize) -> f64 {
    let xf = x as f64 / w as f64;
    let yf = y as f64 / h as f64;
    let s = match class % 4 {
        0 => (std::f64::consts::TAU * p.freq * yf + p.phase).sin(),
        1 => (std::f64::consts::TAU * p.freq * xf + p.phase).sin(),
        2 => (std::f64::consts::TAU * p.freq * (xf + yf) * 0.5 + p.phase).sin(),
        _ => {
            (std::f64::consts::TAU * p.freq * xf + p.phase).sin()
                * (std::f64::consts::TAU * p.freq2 * yf + p.phase2).sin()
        }
    };
    let v = 0.5 * (s + 1.0);
    if p.thresholded {
        if v > p.duty {
            1.0
        } else {
            0.0
        }
    } else {
        v.powf(p.sharp)
    }
}

fn render_view(spec: &SynthSpec, scene_idx: usize, class: usize, view: usize) -> Image {
    let (h, w) = (spec.height, spec.width);
    let p = draw_params(spec, scene_idx, class);
    let mut noise_rng = rng_for(&[stream::SYNTH, spec.seed, scene_idx as u64, view as u64, 1]);

    // smooth photometric drift across the view sequence
    let tf = if spec.t > 1 {
        view as f64 / (spec.t - 1) as f64
    } else {
        0.0
    };
    let bright = 1.0 + p.bright_amp * (std::f64::consts::TAU * tf + p.bright_phase).sin();
    let hue = p.hue_amp * (std::f64::consts::TAU * tf + p.bright_phase * 0.5).cos();
    let change = p.change_amp * tf;

    let mut pixels = Array3::<f32>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let t = pattern_value(&p, class, x, y, h, w);
            let noise = (noise_rng.random::<f64>() * 2.0 - 1.0) * p.noise_amp;
            let mut rgb = [0.0f64; 3];
            for (ci, v) in rgb.iter_mut().enumerate() {
                let lo = p.color_lo[ci] as f64;
                let hi = p.color_hi[ci] as f64;
                *v = lo + (hi - lo) * t;
            }
            // hue drift as a slight cyclic channel rotation
            let mixed = [
                (1.0 - hue.abs()) * rgb[0] + hue.max(0.0) * rgb[1] + (-hue).max(0.0) * rgb[2],
                (1.0 - hue.abs()) * rgb[1] + hue.max(0.0) * rgb[2] + (-hue).max(0.0) * rgb[0],
                (1.0 - hue.abs()) * rgb[2] + hue.max(0.0) * rgb[0] + (-hue).max(0.0) * rgb[1],
            ];
            // localized content change: a soft disk brightening over time
            let dx = x as f64 - p.change_x as f64;
            let dy = y as f64 - p.change_y as f64;
            let d = (dx * dx + dy * dy).sqrt() / p.change_r as f64;
            let blob = if d < 1.0 { (1.0 - d * d).max(0.0) } else { 0.0 };
            for ci in 0..3 {
                let v = (mixed[ci] * bright + change * blob + noise).clamp(0.0, 1.0);
                pixels[(y, x, ci)] = v as f32;
            }
        }
    }
    Image::new(pixels).expect("synthetic pixels finite")
}

/// Materialize a labeled class-per-folder dataset from a synthetic scene
/// dataset: each temporal view is copied to
/// `out_root/<class_name>/<scene_id>_<view>.png`.
pub fn export_class_folders(
    dataset: &SceneDataset,
    out_root: &Path,
) -> Result<LabeledDataset, StoreError> {
    if !dataset.has_classes() {
        return Err(StoreError::InvalidSpec(
            "scene dataset carries no class manifest".into(),
        ));
    }
    fs::create_dir_all(out_root).map_err(|e| StoreError::Io {
        path: out_root.to_path_buf(),
        source: e,
    })?;
    for idx in 0..dataset.len() {
        let class = dataset
            .class_of(idx)
            .ok_or_else(|| StoreError::InvalidSpec(format!(
                "scene {} missing from manifest",
                dataset.scene_id(idx)
            )))?
            .to_string();
        let class_dir = out_root.join(&class);
        fs::create_dir_all(&class_dir).map_err(|e| StoreError::Io {
            path: class_dir.clone(),
            source: e,
        })?;
        for (vi, vp) in dataset.entries()[idx].view_paths.iter().enumerate() {
            let dest = class_dir.join(format!("{}_{vi:02}.png", dataset.scene_id(idx)));
            fs::copy(vp, &dest).map_err(|e| StoreError::Io {
                path: dest.clone(),
                source: e,
            })?;
        }
    }
    load_labeled_dataset(out_root)
}
