//! Temporal scene stacks and labeled datasets on disk.
//!
//! Two directory contracts:
//! - scene layout: `root/<scene_id>/<view_0..T-1>.<ext>` — one subdirectory
//!   per geolocation holding exactly T co-registered temporal views, ordered
//!   lexicographically by filename
//! - labeled layout: `root/<class_name>/<image>.<ext>` — one subdirectory per
//!   class, class indices assigned by sorted folder name
//!
//! Scene and view ordering are pure functions of directory contents; nothing
//! depends on filesystem enumeration order. Images decode lazily to RGB with
//! intensities scaled to [0, 1].

mod synth;

pub use synth::{export_class_folders, generate_synthetic_dataset, SynthSpec};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use thiserror::Error;

/// Smallest edge length accepted for pretraining views; the default local
/// crop is 96 px and must fit inside every view.
pub const MIN_SCENE_DIM: usize = 96;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff"];

/// Filename of the synthetic class sidecar, mapping scene_id -> class_name.
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{0}")]
    ViewCount(ViewCountError),
    #[error("no scene directories under {root}")]
    NoScenes { root: PathBuf },
    #[error("no class directories under {root}")]
    NoClasses { root: PathBuf },
    #[error("scene {scene_id}: {detail}")]
    InconsistentScene { scene_id: String, detail: String },
    #[error("view {path} is {h}x{w}; pretraining views must be at least {min}x{min}")]
    ViewTooSmall {
        path: PathBuf,
        h: usize,
        w: usize,
        min: usize,
    },
    #[error("non-finite intensity in image {path}")]
    NonFinite { path: PathBuf },
    #[error("synthetic size {h}x{w} below the {min}-pixel minimum")]
    SizeBelowMinimum { h: usize, w: usize, min: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("manifest {path} malformed: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("empty subset requested from dataset of {len} scenes")]
    EmptySubset { len: usize },
}

/// Reports every scene whose view-file count differs from T.
#[derive(Debug)]
pub struct ViewCountError {
    pub expected: usize,
    pub offenders: Vec<(String, usize)>,
}

impl fmt::Display for ViewCountError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "expected {} view files per scene; offending scenes:", self.expected)?;
        for (id, n) in &self.offenders {
            write!(f, " {id} ({n} files)")?;
        }
        Ok(())
    }
}

/// A decoded image: H x W x C intensities in [0, 1], RGB channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f32>,
    channels: [&'static str; 3],
}

impl Image {
    pub fn new(pixels: Array3<f32>) -> Result<Self, StoreError> {
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                path: PathBuf::from("<in-memory>"),
            });
        }
        Ok(Self {
            pixels,
            channels: ["R", "G", "B"],
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, StoreError> {
        let img = image::open(path).map_err(|e| StoreError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let mut pixels = Array3::<f32>::zeros((h as usize, w as usize, 3));
        for (x, y, p) in rgb.enumerate_pixels() {
            for ci in 0..3 {
                pixels[(y as usize, x as usize, ci)] = p.0[ci] as f32 / 255.0;
            }
        }
        Ok(Self {
            pixels,
            channels: ["R", "G", "B"],
        })
    }

    /// Quantize to 8-bit RGB and write a PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), StoreError> {
        let (h, w, _) = self.pixels.dim();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(self.pixels[(y, x, 0)]),
                    quantize(self.pixels[(y, x, 1)]),
                    quantize(self.pixels[(y, x, 2)]),
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| StoreError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn channels(&self) -> &[&'static str; 3] {
        &self.channels
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One geolocation: an ordered stack of T co-registered temporal views.
#[derive(Debug, Clone)]
pub struct TemporalScene {
    pub scene_id: String,
    pub views: Vec<Image>,
    pub geotag: Option<(f64, f64)>,
}

impl TemporalScene {
    pub fn new(
        scene_id: String,
        views: Vec<Image>,
        geotag: Option<(f64, f64)>,
    ) -> Result<Self, StoreError> {
        if views.is_empty() {
            return Err(StoreError::InconsistentScene {
                scene_id,
                detail: "scene has no views".into(),
            });
        }
        let (h, w, c) = views[0].pixels.dim();
        for (i, v) in views.iter().enumerate() {
            if v.pixels.dim() != (h, w, c) {
                return Err(StoreError::InconsistentScene {
                    scene_id,
                    detail: format!(
                        "view {i} is {:?}, expected {:?}",
                        v.pixels.dim(),
                        (h, w, c)
                    ),
                });
            }
        }
        Ok(Self {
            scene_id,
            views,
            geotag,
        })
    }

    pub fn t(&self) -> usize {
        self.views.len()
    }
}

#[derive(Debug, Clone)]
pub struct SceneEntry {
    pub scene_id: String,
    pub view_paths: Vec<PathBuf>,
}

/// A scene dataset rooted at a directory; views decode lazily per access.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub t: usize,
    entries: Vec<SceneEntry>,
    classes: Option<BTreeMap<String, String>>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SceneEntry] {
        &self.entries
    }

    pub fn scene_id(&self, idx: usize) -> &str {
        &self.entries[idx].scene_id
    }

    /// Decode all T views of one scene.
    pub fn load_scene(&self, idx: usize) -> Result<TemporalScene, StoreError> {
        let entry = &self.entries[idx];
        let mut views = Vec::with_capacity(entry.view_paths.len());
        for p in &entry.view_paths {
            let img = Image::from_file(p)?;
            if img.height() < MIN_SCENE_DIM || img.width() < MIN_SCENE_DIM {
                return Err(StoreError::ViewTooSmall {
                    path: p.clone(),
                    h: img.height(),
                    w: img.width(),
                    min: MIN_SCENE_DIM,
                });
            }
            views.push(img);
        }
        TemporalScene::new(entry.scene_id.clone(), views, None)
    }

    /// Latent class from the synthetic sidecar manifest, when present.
    pub fn class_of(&self, idx: usize) -> Option<&str> {
        self.classes
            .as_ref()
            .and_then(|m| m.get(self.scene_id(idx)))
            .map(String::as_str)
    }

    pub fn has_classes(&self) -> bool {
        self.classes.is_some()
    }

    /// A new dataset restricted to the given scene indices (order kept).
    pub fn subset(&self, indices: &[usize]) -> Result<SceneDataset, StoreError> {
        if indices.is_empty() {
            return Err(StoreError::EmptySubset { len: self.len() });
        }
        let entries = indices.iter().map(|&i| self.entries[i].clone()).collect();
        Ok(SceneDataset {
            root: self.root.clone(),
            t: self.t,
            entries,
            classes: self.classes.clone(),
        })
    }

    /// The same scenes with only the first `n` temporal views each — the
    /// artificial-augmentation arm trains on static images (T = 1) while
    /// keeping budgets comparable.
    pub fn truncate_views(&self, n: usize) -> SceneDataset {
        let n = n.clamp(1, self.t);
        let entries = self
            .entries
            .iter()
            .map(|e| SceneEntry {
                scene_id: e.scene_id.clone(),
                view_paths: e.view_paths[..n].to_vec(),
            })
            .collect();
        SceneDataset {
            root: self.root.clone(),
            t: n,
            entries,
            classes: self.classes.clone(),
        }
    }

    /// Per-channel mean and standard deviation over (at most) the first
    /// `max_scenes` scenes' first views. Deterministic sampling so derived
    /// normalization constants are reproducible.
    pub fn channel_stats(&self, max_scenes: usize) -> Result<([f32; 3], [f32; 3]), StoreError> {
        let n = self.len().min(max_scenes.max(1));
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0.0f64;
        for idx in 0..n {
            let entry = &self.entries[idx];
            let img = Image::from_file(&entry.view_paths[0])?;
            for c in 0..3 {
                for &v in img.pixels.index_axis(ndarray::Axis(2), c).iter() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += (img.height() * img.width()) as f64;
        }
        let mut mean = [0.0f32; 3];
        let mut std = [0.0f32; 3];
        for c in 0..3 {
            let m = sum[c] / count;
            mean[c] = m as f32;
            std[c] = ((sq[c] / count - m * m).max(1e-12)).sqrt() as f32;
        }
        Ok((mean, std))
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn read_dir_sorted(root: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut out = Vec::new();
    let rd = fs::read_dir(root).map_err(|e| StoreError::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    for entry in rd {
        let entry = entry.map_err(|e| StoreError::Io {
            path: root.to_path_buf(),
            source: e,
        })?;
        out.push(entry.path());
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// Load a scene dataset: one subdirectory per scene, each holding exactly
/// `t` image files. Scenes whose view count differs are collected into a
/// single error listing every offender.
pub fn load_scene_dataset(root: &Path, t: usize) -> Result<SceneDataset, StoreError> {
    let mut entries = Vec::new();
    let mut offenders = Vec::new();
    for dir in read_dir_sorted(root)? {
        if !dir.is_dir() {
            continue;
        }
        let scene_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let views: Vec<PathBuf> = read_dir_sorted(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        if views.len() != t {
            offenders.push((scene_id, views.len()));
            continue;
        }
        entries.push(SceneEntry {
            scene_id,
            view_paths: views,
        });
    }
    if !offenders.is_empty() {
        return Err(StoreError::ViewCount(ViewCountError {
            expected: t,
            offenders,
        }));
    }
    if entries.is_empty() {
        return Err(StoreError::NoScenes {
            root: root.to_path_buf(),
        });
    }
    let classes = read_manifest(root)?;
    Ok(SceneDataset {
        root: root.to_path_buf(),
        t,
        entries,
        classes,
    })
}

fn read_manifest(root: &Path) -> Result<Option<BTreeMap<String, String>>, StoreError> {
    let path = root.join(MANIFEST_NAME);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| StoreError::Io {
        path: path.clone(),
        source: e,
    })?;
    let map: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| StoreError::Manifest {
            path,
            message: e.to_string(),
        })?;
    Ok(Some(map))
}

#[derive(Debug, Clone)]
pub struct LabeledItem {
    pub path: PathBuf,
    pub class_index: usize,
}

/// Class-per-folder labeled dataset; indices follow sorted class names.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub items: Vec<LabeledItem>,
    pub warnings: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn load_image(&self, idx: usize) -> Result<Image, StoreError> {
        Image::from_file(&self.items[idx].path)
    }

    /// Per-class item counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes.len()];
        for item in &self.items {
            counts[item.class_index] += 1;
        }
        counts
    }
}

/// Load a labeled class-per-folder dataset. Empty class folders produce a
/// warning but keep their class index so label spaces stay comparable.
pub fn load_labeled_dataset(root: &Path) -> Result<LabeledDataset, StoreError> {
    let mut classes = Vec::new();
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for dir in read_dir_sorted(root)? {
        if !dir.is_dir() {
            continue;
        }
        let class_name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let class_index = classes.len();
        let files: Vec<PathBuf> = read_dir_sorted(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        if files.is_empty() {
            warnings.push(format!("class folder {class_name} is empty"));
        }
        for path in files {
            items.push(LabeledItem { path, class_index });
        }
        classes.push(class_name);
    }
    if classes.is_empty() {
        return Err(StoreError::NoClasses {
            root: root.to_path_buf(),
        });
    }
    Ok(LabeledDataset {
        root: root.to_path_buf(),
        classes,
        items,
        warnings,
    })
}
