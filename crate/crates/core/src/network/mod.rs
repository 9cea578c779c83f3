//! Backbone + projection head pairs.
//!
//! The student and teacher share one architecture with independent
//! parameters. The teacher starts as a copy of the student and is never
//! touched by the optimizer; it only moves through the EMA update. After
//! pretraining the teacher's backbone (head discarded) is the transfer
//! artifact.

mod head;
mod resnet;
mod tiny;

pub use head::{HeadCache, ProjectionHead};
pub use resnet::{ResNet18, ResNetCache, RESNET18_FEATURE_DIM};
pub use tiny::{TinyCache, TinyCnn, TINY_FEATURE_DIM};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{GradMap, Scalar, TensorKind, TensorMut, TensorRef};
use crate::rng::{rng_for, stream};
use crate::tensor_file::{self, TensorFileError};
use crate::view_sampler::ViewBatch;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("{arch:?} produces {expected}-dim features, but feature_dim is {got}")]
    FeatureDim {
        arch: Arch,
        expected: usize,
        got: usize,
    },
    #[error("head input width {head_input} does not match backbone feature dim {feature_dim}")]
    HeadInput {
        head_input: usize,
        feature_dim: usize,
    },
    #[error("head needs layer_dims [input, w1, w2, w3] (exactly 3 linear layers); got {got:?}")]
    HeadLayers { got: Vec<usize> },
    #[error(transparent)]
    TensorFile(#[from] TensorFileError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint missing tensor {name}")]
    MissingTensor { name: String },
    #[error("tensor {name}: checkpoint shape {got:?} != model shape {expected:?}")]
    TensorShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint holds {count} tensors not present in the model, e.g. {example}")]
    UnexpectedTensors { count: usize, example: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Resnet18,
    TinyCnn,
}

impl Arch {
    pub fn natural_feature_dim(&self) -> usize {
        match self {
            Arch::Resnet18 => RESNET18_FEATURE_DIM,
            Arch::TinyCnn => TINY_FEATURE_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub feature_dim: usize,
}

impl BackboneConfig {
    pub fn resnet18() -> Self {
        Self {
            arch: Arch::Resnet18,
            feature_dim: RESNET18_FEATURE_DIM,
        }
    }

    pub fn tiny_cnn() -> Self {
        Self {
            arch: Arch::TinyCnn,
            feature_dim: TINY_FEATURE_DIM,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let expected = self.arch.natural_feature_dim();
        if self.feature_dim != expected {
            return Err(NetworkError::FeatureDim {
                arch: self.arch,
                expected,
                got: self.feature_dim,
            });
        }
        Ok(())
    }
}

/// Head widths as [input, w1, w2, w3]: three linear layers, output w3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub dino_compat: bool,
}

impl HeadConfig {
    /// The standard head for each backbone: 512 -> 512 -> 64 -> 2048 at
    /// full scale, proportionally smaller for the desk-scale backbone.
    pub fn default_for(arch: Arch) -> Self {
        let layer_dims = match arch {
            Arch::Resnet18 => vec![512, 512, 64, 2048],
            Arch::TinyCnn => vec![64, 64, 32, 128],
        };
        Self {
            layer_dims,
            dino_compat: false,
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated layer dims")
    }

    pub fn validate(&self, feature_dim: usize) -> Result<(), NetworkError> {
        if self.layer_dims.len() != 4 {
            return Err(NetworkError::HeadLayers {
                got: self.layer_dims.clone(),
            });
        }
        if self.layer_dims[0] != feature_dim {
            return Err(NetworkError::HeadInput {
                head_input: self.layer_dims[0],
                feature_dim,
            });
        }
        if self.layer_dims.contains(&0) {
            return Err(NetworkError::HeadLayers {
                got: self.layer_dims.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Backbone<F> {
    Resnet18(ResNet18<F>),
    Tiny(TinyCnn<F>),
}

#[allow(clippy::large_enum_variant)]
pub enum BackboneCache<F> {
    Resnet18(ResNetCache<F>),
    Tiny(TinyCache<F>),
}

impl<F: Scalar> Backbone<F> {
    pub fn init(cfg: &BackboneConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self, NetworkError> {
        cfg.validate()?;
        Ok(match cfg.arch {
            Arch::Resnet18 => Backbone::Resnet18(ResNet18::init(rng)),
            Arch::TinyCnn => Backbone::Tiny(TinyCnn::init(rng)),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            Backbone::Resnet18(_) => Arch::Resnet18,
            Backbone::Tiny(_) => Arch::TinyCnn,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Resnet18(b) => b.feature_dim(),
            Backbone::Tiny(b) => b.feature_dim(),
        }
    }

    pub fn forward_train(
        &mut self,
        x: Array4<F>,
        update_running: bool,
    ) -> (Array2<F>, BackboneCache<F>) {
        match self {
            Backbone::Resnet18(b) => {
                let (f, c) = b.forward_train(x, update_running);
                (f, BackboneCache::Resnet18(c))
            }
            Backbone::Tiny(b) => {
                let (f, c) = b.forward_train(x, update_running);
                (f, BackboneCache::Tiny(c))
            }
        }
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array2<F> {
        match self {
            Backbone::Resnet18(b) => b.forward_eval(x),
            Backbone::Tiny(b) => b.forward_eval(x),
        }
    }

    pub fn backward(
        &self,
        cache: &BackboneCache<F>,
        dfeats: &Array2<F>,
        prefix: &str,
        grads: &mut GradMap<F>,
    ) -> Array4<F> {
        match (self, cache) {
            (Backbone::Resnet18(b), BackboneCache::Resnet18(c)) => {
                b.backward(c, dfeats, prefix, grads)
            }
            (Backbone::Tiny(b), BackboneCache::Tiny(c)) => b.backward(c, dfeats, prefix, grads),
            _ => unreachable!("cache arch mismatch"),
        }
    }

    pub fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_, F>> {
        match self {
            Backbone::Resnet18(b) => b.tensors(prefix),
            Backbone::Tiny(b) => b.tensors(prefix),
        }
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_, F>> {
        match self {
            Backbone::Resnet18(b) => b.tensors_mut(prefix),
            Backbone::Tiny(b) => b.tensors_mut(prefix),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Network<F> {
    pub backbone: Backbone<F>,
    pub head: ProjectionHead<F>,
}

pub struct NetCache<F> {
    backbone: BackboneCache<F>,
    head: HeadCache<F>,
}

impl<F: Scalar> Network<F> {
    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn forward_train(
        &mut self,
        x: Array4<F>,
        update_running: bool,
    ) -> (Array2<F>, NetCache<F>) {
        let (feats, bcache) = self.backbone.forward_train(x, update_running);
        let (logits, hcache) = self.head.forward_cached(feats);
        (
            logits,
            NetCache {
                backbone: bcache,
                head: hcache,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array2<F> {
        let feats = self.backbone.forward_eval(x);
        self.head.forward(&feats)
    }

    pub fn backward(&self, cache: &NetCache<F>, dlogits: &Array2<F>, grads: &mut GradMap<F>) {
        let dfeats = self.head.backward(&cache.head, dlogits, "head", grads);
        self.backbone.backward(&cache.backbone, &dfeats, "backbone", grads);
    }

    /// Every named tensor (params and running stats), read-only views.
    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        let mut out = self.backbone.tensors("backbone");
        out.extend(self.head.tensors("head"));
        out
    }

    /// Every named tensor, mutable views.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        let mut out = self.backbone.tensors_mut("backbone");
        out.extend(self.head.tensors_mut("head"));
        out
    }

    /// Snapshot of every named tensor (params and running stats).
    pub fn named_tensors(&self) -> Vec<(String, ArrayD<F>)> {
        self.tensors()
            .into_iter()
            .map(|t| (t.name, t.view.to_owned()))
            .collect()
    }

    /// Names of trainable parameters in traversal order.
    pub fn param_names(&self) -> Vec<String> {
        self.tensors()
            .into_iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| t.name)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct StudentTeacherPair<F> {
    pub student: Network<F>,
    pub teacher: Network<F>,
}

/// Build the pair: student seeded, teacher an exact copy marked EMA-only.
pub fn build_pair<F: Scalar>(
    backbone_cfg: &BackboneConfig,
    head_cfg: &HeadConfig,
    init_seed: u64,
) -> Result<StudentTeacherPair<F>, NetworkError> {
    backbone_cfg.validate()?;
    head_cfg.validate(backbone_cfg.feature_dim)?;
    let mut rng = rng_for(&[stream::INIT, init_seed]);
    let backbone = Backbone::init(backbone_cfg, &mut rng)?;
    let head = ProjectionHead::init(head_cfg, &mut rng);
    let student = Network { backbone, head };
    let teacher = student.clone();
    Ok(StudentTeacherPair { student, teacher })
}

pub struct MultiResCache<F> {
    groups: Vec<(Vec<usize>, NetCache<F>)>,
    rows: usize,
}

/// Forward a multi-resolution crop batch through one network: crops of equal
/// spatial size run as one grouped pass (batch statistics shared within the
/// group), and output rows are scattered back to input crop order.
///
/// `indices` selects which crops participate; row i of the output is crop
/// `indices[i]`.
pub fn forward_multires_train<F: Scalar>(
    net: &mut Network<F>,
    batch: &ViewBatch,
    indices: &[usize],
    update_running: bool,
) -> (Array2<F>, MultiResCache<F>) {
    let k = net.output_dim();
    let mut logits = Array2::<F>::zeros((indices.len(), k));
    let mut groups = Vec::new();
    for (positions, group_indices) in group_by_size(batch, indices) {
        let x = batch.stack_nchw(&group_indices);
        let x = x.mapv(|v| F::from_f32(v).unwrap());
        let (group_logits, cache) = net.forward_train(x, update_running);
        for (row, &pos) in positions.iter().enumerate() {
            logits.row_mut(pos).assign(&group_logits.row(row));
        }
        groups.push((positions, cache));
    }
    (
        logits,
        MultiResCache {
            groups,
            rows: indices.len(),
        },
    )
}

/// Backward through a grouped multi-resolution forward.
pub fn backward_multires<F: Scalar>(
    net: &Network<F>,
    cache: &MultiResCache<F>,
    dlogits: &Array2<F>,
    grads: &mut GradMap<F>,
) {
    assert_eq!(dlogits.nrows(), cache.rows, "gradient row count");
    for (positions, group_cache) in &cache.groups {
        let mut dgroup = Array2::<F>::zeros((positions.len(), dlogits.ncols()));
        for (row, &pos) in positions.iter().enumerate() {
            dgroup.row_mut(row).assign(&dlogits.row(pos));
        }
        net.backward(group_cache, &dgroup, grads);
    }
}

/// Group crop indices by spatial size, preserving first-appearance order.
/// Returns (positions within `indices`, crop indices) per group.
fn group_by_size(batch: &ViewBatch, indices: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = Vec::new();
    let mut by_size: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (pos, &ci) in indices.iter().enumerate() {
        let size = batch.crops[ci].pixels.dim().0;
        if !by_size.contains_key(&size) {
            order.push(size);
        }
        let entry = by_size.entry(size).or_default();
        entry.0.push(pos);
        entry.1.push(ci);
    }
    order
        .into_iter()
        .map(|s| by_size.remove(&s).expect("group recorded"))
        .collect()
}

const BACKBONE_PREFIX: &str = "backbone";

#[derive(Debug, Serialize, Deserialize)]
struct BackboneHeader {
    kind: String,
    arch: Arch,
    feature_dim: usize,
}

/// Serialize the teacher's backbone — the transfer artifact. The projection
/// head is absent from the file by construction.
pub fn export_backbone(pair: &StudentTeacherPair<f32>, path: &Path) -> Result<(), NetworkError> {
    let header = serde_json::to_value(BackboneHeader {
        kind: "backbone".into(),
        arch: pair.teacher.backbone.arch(),
        feature_dim: pair.teacher.backbone.feature_dim(),
    })
    .expect("header serializable");
    tensor_file::write_tensors(
        path,
        &header,
        pair.teacher
            .backbone
            .tensors(BACKBONE_PREFIX)
            .into_iter()
            .map(|t| (t.name, t.view)),
    )?;
    Ok(())
}

/// Load an exported backbone.
pub fn load_backbone(path: &Path) -> Result<(Backbone<f32>, BackboneConfig), NetworkError> {
    let (header, tensors) = tensor_file::read_tensors(path)?;
    let header: BackboneHeader =
        serde_json::from_value(header).map_err(|e| NetworkError::Checkpoint {
            path: path.display().to_string(),
            message: format!("bad header: {e}"),
        })?;
    if header.kind != "backbone" {
        return Err(NetworkError::Checkpoint {
            path: path.display().to_string(),
            message: format!("expected a backbone export, found kind {:?}", header.kind),
        });
    }
    let cfg = BackboneConfig {
        arch: header.arch,
        feature_dim: header.feature_dim,
    };
    let mut rng = rng_for(&[stream::INIT, 0]);
    let mut backbone = Backbone::<f32>::init(&cfg, &mut rng)?;
    assign_tensors(&tensors, backbone.tensors_mut(BACKBONE_PREFIX))?;
    Ok((backbone, cfg))
}

/// Assign checkpoint tensors onto a model's mutable views; every model
/// tensor must be present with a matching shape, and the checkpoint may not
/// carry extras.
pub fn assign_tensors<F: Scalar>(
    source: &BTreeMap<String, ArrayD<F>>,
    targets: Vec<TensorMut<'_, F>>,
) -> Result<(), NetworkError> {
    let mut model_names = std::collections::BTreeSet::new();
    let mut used = 0usize;
    for mut t in targets {
        model_names.insert(t.name.clone());
        match source.get(&t.name) {
            None => return Err(NetworkError::MissingTensor { name: t.name }),
            Some(src) => {
                if src.shape() != t.view.shape() {
                    return Err(NetworkError::TensorShape {
                        name: t.name,
                        got: src.shape().to_vec(),
                        expected: t.view.shape().to_vec(),
                    });
                }
                t.view.assign(src);
                used += 1;
            }
        }
    }
    if used < source.len() {
        let extra: Vec<&String> = source.keys().filter(|k| !model_names.contains(*k)).collect();
        if let Some(example) = extra.first() {
            return Err(NetworkError::UnexpectedTensors {
                count: extra.len(),
                example: (*example).clone(),
            });
        }
    }
    Ok(())
}
