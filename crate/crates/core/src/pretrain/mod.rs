//! The self-supervised training loop.
//!
//! Per step: sample temporal multi-crop batches for a chunk of scenes,
//! forward the student on every crop and the teacher on global crops only,
//! average the per-scene multi-view losses, step the optimizer on the
//! student, update the center from the step's teacher logits, then EMA the
//! teacher toward the student. Scene order per epoch is a seeded
//! permutation; per-scene crop seeds derive from (seed, epoch, scene index),
//! so loader parallelism cannot perturb results.

mod checkpoint;

pub use checkpoint::{resume, write_checkpoint, ResumePoint, CHECKPOINT_KIND};

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{
    ema_update, mean_teacher_entropy, multiview_loss_grad, teacher_probs, update_center,
    DistillConfig, DistillError, DistillState,
};
use crate::network::{
    backward_multires, build_pair, forward_multires_train, BackboneConfig, HeadConfig,
    NetworkError, StudentTeacherPair,
};
use crate::nn::{AdamConfig, AdamW, GradMap, TensorKind};
use crate::rng::{derive_seed, rng_for, stream};
use crate::scene_store::{SceneDataset, StoreError};
use crate::tensor_file::TensorFileError;
use crate::view_sampler::{resolve_normalization, sample_views, CropSpec, SampleError, ViewBatch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    TensorFile(#[from] TensorFileError),
    #[error("non-finite loss at epoch {epoch} step {step}; last good checkpoint: {last_checkpoint}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_checkpoint: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint field {field}: {detail}")]
    CorruptField { field: String, detail: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("subset fraction {0} must lie in (0, 1]")]
    BadFraction(f64),
    #[error("subset of {requested} scenes from {available} is empty")]
    EmptySubsetFraction { requested: usize, available: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    /// "adamw" (decoupled weight decay) or "adam" (decay ignored).
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            lr: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub scenes_per_step: usize,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    pub crop_spec: CropSpec,
    pub distill: DistillConfig,
    pub backbone: BackboneConfig,
    /// Defaults to the backbone's standard head when absent.
    #[serde(default)]
    pub head: Option<HeadConfig>,
    pub seed: u64,
    /// Checkpoint every N epochs (0 = final epoch only). Requires
    /// `checkpoint_dir`.
    pub checkpoint_every: usize,
    pub deterministic: bool,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl PretrainConfig {
    /// The full-scale configuration: ResNet-18 backbone, 10 global + 30
    /// local crops, 100 epochs.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            scenes_per_step: 8,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::Cosine,
            crop_spec: CropSpec::default(),
            distill: DistillConfig::default(),
            backbone: BackboneConfig::resnet18(),
            head: None,
            seed: 0,
            checkpoint_every: 10,
            deterministic: true,
            checkpoint_dir: None,
        }
    }

    /// CPU-friendly configuration used by tests and examples: tiny backbone,
    /// small crops sampled across T views. The teacher temperature anneals
    /// from 0.07 to 0.04 across the run — at this scale a sharp teacher
    /// from step one drains the diversity of the mean teacher distribution,
    /// while a soft one pins the loss at its entropy floor.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 20,
            scenes_per_step: 8,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::Cosine,
            crop_spec: CropSpec {
                n_global: 2,
                n_local: 6,
                global_size: 64,
                local_size: 32,
                ..CropSpec::default()
            },
            distill: DistillConfig {
                teacher_temp: 0.04,
                teacher_temp_warmup: Some((0.07, 20)),
                ..DistillConfig::default()
            },
            backbone: BackboneConfig::tiny_cnn(),
            head: None,
            seed: 0,
            checkpoint_every: 0,
            deterministic: true,
            checkpoint_dir: None,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        self.head
            .clone()
            .unwrap_or_else(|| HeadConfig::default_for(self.backbone.arch))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.scenes_per_step == 0 {
            return Err(TrainError::InvalidConfig(
                "scenes_per_step must be at least 1".into(),
            ));
        }
        match self.optimizer.name.as_str() {
            "adam" | "adamw" => {}
            other => {
                return Err(TrainError::InvalidConfig(format!(
                    "unknown optimizer {other:?} (expected adam or adamw)"
                )))
            }
        }
        Ok(())
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optimizer.lr,
            weight_decay: if self.optimizer.name == "adam" {
                0.0
            } else {
                self.optimizer.weight_decay
            },
            ..AdamConfig::default()
        }
    }
}

/// One training-step diagnostic line; serialized as JSONL.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub teacher_mean_entropy: f64,
    pub ema_momentum: f64,
    pub lr: f64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl TrainLogRecord {
    /// Equality over everything except wall-clock time.
    pub fn metrics_eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.step == other.step
            && self.loss == other.loss
            && self.teacher_mean_entropy == other.teacher_mean_entropy
            && self.ema_momentum == other.ema_momentum
            && self.lr == other.lr
            && self.warning == other.warning
    }
}

pub struct PretrainOutput {
    pub pair: StudentTeacherPair<f32>,
    pub distill: DistillState<f32>,
    pub records: Vec<TrainLogRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Train a fresh student/teacher pair on the dataset.
pub fn pretrain(dataset: &SceneDataset, cfg: &PretrainConfig) -> Result<PretrainOutput, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let head_cfg = cfg.head_config();
    let pair = build_pair::<f32>(&cfg.backbone, &head_cfg, cfg.seed)?;
    let k = pair.student.output_dim();
    let state = DistillState::new(k, &cfg.distill);
    let opt = AdamW::new(cfg.adam_config());
    run_loop(dataset, cfg, pair, state, opt, 0)
}

/// Continue training from a resume point; with deterministic configs the
/// result is step-identical to an uninterrupted run.
pub fn pretrain_from(
    dataset: &SceneDataset,
    cfg: &PretrainConfig,
    point: ResumePoint,
) -> Result<PretrainOutput, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if point.backbone != cfg.backbone {
        return Err(TrainError::InvalidConfig(format!(
            "checkpoint backbone {:?} does not match config {:?}",
            point.backbone, cfg.backbone
        )));
    }
    run_loop(
        dataset,
        cfg,
        point.pair,
        point.distill,
        point.optimizer,
        point.epoch_cursor,
    )
}

/// Pretrain on a deterministic seeded subset of ⌊fraction·N⌋ scenes.
pub fn pretrain_subset(
    dataset: &SceneDataset,
    fraction: f64,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput, TrainError> {
    let subset = select_subset(dataset, fraction, cfg.seed)?;
    pretrain(&subset, cfg)
}

/// The subset used by [`pretrain_subset`]: a seeded draw of ⌊fraction·N⌋
/// scenes, returned in the dataset's canonical order.
pub fn select_subset(
    dataset: &SceneDataset,
    fraction: f64,
    seed: u64,
) -> Result<SceneDataset, TrainError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::BadFraction(fraction));
    }
    let n = dataset.len();
    let take = ((fraction * n as f64).floor() as usize).min(n);
    if take == 0 {
        return Err(TrainError::EmptySubsetFraction {
            requested: take,
            available: n,
        });
    }
    let mut order = seeded_permutation(n, &[stream::SUBSET, seed]);
    order.truncate(take);
    order.sort_unstable();
    Ok(dataset.subset(&order)?)
}

fn seeded_permutation(n: usize, seed_parts: &[u64]) -> Vec<usize> {
    let mut rng = rng_for(seed_parts);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = (rand::Rng::random::<f64>(&mut rng) * (i + 1) as f64) as usize;
        order.swap(i, j.min(i));
    }
    order
}

fn lr_scale(schedule: LrSchedule, epoch: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => 1.0,
        LrSchedule::Cosine => {
            0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total.max(1) as f64).cos())
        }
    }
}

fn ema_lambda(distill: &DistillConfig, epoch: usize, total: usize) -> f64 {
    if distill.ema_cosine_to_one {
        let base = distill.ema_momentum;
        let cos = (std::f64::consts::PI * epoch as f64 / total.max(1) as f64).cos();
        1.0 - (1.0 - base) * 0.5 * (1.0 + cos)
    } else {
        distill.ema_momentum
    }
}

fn teacher_temp_for_epoch(distill: &DistillConfig, epoch: usize) -> f64 {
    match distill.teacher_temp_warmup {
        Some((initial, warmup_epochs)) if warmup_epochs > 0 && epoch < warmup_epochs => {
            let frac = epoch as f64 / warmup_epochs as f64;
            initial + (distill.teacher_temp - initial) * frac
        }
        _ => distill.teacher_temp,
    }
}

struct SceneSpan {
    student_start: usize,
    student_len: usize,
    teacher_start: usize,
    teacher_len: usize,
    pairing: Vec<usize>,
}

/// Concatenate per-scene view batches into one crop list, remembering each
/// scene's student rows, teacher rows, and same-crop pairing.
fn merge_batches(batches: Vec<ViewBatch>) -> (ViewBatch, Vec<SceneSpan>) {
    let t = batches.first().map(|b| b.t).unwrap_or(1);
    let mut crops = Vec::new();
    let mut spans = Vec::new();
    let mut teacher_off = 0usize;
    for batch in batches {
        let globals = batch.global_indices();
        let student_start = crops.len();
        let pairing = globals.clone();
        spans.push(SceneSpan {
            student_start,
            student_len: batch.crops.len(),
            teacher_start: teacher_off,
            teacher_len: globals.len(),
            pairing,
        });
        teacher_off += globals.len();
        crops.extend(batch.crops);
    }
    (ViewBatch { crops, t }, spans)
}

fn run_loop(
    dataset: &SceneDataset,
    cfg: &PretrainConfig,
    mut pair: StudentTeacherPair<f32>,
    mut state: DistillState<f32>,
    mut opt: AdamW<f32>,
    start_epoch: usize,
) -> Result<PretrainOutput, TrainError> {
    let spec = resolve_normalization(&cfg.crop_spec, dataset)?;
    let k = pair.student.output_dim();
    let ln_k = (k as f64).ln();
    let n = dataset.len();
    let mut records: Vec<TrainLogRecord> = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut global_step = opt.step_count as usize;

    for epoch in start_epoch..cfg.epochs {
        let lr_s = lr_scale(cfg.lr_schedule, epoch, cfg.epochs);
        let lambda = ema_lambda(&cfg.distill, epoch, cfg.epochs) as f32;
        state.teacher_temp = teacher_temp_for_epoch(&cfg.distill, epoch) as f32;
        let perm = seeded_permutation(n, &[stream::EPOCH_PERM, cfg.seed, epoch as u64]);

        let mut epoch_losses: Vec<f64> = Vec::new();
        let mut epoch_entropies: Vec<f64> = Vec::new();
        let mut all_below_alarm = true;

        for chunk in perm.chunks(cfg.scenes_per_step) {
            let t0 = Instant::now();
            let batches: Result<Vec<ViewBatch>, TrainError> = chunk
                .par_iter()
                .map(|&si| {
                    let scene = dataset.load_scene(si)?;
                    let crop_seed = derive_seed(&[cfg.seed, epoch as u64, si as u64]);
                    Ok(sample_views(&scene, &spec, crop_seed)?)
                })
                .collect();
            let (merged, spans) = merge_batches(batches?);
            let n_scenes = spans.len();

            let student_indices: Vec<usize> = (0..merged.crops.len()).collect();
            let teacher_indices = merged.global_indices();
            let (student_logits, scache) =
                forward_multires_train(&mut pair.student, &merged, &student_indices, true);
            // batch statistics, but the teacher's own running stats move
            // only through the EMA update
            let (teacher_logits, _tcache) =
                forward_multires_train(&mut pair.teacher, &merged, &teacher_indices, false);

            let entropy = mean_teacher_entropy(&teacher_probs(&teacher_logits, &state)?);

            let mut dlogits = Array2::<f32>::zeros(student_logits.raw_dim());
            let mut loss_sum = 0.0f64;
            let inv_scenes = 1.0 / n_scenes as f32;
            for span in &spans {
                let t_rows = teacher_logits
                    .slice(s![span.teacher_start..span.teacher_start + span.teacher_len, ..])
                    .to_owned();
                let s_rows = student_logits
                    .slice(s![span.student_start..span.student_start + span.student_len, ..])
                    .to_owned();
                let (loss, grad) = multiview_loss_grad(&t_rows, &s_rows, &span.pairing, &state)?;
                loss_sum += loss as f64;
                let mut target = dlogits.slice_mut(s![
                    span.student_start..span.student_start + span.student_len,
                    ..
                ]);
                target += &(&grad * inv_scenes);
            }
            let loss = loss_sum / n_scenes as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: global_step,
                    last_checkpoint: last_checkpoint
                        .as_ref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_else(|| "<none>".into()),
                });
            }

            let mut grads = GradMap::new();
            backward_multires(&pair.student, &scache, &dlogits, &mut grads);

            opt.begin_step();
            for t in pair.student.tensors_mut() {
                if t.kind == TensorKind::Param {
                    let mut view = t.view;
                    if let Some(g) = grads.get(&t.name) {
                        opt.update(&t.name, &mut view, g, lr_s);
                    }
                }
            }

            update_center(&mut state, &teacher_logits)?;
            ema_update(
                pair.teacher.tensors_mut().into_iter().map(|t| (t.name, t.view)),
                pair.student.tensors().into_iter().map(|t| (t.name, t.view)),
                lambda,
            )?;

            if entropy >= 0.1 * ln_k {
                all_below_alarm = false;
            }
            epoch_losses.push(loss);
            epoch_entropies.push(entropy);
            records.push(TrainLogRecord {
                epoch,
                step: global_step,
                loss,
                teacher_mean_entropy: entropy,
                ema_momentum: lambda as f64,
                lr: cfg.optimizer.lr * lr_s,
                wall_ms: t0.elapsed().as_millis() as u64,
                warning: None,
            });
            global_step += 1;
        }

        if all_below_alarm && !epoch_losses.is_empty() {
            let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
            records.push(TrainLogRecord {
                epoch,
                step: global_step,
                loss: mean(&epoch_losses),
                teacher_mean_entropy: mean(&epoch_entropies),
                ema_momentum: lambda as f64,
                lr: cfg.optimizer.lr * lr_s,
                wall_ms: 0,
                warning: Some(format!(
                    "collapse alarm: teacher mean entropy stayed below 0.1*ln(K)={:.4} for epoch {epoch}",
                    0.1 * ln_k
                )),
            });
        }

        if let Some(dir) = &cfg.checkpoint_dir {
            let due = if cfg.checkpoint_every > 0 {
                (epoch + 1 - start_epoch).is_multiple_of(cfg.checkpoint_every)
                    || epoch + 1 == cfg.epochs
            } else {
                epoch + 1 == cfg.epochs
            };
            if due {
                let path = write_checkpoint(dir, cfg, &pair, &state, &opt, epoch + 1)?;
                last_checkpoint = Some(path);
            }
        }
    }

    Ok(PretrainOutput {
        pair,
        distill: state,
        records,
        last_checkpoint,
    })
}

/// Write training log records as line-delimited JSON.
pub fn write_train_log(path: &std::path::Path, records: &[TrainLogRecord]) -> Result<(), TrainError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializable"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read a JSONL training log.
pub fn read_train_log(path: &std::path::Path) -> Result<Vec<TrainLogRecord>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrainLogRecord =
            serde_json::from_str(line).map_err(|e| TrainError::CorruptField {
                field: format!("train log line {}", i + 1),
                detail: e.to_string(),
            })?;
        out.push(rec);
    }
    Ok(out)
}
