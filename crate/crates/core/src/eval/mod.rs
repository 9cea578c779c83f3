//! Downstream evaluation: linear probing and fine-tuning.
//!
//! The protocol is fixed: Adam at lr 0.001, 20 epochs, batch 64, step-decay
//! schedule; an 80/20 class-stratified split whose test side is shared by
//! every label fraction and initialization, so accuracy curves are
//! comparable. Linear probing trains a single linear layer on frozen
//! backbone features (the backbone is never borrowed mutably); fine-tuning
//! clones the backbone per fraction and trains everything.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{Backbone, NetworkError};
use crate::nn::{accumulate, init, AdamConfig, AdamW, GradMap, Linear, TensorKind};
use crate::pretrain::OptimizerConfig;
use crate::rng::{rng_for, stream};
use crate::scene_store::{LabeledDataset, StoreError};
use crate::view_sampler::{crop_and_resize, ChannelStats};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sample(#[from] crate::view_sampler::SampleError),
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error(
        "class {class} has no training samples at fraction {fraction}; use a larger label fraction"
    )]
    ClassAbsent { class: String, fraction: f64 },
    #[error("dataset must have at least 2 classes (found {found})")]
    TooFewClasses { found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    LinearProbe,
    FineTune,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::LinearProbe => "linear_probe",
            EvalMode::FineTune => "fine_tune",
        }
    }
}

/// Step-decay learning-rate schedule: lr <- lr * gamma every step_size epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLrConfig {
    pub step_size: usize,
    pub gamma: f64,
}

impl Default for StepLrConfig {
    fn default() -> Self {
        Self {
            step_size: 7,
            gamma: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: StepLrConfig,
    pub label_fractions: Vec<f64>,
    /// (train fraction, test fraction), class-stratified.
    pub split: (f64, f64),
    pub seed: u64,
    /// Images are resized to this square input before the backbone.
    pub input_size: usize,
    /// Computed from the train split when unset.
    #[serde(default)]
    pub normalize: Option<ChannelStats>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig {
                name: "adam".into(),
                lr: 1e-3,
                weight_decay: 0.0,
            },
            epochs: 20,
            batch_size: 64,
            lr_schedule: StepLrConfig::default(),
            label_fractions: vec![0.01, 0.1, 0.5, 1.0],
            split: (0.8, 0.2),
            seed: 0,
            input_size: 224,
            normalize: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(EvalError::InvalidConfig(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if self.label_fractions.is_empty() {
            return Err(EvalError::InvalidConfig("label_fractions is empty".into()));
        }
        let mut prev = 0.0;
        for &f in &self.label_fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(EvalError::InvalidConfig(format!(
                    "label fraction {f} outside (0, 1]"
                )));
            }
            if f < prev {
                return Err(EvalError::InvalidConfig(
                    "label_fractions must be sorted ascending".into(),
                ));
            }
            prev = f;
        }
        let (tr, te) = self.split;
        if !(tr > 0.0 && te > 0.0 && (tr + te - 1.0).abs() < 1e-9) {
            return Err(EvalError::InvalidConfig(format!(
                "split ({tr}, {te}) must be positive and sum to 1"
            )));
        }
        if self.input_size == 0 {
            return Err(EvalError::InvalidConfig("input_size must be positive".into()));
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

    fn lr_scale(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .gamma
            .powi((epoch / self.lr_schedule.step_size.max(1)) as i32)
    }
}

/// One (fraction, accuracy) measurement.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FractionRecord {
    pub fraction: f64,
    pub top1_accuracy: f64,
    pub n_train_used: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub dataset_name: String,
    pub init_name: String,
    pub mode: EvalMode,
    pub records: Vec<FractionRecord>,
}

/// Flattened JSONL row: one line per (dataset, init, mode, fraction).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub init: String,
    pub mode: EvalMode,
    pub fraction: f64,
    pub top1_accuracy: f64,
    pub n_train_used: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<EvalRow> {
        self.records
            .iter()
            .map(|r| EvalRow {
                dataset: self.dataset_name.clone(),
                init: self.init_name.clone(),
                mode: self.mode,
                fraction: r.fraction,
                top1_accuracy: r.top1_accuracy,
                n_train_used: r.n_train_used,
                seed: r.seed,
            })
            .collect()
    }
}

/// Class-stratified train/test split, seeded; per class, the first
/// ⌈train_frac·n_c⌉ shuffled items train and the rest test.
pub fn stratified_split(
    dataset: &LabeledDataset,
    train_frac: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.items.iter().enumerate() {
        by_class.entry(item.class_index).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut ids) in by_class {
        shuffle(&mut ids, &[stream::EVAL_SPLIT, seed, class as u64]);
        let n_train = ((train_frac * ids.len() as f64).floor() as usize)
            .max(usize::from(!ids.is_empty()))
            .min(ids.len());
        train.extend_from_slice(&ids[..n_train]);
        test.extend_from_slice(&ids[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn shuffle(ids: &mut [usize], seed_parts: &[u64]) {
    let mut rng = rng_for(seed_parts);
    for i in (1..ids.len()).rev() {
        let j = ((rng.random::<f64>() * (i + 1) as f64) as usize).min(i);
        ids.swap(i, j);
    }
}

/// Per-class stratified subsample: ⌊fraction·n_c⌋ items per class, at least
/// one whenever the class is non-empty; deterministic given the seed.
pub fn subsample_labels(dataset: &LabeledDataset, fraction: f64, seed: u64) -> LabeledDataset {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let picked = subsample_indices(dataset, &all, fraction, seed);
    LabeledDataset {
        root: dataset.root.clone(),
        classes: dataset.classes.clone(),
        items: picked.iter().map(|&i| dataset.items[i].clone()).collect(),
        warnings: Vec::new(),
    }
}

/// Stratified subsample of the given item indices (used on the train split).
pub fn subsample_indices(
    dataset: &LabeledDataset,
    ids: &[usize],
    fraction: f64,
    seed: u64,
) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in ids {
        by_class
            .entry(dataset.items[i].class_index)
            .or_default()
            .push(i);
    }
    let mut out = Vec::new();
    for (class, mut members) in by_class {
        shuffle(&mut members, &[stream::LABEL_SUBSAMPLE, seed, class as u64]);
        let take = ((fraction * members.len() as f64).floor() as usize)
            .max(usize::from(!members.is_empty()))
            .min(members.len());
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    out
}

/// Load, resize, and normalize one image to a CHW tensor slice.
fn image_tensor(
    dataset: &LabeledDataset,
    idx: usize,
    input_size: usize,
    normalize: &ChannelStats,
) -> Result<ndarray::Array3<f32>, EvalError> {
    let img = dataset.load_image(idx)?;
    let full = (0, 0, img.width(), img.height());
    let resized = crop_and_resize(&img, full, input_size)?;
    let px = resized.pixels();
    let mut chw = ndarray::Array3::<f32>::zeros((3, input_size, input_size));
    for c in 0..3 {
        let mean = normalize.mean[c];
        let inv = 1.0 / normalize.std[c].max(1e-6);
        let mut plane = chw.index_axis_mut(Axis(0), c);
        plane.assign(&px.index_axis(Axis(2), c));
        plane.mapv_inplace(|v| (v - mean) * inv);
    }
    Ok(chw)
}

fn batch_tensor(
    dataset: &LabeledDataset,
    ids: &[usize],
    input_size: usize,
    normalize: &ChannelStats,
) -> Result<Array4<f32>, EvalError> {
    let parts: Result<Vec<ndarray::Array3<f32>>, EvalError> = ids
        .par_iter()
        .map(|&i| image_tensor(dataset, i, input_size, normalize))
        .collect();
    let parts = parts?;
    let mut out = Array4::<f32>::zeros((ids.len(), 3, input_size, input_size));
    for (n, p) in parts.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), n).assign(&p);
    }
    Ok(out)
}

/// Dataset-derived normalization from (at most 512) train-split images.
fn resolve_eval_normalization(
    dataset: &LabeledDataset,
    train_ids: &[usize],
    cfg: &EvalConfig,
) -> Result<ChannelStats, EvalError> {
    if let Some(stats) = cfg.normalize {
        return Ok(stats);
    }
    let take = train_ids.len().min(512);
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0.0f64;
    for &i in &train_ids[..take] {
        let img = dataset.load_image(i)?;
        for c in 0..3 {
            for &v in img.pixels().index_axis(Axis(2), c).iter() {
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
    Ok(ChannelStats { mean, std })
}

/// Softmax cross-entropy loss gradient for a classifier batch.
fn ce_grad(logits: &Array2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let n = logits.nrows();
    let mut grad = Array2::<f32>::zeros(logits.raw_dim());
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row.iter() {
            denom += ((v - max) as f64).exp();
        }
        let log_denom = denom.ln();
        for (k, &v) in row.iter().enumerate() {
            let logp = (v - max) as f64 - log_denom;
            let p = logp.exp();
            let target = if k == labels[i] { 1.0 } else { 0.0 };
            grad[(i, k)] = ((p - target) / n as f64) as f32;
            if k == labels[i] {
                loss -= logp;
            }
        }
    }
    (loss / n as f64, grad)
}

fn argmax_row(row: ndarray::ArrayView1<'_, f32>) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn top1_accuracy(logits: &Array2<f32>, labels: &[usize]) -> f64 {
    let correct = logits
        .outer_iter()
        .zip(labels.iter())
        .filter(|(row, &l)| argmax_row(row.view()) == l)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn check_every_class_present(
    dataset: &LabeledDataset,
    ids: &[usize],
    fraction: f64,
) -> Result<(), EvalError> {
    let mut seen = vec![false; dataset.n_classes()];
    for &i in ids {
        seen[dataset.items[i].class_index] = true;
    }
    for (c, present) in seen.iter().enumerate() {
        if !present {
            return Err(EvalError::ClassAbsent {
                class: dataset.classes[c].clone(),
                fraction,
            });
        }
    }
    Ok(())
}

/// Train a linear classifier on fixed feature rows.
fn train_linear_classifier(
    features: &Array2<f32>,
    labels: &[usize],
    n_classes: usize,
    cfg: &EvalConfig,
) -> Linear<f32> {
    let dim = features.ncols();
    let mut rng = rng_for(&[stream::EVAL_TRAIN, cfg.seed]);
    let (weight, bias) = init::linear_uniform(&mut rng, n_classes, dim);
    let mut layer = Linear { weight, bias };
    let mut opt = AdamW::<f32>::new(cfg.adam_config());
    let n = features.nrows();

    for epoch in 0..cfg.epochs {
        let lr_s = cfg.lr_scale(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &[stream::EVAL_TRAIN, cfg.seed, epoch as u64, 1]);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array2::<f32>::zeros((chunk.len(), dim));
            let mut y = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).assign(&features.row(i));
                y.push(labels[i]);
            }
            let logits = layer.forward(&x);
            let (_, dlogits) = ce_grad(&logits, &y);
            let (_, dw, db) = layer.backward(&x, &dlogits);
            opt.begin_step();
            opt.update("weight", &mut layer.weight.view_mut().into_dyn(), &dw.into_dyn(), lr_s);
            opt.update("bias", &mut layer.bias.view_mut().into_dyn(), &db.into_dyn(), lr_s);
        }
    }
    layer
}

/// Extract frozen features for the given items, batched.
pub fn extract_features(
    backbone: &Backbone<f32>,
    dataset: &LabeledDataset,
    ids: &[usize],
    input_size: usize,
    normalize: &ChannelStats,
    batch_size: usize,
) -> Result<Array2<f32>, EvalError> {
    let dim = backbone.feature_dim();
    let mut out = Array2::<f32>::zeros((ids.len(), dim));
    for (chunk_idx, chunk) in ids.chunks(batch_size.max(1)).enumerate() {
        let x = batch_tensor(dataset, chunk, input_size, normalize)?;
        let feats = backbone.forward_eval(&x);
        let start = chunk_idx * batch_size;
        for r in 0..chunk.len() {
            out.row_mut(start + r).assign(&feats.row(r));
        }
    }
    Ok(out)
}

/// Linear probing: the backbone stays frozen (shared reference — it cannot
/// be mutated), a linear classifier trains on its features per label
/// fraction, and held-out top-1 accuracy is reported.
pub fn linear_probe(
    backbone: &Backbone<f32>,
    dataset: &LabeledDataset,
    cfg: &EvalConfig,
) -> Result<Vec<FractionRecord>, EvalError> {
    cfg.validate()?;
    if dataset.n_classes() < 2 {
        return Err(EvalError::TooFewClasses {
            found: dataset.n_classes(),
        });
    }
    let (train_ids, test_ids) = stratified_split(dataset, cfg.split.0, cfg.seed);
    let normalize = resolve_eval_normalization(dataset, &train_ids, cfg)?;

    let train_feats = extract_features(
        backbone,
        dataset,
        &train_ids,
        cfg.input_size,
        &normalize,
        cfg.batch_size,
    )?;
    let test_feats = extract_features(
        backbone,
        dataset,
        &test_ids,
        cfg.input_size,
        &normalize,
        cfg.batch_size,
    )?;
    let test_labels: Vec<usize> = test_ids
        .iter()
        .map(|&i| dataset.items[i].class_index)
        .collect();

    let mut records = Vec::new();
    for &fraction in &cfg.label_fractions {
        let sub = subsample_indices(dataset, &train_ids, fraction, cfg.seed);
        check_every_class_present(dataset, &sub, fraction)?;
        // map subsampled ids to train-feature rows
        let row_of: BTreeMap<usize, usize> =
            train_ids.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        let mut feats = Array2::<f32>::zeros((sub.len(), train_feats.ncols()));
        let mut labels = Vec::with_capacity(sub.len());
        for (r, &i) in sub.iter().enumerate() {
            feats.row_mut(r).assign(&train_feats.row(row_of[&i]));
            labels.push(dataset.items[i].class_index);
        }
        let classifier = train_linear_classifier(&feats, &labels, dataset.n_classes(), cfg);
        let logits = classifier.forward(&test_feats);
        records.push(FractionRecord {
            fraction,
            top1_accuracy: top1_accuracy(&logits, &test_labels),
            n_train_used: sub.len(),
            seed: cfg.seed,
        });
    }
    Ok(records)
}

/// Fine-tuning: per fraction, clone the input backbone, attach a fresh
/// linear classifier, and train every parameter.
pub fn fine_tune(
    backbone: &Backbone<f32>,
    dataset: &LabeledDataset,
    cfg: &EvalConfig,
) -> Result<Vec<FractionRecord>, EvalError> {
    fine_tune_detailed(backbone, dataset, cfg).map(|(records, _)| records)
}

/// [`fine_tune`] plus the trained backbone from the last fraction, so
/// callers can verify every parameter was trainable.
pub fn fine_tune_detailed(
    backbone: &Backbone<f32>,
    dataset: &LabeledDataset,
    cfg: &EvalConfig,
) -> Result<(Vec<FractionRecord>, Backbone<f32>), EvalError> {
    cfg.validate()?;
    if dataset.n_classes() < 2 {
        return Err(EvalError::TooFewClasses {
            found: dataset.n_classes(),
        });
    }
    let (train_ids, test_ids) = stratified_split(dataset, cfg.split.0, cfg.seed);
    let normalize = resolve_eval_normalization(dataset, &train_ids, cfg)?;

    let mut records = Vec::new();
    let mut last_net = backbone.clone();
    for &fraction in &cfg.label_fractions {
        let sub = subsample_indices(dataset, &train_ids, fraction, cfg.seed);
        check_every_class_present(dataset, &sub, fraction)?;
        let labels: Vec<usize> = sub.iter().map(|&i| dataset.items[i].class_index).collect();

        let mut net = backbone.clone();
        let mut rng = rng_for(&[stream::EVAL_TRAIN, cfg.seed, 2]);
        let (weight, bias) = init::linear_uniform(&mut rng, dataset.n_classes(), net.feature_dim());
        let mut classifier = Linear { weight, bias };
        let mut opt = AdamW::<f32>::new(cfg.adam_config());

        for epoch in 0..cfg.epochs {
            let lr_s = cfg.lr_scale(epoch);
            let mut order: Vec<usize> = (0..sub.len()).collect();
            shuffle(&mut order, &[stream::EVAL_TRAIN, cfg.seed, epoch as u64, 3]);
            for chunk in order.chunks(cfg.batch_size) {
                let ids: Vec<usize> = chunk.iter().map(|&r| sub[r]).collect();
                let y: Vec<usize> = chunk.iter().map(|&r| labels[r]).collect();
                let x = batch_tensor(dataset, &ids, cfg.input_size, &normalize)?;
                let (feats, cache) = net.forward_train(x, true);
                let logits = classifier.forward(&feats);
                let (_, dlogits) = ce_grad(&logits, &y);
                let (dfeats, dw, db) = classifier.backward(&feats, &dlogits);
                let mut grads = GradMap::new();
                accumulate(&mut grads, "classifier.weight", dw.into_dyn());
                accumulate(&mut grads, "classifier.bias", db.into_dyn());
                net.backward(&cache, &dfeats, "backbone", &mut grads);

                opt.begin_step();
                for t in net.tensors_mut("backbone") {
                    if t.kind == TensorKind::Param {
                        let mut view = t.view;
                        if let Some(g) = grads.get(&t.name) {
                            opt.update(&t.name, &mut view, g, lr_s);
                        }
                    }
                }
                opt.update(
                    "classifier.weight",
                    &mut classifier.weight.view_mut().into_dyn(),
                    &grads["classifier.weight"],
                    lr_s,
                );
                opt.update(
                    "classifier.bias",
                    &mut classifier.bias.view_mut().into_dyn(),
                    &grads["classifier.bias"],
                    lr_s,
                );
            }
        }

        // held-out evaluation with running statistics
        let mut correct = 0usize;
        for chunk in test_ids.chunks(cfg.batch_size) {
            let x = batch_tensor(dataset, chunk, cfg.input_size, &normalize)?;
            let feats = net.forward_eval(&x);
            let logits = classifier.forward(&feats);
            for (r, &i) in chunk.iter().enumerate() {
                if argmax_row(logits.row(r)) == dataset.items[i].class_index {
                    correct += 1;
                }
            }
        }
        records.push(FractionRecord {
            fraction,
            top1_accuracy: correct as f64 / test_ids.len().max(1) as f64,
            n_train_used: sub.len(),
            seed: cfg.seed,
        });
        last_net = net;
    }
    Ok((records, last_net))
}

/// Write flattened eval rows as line-delimited JSON.
pub fn write_eval_rows(path: &Path, rows: &[EvalRow]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializable"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Read flattened eval rows from line-delimited JSON.
pub fn read_eval_rows(path: &Path) -> Result<Vec<EvalRow>, EvalError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvalError::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line).map_err(|e| {
            EvalError::InvalidConfig(format!("{} line {}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(rows)
}
