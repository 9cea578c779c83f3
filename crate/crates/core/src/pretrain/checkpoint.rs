//! Checkpoint write/read for exact resume.
//!
//! A checkpoint carries both networks (parameters and running statistics),
//! the optimizer moments and step count, the distillation center, and the
//! epoch cursor. Restoring all of it makes a resumed run step-identical to
//! an uninterrupted one; random streams need no cursors because every draw
//! is derived from (seed, epoch, scene index).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD};
use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, DistillState};
use crate::network::{assign_tensors, build_pair, BackboneConfig, HeadConfig, StudentTeacherPair};
use crate::nn::{AdamConfig, AdamW};
use crate::tensor_file;

use super::{PretrainConfig, TrainError};

pub const CHECKPOINT_KIND: &str = "pretrain";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    epoch_cursor: usize,
    adam_step: u64,
    seed: u64,
    k: usize,
    backbone: BackboneConfig,
    head: HeadConfig,
    distill: DistillConfig,
    adam: AdamConfig,
}

pub struct ResumePoint {
    pub pair: StudentTeacherPair<f32>,
    pub distill: DistillState<f32>,
    pub optimizer: AdamW<f32>,
    pub epoch_cursor: usize,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub seed: u64,
}

/// Write `dir/epoch_NNNN.ckpt` and return its path.
pub fn write_checkpoint(
    dir: &Path,
    cfg: &PretrainConfig,
    pair: &StudentTeacherPair<f32>,
    state: &DistillState<f32>,
    opt: &AdamW<f32>,
    epoch_cursor: usize,
) -> Result<PathBuf, TrainError> {
    fs::create_dir_all(dir).map_err(|e| TrainError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(format!("epoch_{epoch_cursor:04}.ckpt"));
    let head = cfg.head_config();
    let header = CheckpointHeader {
        kind: CHECKPOINT_KIND.into(),
        epoch_cursor,
        adam_step: opt.step_count,
        seed: cfg.seed,
        k: head.output_dim(),
        backbone: cfg.backbone,
        head,
        distill: cfg.distill.clone(),
        adam: opt.cfg.clone(),
    };
    let header = serde_json::to_value(&header).expect("header serializable");

    let mut tensors: Vec<(String, ArrayD<f32>)> = Vec::new();
    for t in pair.student.tensors() {
        tensors.push((format!("student.{}", t.name), t.view.to_owned()));
    }
    for t in pair.teacher.tensors() {
        tensors.push((format!("teacher.{}", t.name), t.view.to_owned()));
    }
    for (name, m, v) in opt.state() {
        tensors.push((format!("optim.m.{name}"), m.clone()));
        tensors.push((format!("optim.v.{name}"), v.clone()));
    }
    tensors.push(("distill.center".into(), state.center.clone().into_dyn()));

    tensor_file::write_tensors(&path, &header, tensors.iter().map(|(n, a)| (n.clone(), a.view())))?;
    Ok(path)
}

/// Load a checkpoint back into live training state.
pub fn resume(path: &Path) -> Result<ResumePoint, TrainError> {
    let (header, mut tensors) = tensor_file::read_tensors(path)?;
    let header: CheckpointHeader =
        serde_json::from_value(header).map_err(|e| TrainError::CorruptField {
            field: "header".into(),
            detail: e.to_string(),
        })?;
    if header.kind != CHECKPOINT_KIND {
        return Err(TrainError::CorruptField {
            field: "kind".into(),
            detail: format!("expected {CHECKPOINT_KIND:?}, found {:?}", header.kind),
        });
    }

    let mut pair = build_pair::<f32>(&header.backbone, &header.head, header.seed)?;

    let student: BTreeMap<String, ArrayD<f32>> = strip_prefix(&mut tensors, "student.");
    assign_tensors(&student, pair.student.tensors_mut())?;
    let teacher: BTreeMap<String, ArrayD<f32>> = strip_prefix(&mut tensors, "teacher.");
    assign_tensors(&teacher, pair.teacher.tensors_mut())?;

    let center = tensors
        .remove("distill.center")
        .ok_or_else(|| TrainError::CorruptField {
            field: "distill.center".into(),
            detail: "missing from checkpoint".into(),
        })?;
    if header.k != header.head.output_dim() {
        return Err(TrainError::CorruptField {
            field: "k".into(),
            detail: format!(
                "header K={} does not match head output dim {}",
                header.k,
                header.head.output_dim()
            ),
        });
    }
    if center.ndim() != 1 || center.len() != header.k {
        return Err(TrainError::CorruptField {
            field: "distill.center".into(),
            detail: format!(
                "length {} does not match head output dim K={}",
                center.len(),
                header.k
            ),
        });
    }
    let center: Array1<f32> = center
        .into_dimensionality()
        .map_err(|e| TrainError::CorruptField {
            field: "distill.center".into(),
            detail: e.to_string(),
        })?;

    let mut distill = DistillState::new(header.k, &header.distill);
    distill.center = center;

    let mut optimizer = AdamW::<f32>::new(header.adam.clone());
    optimizer.step_count = header.adam_step;
    let moments_m = strip_prefix(&mut tensors, "optim.m.");
    let moments_v = strip_prefix(&mut tensors, "optim.v.");
    for (name, m) in moments_m {
        let v = moments_v
            .get(&name)
            .ok_or_else(|| TrainError::CorruptField {
                field: format!("optim.v.{name}"),
                detail: "second moment missing".into(),
            })?
            .clone();
        optimizer.restore_slot(name, m, v);
    }

    Ok(ResumePoint {
        pair,
        distill,
        optimizer,
        epoch_cursor: header.epoch_cursor,
        backbone: header.backbone,
        head: header.head,
        seed: header.seed,
    })
}

fn strip_prefix(
    tensors: &mut BTreeMap<String, ArrayD<f32>>,
    prefix: &str,
) -> BTreeMap<String, ArrayD<f32>> {
    let keys: Vec<String> = tensors
        .keys()
        .filter(|k| k.starts_with(prefix))
        .cloned()
        .collect();
    let mut out = BTreeMap::new();
    for k in keys {
        let v = tensors.remove(&k).expect("key listed");
        out.insert(k[prefix.len()..].to_string(), v);
    }
    out
}
