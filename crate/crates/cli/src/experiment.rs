//! Staged experiment runner.
//!
//! Stages: initialization (pretraining, an external checkpoint, or random
//! init) → per-dataset linear-probe and fine-tune sweeps → figures. Each
//! completed stage is recorded in `manifest.json` with its artifact, and a
//! rerun over an existing output directory skips completed stages, so an
//! interrupted experiment continues where it stopped and deterministic
//! configs produce identical final reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tempossl_core::eval::{self, EvalError, EvalMode, EvalReport, EvalRow};
use tempossl_core::network::{
    build_pair, export_backbone, load_backbone, Backbone, NetworkError,
};
use tempossl_core::pretrain::{
    self, select_subset, write_train_log, PretrainConfig, TrainError,
};
use tempossl_core::rng::{rng_for, stream};
use tempossl_core::scene_store::{load_labeled_dataset, load_scene_dataset, StoreError};

use crate::config::{AugmentationMode, ConfigError, ExperimentConfig};
use crate::plot::{emit_plots, PlotError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} unreadable: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StageStatus {
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything needed to interpret the run's outputs, persisted as
/// `manifest.json` in the output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub git_commit: Option<String>,
    #[serde(default)]
    pub created_unix: u64,
    pub init_name: String,
    pub resolved_config: ExperimentConfig,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub stages: BTreeMap<String, StageStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Manifest {
    fn stage_done(&self, stage: &str) -> bool {
        self.stages.get(stage).map(|s| s.done).unwrap_or(false)
    }

    fn mark_done(&mut self, stage: &str, artifact: Option<String>) {
        self.stages.insert(
            stage.to_string(),
            StageStatus {
                done: true,
                artifact,
                error: None,
            },
        );
    }
}

fn git_commit() -> Option<String> {
    let out = Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()?;
    if out.status.success() {
        Some(String::from_utf8_lossy(&out.stdout).trim().to_string())
    } else {
        None
    }
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), ExperimentError> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializable");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn read_manifest(dir: &Path) -> Result<Option<Manifest>, ExperimentError> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let m = serde_json::from_str(&text).map_err(|e| ExperimentError::Manifest {
        path,
        message: e.to_string(),
    })?;
    Ok(Some(m))
}

/// Run (or resume) an experiment; returns the final manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Manifest, ExperimentError> {
    let warnings = cfg.validate()?;
    let out_dir = cfg.output_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;

    let mut manifest = match read_manifest(&out_dir)? {
        Some(m) => m,
        None => Manifest {
            name: cfg.name.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_commit: git_commit(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            init_name: cfg.init_name().to_string(),
            resolved_config: cfg.clone(),
            warnings: warnings.clone(),
            stages: BTreeMap::new(),
            failure: None,
        },
    };
    manifest.failure = None;
    write_manifest(&out_dir, &manifest)?;

    let result = run_stages(cfg, &out_dir, &mut manifest);
    if let Err(e) = &result {
        manifest.failure = Some(e.to_string());
        write_manifest(&out_dir, &manifest)?;
        return result.map(|_| manifest);
    }
    write_manifest(&out_dir, &manifest)?;
    Ok(manifest)
}

fn run_stages(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    manifest: &mut Manifest,
) -> Result<(), ExperimentError> {
    let backbone_path = out_dir.join("checkpoints").join("backbone.ckpt");

    // ---- initialization stage
    if !manifest.stage_done("init") || !backbone_path.exists() {
        prepare_backbone(cfg, out_dir, &backbone_path)?;
        manifest.mark_done("init", Some(backbone_path.display().to_string()));
        write_manifest(out_dir, manifest)?;
    }
    let (backbone, _) = load_backbone(&backbone_path)?;

    // ---- per-dataset sweeps
    let reports_dir = out_dir.join("reports");
    fs::create_dir_all(&reports_dir).map_err(|e| io_err(&reports_dir, e))?;
    let mut all_rows: Vec<EvalRow> = Vec::new();
    for ds_ref in &cfg.datasets {
        let labeled = load_labeled_dataset(&ds_ref.root)?;
        for warning in &labeled.warnings {
            eprintln!("note: {}: {warning}", ds_ref.name);
        }
        for mode in [EvalMode::LinearProbe, EvalMode::FineTune] {
            let stage = format!("eval:{}:{}", ds_ref.name, mode.as_str());
            let stage_file = reports_dir.join(format!(
                "eval_{}_{}.jsonl",
                ds_ref.name,
                mode.as_str()
            ));
            if manifest.stage_done(&stage) && stage_file.exists() {
                all_rows.extend(eval::read_eval_rows(&stage_file)?);
                continue;
            }
            let records = match mode {
                EvalMode::LinearProbe => eval::linear_probe(&backbone, &labeled, &cfg.eval)?,
                EvalMode::FineTune => eval::fine_tune(&backbone, &labeled, &cfg.eval)?,
            };
            let report = EvalReport {
                dataset_name: ds_ref.name.clone(),
                init_name: manifest.init_name.clone(),
                mode,
                records,
            };
            let rows = report.rows();
            eval::write_eval_rows(&stage_file, &rows).map_err(|e| io_err(&stage_file, e))?;
            all_rows.extend(rows);
            manifest.mark_done(&stage, Some(stage_file.display().to_string()));
            write_manifest(out_dir, manifest)?;
        }
    }

    // ---- combined report + figures
    let report_path = out_dir.join("eval_report.jsonl");
    eval::write_eval_rows(&report_path, &all_rows).map_err(|e| io_err(&report_path, e))?;
    let figures_dir = out_dir.join("figures");
    let produced = emit_plots(std::slice::from_ref(&report_path), &figures_dir)?;
    manifest.mark_done(
        "report",
        Some(format!("{} (+{} figures)", report_path.display(), produced.len())),
    );
    Ok(())
}

/// Produce `checkpoints/backbone.ckpt` for whichever initialization arm the
/// config selects.
fn prepare_backbone(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    backbone_path: &Path,
) -> Result<(), ExperimentError> {
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;

    if let Some(external) = &cfg.external_backbone {
        fs::copy(external, backbone_path).map_err(|e| io_err(backbone_path, e))?;
        // validate it loads
        load_backbone(backbone_path)?;
        return Ok(());
    }

    if let Some(section) = &cfg.pretrain {
        let mut pre_cfg: PretrainConfig = section.config.clone();
        pre_cfg.checkpoint_dir = Some(ckpt_dir.clone());
        let dataset = load_scene_dataset(&section.data_root, section.t)?;
        let dataset = match cfg.augmentation_mode {
            AugmentationMode::NaturalTemporal => {
                pre_cfg.crop_spec.artificial_aug = false;
                dataset
            }
            AugmentationMode::ArtificialDino => {
                pre_cfg.crop_spec.artificial_aug = true;
                dataset.truncate_views(1)
            }
        };
        let dataset = match section.subset_fraction {
            Some(f) => select_subset(&dataset, f, pre_cfg.seed)?,
            None => dataset,
        };
        let out = pretrain::pretrain(&dataset, &pre_cfg)?;
        write_train_log(&out_dir.join("train_log.jsonl"), &out.records)?;
        export_backbone(&out.pair, backbone_path)?;
        return Ok(());
    }

    // random initialization: an untrained pair's teacher backbone
    let backbone_cfg = cfg.random_init.ok_or_else(|| {
        ConfigError::Invalid(
            "no initialization arm: set pretrain, external_backbone, or random_init".into(),
        )
    })?;
    let head = tempossl_core::network::HeadConfig::default_for(backbone_cfg.arch);
    let pair = build_pair::<f32>(&backbone_cfg, &head, cfg.eval.seed)?;
    export_backbone(&pair, backbone_path)?;
    Ok(())
}

/// Load the backbone an experiment produced (for chaining external arms).
pub fn experiment_backbone(out_dir: &Path) -> Result<Backbone<f32>, ExperimentError> {
    let path = out_dir.join("checkpoints").join("backbone.ckpt");
    Ok(load_backbone(&path)?.0)
}

/// Seeded random backbone, exported for standalone `evaluate --random-init`.
pub fn random_backbone(
    cfg: &tempossl_core::network::BackboneConfig,
    seed: u64,
) -> Result<Backbone<f32>, NetworkError> {
    let mut rng = rng_for(&[stream::INIT, seed]);
    Backbone::init(cfg, &mut rng)
}
