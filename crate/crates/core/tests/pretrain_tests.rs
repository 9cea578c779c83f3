//! Training-loop contracts: loop accounting, EMA-only teacher movement,
//! determinism, checkpoint round-trips, exact resume, and seeded subsets.

use std::fs;

use tempfile::TempDir;

use tempossl_core::distill::DistillConfig;
use tempossl_core::pretrain::{
    pretrain, pretrain_from, pretrain_subset, resume, select_subset, write_checkpoint,
    PretrainConfig, TrainError,
};
use tempossl_core::scene_store::{generate_synthetic_dataset, SceneDataset, SynthSpec};
use tempossl_core::view_sampler::CropSpec;

fn mini_dataset(dir: &TempDir, n_scenes: usize, t: usize) -> SceneDataset {
    generate_synthetic_dataset(
        dir.path(),
        &SynthSpec {
            n_scenes,
            t,
            n_classes: 2,
            height: 96,
            width: 96,
            seed: 7,
        },
    )
    .unwrap()
}

fn mini_config() -> PretrainConfig {
    PretrainConfig {
        epochs: 2,
        scenes_per_step: 3,
        crop_spec: CropSpec {
            n_global: 2,
            n_local: 2,
            global_size: 32,
            local_size: 16,
            local_area_range: (0.05, 0.3),
            ..CropSpec::default()
        },
        ..PretrainConfig::desk_scale()
    }
}

#[test]
fn full_scale_config_carries_expected_values() {
    let cfg = PretrainConfig::full_scale();
    assert_eq!(cfg.epochs, 100);
    assert_eq!(cfg.crop_spec.n_global, 10);
    assert_eq!(cfg.crop_spec.n_local, 30);
    assert_eq!(cfg.crop_spec.global_size, 224);
    assert_eq!(cfg.crop_spec.local_size, 96);
    assert_eq!(cfg.backbone.feature_dim, 512);
    assert_eq!(cfg.head_config().layer_dims, vec![512, 512, 64, 2048]);
}

#[test]
fn config_invariants_are_enforced() {
    let dir = TempDir::new().unwrap();
    let ds = mini_dataset(&dir, 2, 2);
    let mut cfg = mini_config();
    cfg.epochs = 0;
    assert!(matches!(pretrain(&ds, &cfg), Err(TrainError::InvalidConfig(_))));
    let mut cfg = mini_config();
    cfg.scenes_per_step = 0;
    assert!(matches!(pretrain(&ds, &cfg), Err(TrainError::InvalidConfig(_))));
}

#[test]
fn single_scene_single_epoch_emits_one_record() {
    let dir = TempDir::new().unwrap();
    let ds = mini_dataset(&dir, 1, 2);
    let mut cfg = mini_config();
    cfg.epochs = 1;
    cfg.scenes_per_step = 1;

    // lambda < 1: the teacher must move away from its initial copy
    cfg.distill.ema_momentum = 0.5;
    let out = pretrain(&ds, &cfg).unwrap();
    assert_eq!(out.records.len(), 1);
    assert!(out.records[0].loss.is_finite());
    let initial = tempossl_core::network::build_pair::<f32>(
        &cfg.backbone,
        &cfg.head_config(),
        cfg.seed,
    )
    .unwrap();
    let moved = out
        .pair
        .teacher
        .named_tensors()
        .iter()
        .zip(initial.teacher.named_tensors().iter())
        .any(|((_, a), (_, b))| a != b);
    assert!(moved, "teacher should move when lambda < 1");

    // lambda = 1: the teacher stays bitwise at its initial copy
    cfg.distill.ema_momentum = 1.0;
    let out = pretrain(&ds, &cfg).unwrap();
    for ((name, a), (_, b)) in out
        .pair
        .teacher
        .named_tensors()
        .iter()
        .zip(initial.teacher.named_tensors().iter())
    {
        assert_eq!(a, b, "teacher tensor {name} changed despite lambda = 1");
    }
}

#[test]
fn student_moves_every_step_and_records_count() {
    let dir = TempDir::new().unwrap();
    let ds = mini_dataset(&dir, 6, 2);
    let cfg = mini_config();
    let out = pretrain(&ds, &cfg).unwrap();
    // 6 scenes / 3 per step = 2 steps per epoch, 2 epochs
    assert_eq!(out.records.len(), 4);
    let ln_k = (cfg.head_config().output_dim() as f64).ln();
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.step, i);
        assert!(r.loss.is_finite());
        assert!(r.teacher_mean_entropy >= 0.0 && r.teacher_mean_entropy <= ln_k + 1e-9);
    }
    let initial = tempossl_core::network::build_pair::<f32>(
        &cfg.backbone,
        &cfg.head_config(),
        cfg.seed,
    )
    .unwrap();
    let student_moved = out
        .pair
        .student
        .named_tensors()
        .iter()
        .zip(initial.student.named_tensors().iter())
        .any(|((_, a), (_, b))| a != b);
    assert!(student_moved);
}

#[test]
fn deterministic_runs_are_metric_identical() {
    let dir = TempDir::new().unwrap();
    let ds = mini_dataset(&dir, 5, 3);
    let cfg = mini_config();
    let a = pretrain(&ds, &cfg).unwrap();
    let b = pretrain(&ds, &cfg).unwrap();
    assert_eq!(a.records.len(), b.records.len());
    for (ra, rb) in a.records.iter().zip(b.records.iter()) {
        assert!(ra.metrics_eq(rb), "records differ: {ra:?} vs {rb:?}");
    }
    for ((name, ta), (_, tb)) in a
        .pair
        .student
        .named_tensors()
        .iter()
        .zip(b.pair.student.named_tensors().iter())
    {
        assert_eq!(ta, tb, "student tensor {name} differs between runs");
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run_exactly() {
    // one 4-epoch run checkpointing every 2 epochs stands in for an
    // interrupted run: resuming its epoch-2 checkpoint must land on the
    // same parameters the uninterrupted run reached
    let dir = TempDir::new().unwrap();
    let ds = mini_dataset(&dir, 5, 2);
    let ckpt_dir = TempDir::new().unwrap();

    let mut cfg4 = mini_config();
    cfg4.epochs = 4;
    cfg4.checkpoint_dir = Some(ckpt_dir.path().to_path_buf());
    cfg4.checkpoint_every = 2;
    let full = pretrain(&ds, &cfg4).unwrap();
    let ckpt = ckpt_dir.path().join("epoch_0002.ckpt");
    assert!(ckpt.exists(), "intermediate checkpoint written");

    let point = resume(&ckpt).unwrap();
    assert_eq!(point.epoch_cursor, 2);
    let mut cfg_resume = cfg4.clone();
    cfg_resume.checkpoint_dir = None;
    let resumed = pretrain_from(&ds, &cfg_resume, point).unwrap();
    let steps_per_epoch = full.records.len() / 4;
    let half_records = 2 * steps_per_epoch;

    // parameter-for-parameter equality with the uninterrupted run
    for ((name, a), (_, b)) in full
        .pair
        .student
        .named_tensors()
        .iter()
        .zip(resumed.pair.student.named_tensors().iter())
    {
        assert_eq!(a, b, "student {name} differs after resume");
    }
    for ((name, a), (_, b)) in full
        .pair
        .teacher
        .named_tensors()
        .iter()
        .zip(resumed.pair.teacher.named_tensors().iter())
    {
        assert_eq!(a, b, "teacher {name} differs after resume");
    }
    assert_eq!(full.distill.center, resumed.distill.center);

    // the resumed records continue the uninterrupted run's tail
    let tail = &full.records[half_records..];
    assert_eq!(tail.len(), resumed.records.len());
    for (a, b) in tail.iter().zip(resumed.records.iter()) {
        assert!(a.metrics_eq(b), "{a:?} vs {b:?}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let dir = TempDir::new().unwrap();
    let ds = mini_dataset(&dir, 4, 2);
    let ckpt_dir = TempDir::new().unwrap();
    let mut cfg = mini_config();
    cfg.checkpoint_dir = Some(ckpt_dir.path().to_path_buf());
    cfg.checkpoint_every = 2;
    let out = pretrain(&ds, &cfg).unwrap();
    let ckpt = out.last_checkpoint.unwrap();

    let point = resume(&ckpt).unwrap();
    for ((name, a), (_, b)) in out
        .pair
        .student
        .named_tensors()
        .iter()
        .zip(point.pair.student.named_tensors().iter())
    {
        assert_eq!(a, b, "student {name} not preserved");
    }
    for ((name, a), (_, b)) in out
        .pair
        .teacher
        .named_tensors()
        .iter()
        .zip(point.pair.teacher.named_tensors().iter())
    {
        assert_eq!(a, b, "teacher {name} not preserved");
    }
    assert_eq!(point.distill.center, out.distill.center);
}

#[test]
fn resume_rejects_missing_corrupt_and_mismatched_files() {
    // missing file
    assert!(resume(std::path::Path::new("/nonexistent/みness.ckpt")).is_err());

    // corrupted center: header says K but the stored center is shorter
    let dir = TempDir::new().unwrap();
    let ds = mini_dataset(&dir, 2, 2);
    let ckpt_dir = TempDir::new().unwrap();
    let cfg = mini_config();
    let pair = tempossl_core::network::build_pair::<f32>(&cfg.backbone, &cfg.head_config(), 0)
        .unwrap();
    let mut state =
        tempossl_core::distill::DistillState::<f32>::new(128, &DistillConfig::default());
    state.center = ndarray::Array1::zeros(64); // wrong length
    let opt = tempossl_core::nn::AdamW::<f32>::new(tempossl_core::nn::AdamConfig::default());
    let path = write_checkpoint(ckpt_dir.path(), &cfg, &pair, &state, &opt, 1).unwrap();
    match resume(&path) {
        Err(TrainError::CorruptField { field, .. }) => assert_eq!(field, "distill.center"),
        Err(other) => panic!("expected CorruptField, got {other:?}"),
        Ok(_) => panic!("corrupted checkpoint resumed"),
    }
    drop(ds);

    // version mismatch: patch the format version bytes
    let cfg = mini_config();
    let dir2 = TempDir::new().unwrap();
    let ds2 = mini_dataset(&dir2, 2, 2);
    let ckpt_dir2 = TempDir::new().unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.epochs = 1;
    cfg2.checkpoint_dir = Some(ckpt_dir2.path().to_path_buf());
    let out = pretrain(&ds2, &cfg2).unwrap();
    let path = out.last_checkpoint.unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[8] = 99; // format version lives after the 8-byte magic
    fs::write(&path, &bytes).unwrap();
    match resume(&path) {
        Err(TrainError::TensorFile(tempossl_core::tensor_file::TensorFileError::Version {
            file,
            supported,
        })) => {
            assert_eq!(file, 99);
            assert_eq!(supported, 1);
        }
        Err(other) => panic!("expected Version error, got {other:?}"),
        Ok(_) => panic!("patched checkpoint resumed"),
    }
}

#[test]
fn subset_selection_is_deterministic_and_fraction_one_is_identity() {
    let dir = TempDir::new().unwrap();
    let ds = mini_dataset(&dir, 10, 2);
    let cfg = mini_config();

    let a = select_subset(&ds, 0.5, cfg.seed).unwrap();
    let b = select_subset(&ds, 0.5, cfg.seed).unwrap();
    assert_eq!(a.len(), 5);
    let ids: Vec<&str> = (0..a.len()).map(|i| a.scene_id(i)).collect();
    let ids_b: Vec<&str> = (0..b.len()).map(|i| b.scene_id(i)).collect();
    assert_eq!(ids, ids_b);

    // fraction 1 behaves exactly like plain pretraining
    let full = pretrain(&ds, &cfg).unwrap();
    let via_subset = pretrain_subset(&ds, 1.0, &cfg).unwrap();
    assert_eq!(full.records.len(), via_subset.records.len());
    for (x, y) in full.records.iter().zip(via_subset.records.iter()) {
        assert!(x.metrics_eq(y));
    }

    // out-of-range and empty-result fractions
    assert!(matches!(
        pretrain_subset(&ds, 0.0, &cfg),
        Err(TrainError::BadFraction(_))
    ));
    assert!(matches!(
        pretrain_subset(&ds, 0.05, &cfg),
        Err(TrainError::EmptySubsetFraction { .. })
    ));
}

#[test]
fn collapse_alarm_warns_but_training_continues() {
    // constant-gray scenes: every crop is identical, the teacher output
    // distribution is a single point, and mean entropy sits near zero
    let dir = TempDir::new().unwrap();
    for s in 0..2 {
        let scene_dir = dir.path().join(format!("flat_{s}"));
        fs::create_dir(&scene_dir).unwrap();
        let px = ndarray::Array3::<f32>::from_elem((96, 96, 3), 0.5);
        let img = tempossl_core::scene_store::Image::new(px).unwrap();
        for v in 0..2 {
            img.save_png(&scene_dir.join(format!("v{v}.png"))).unwrap();
        }
    }
    let ds = tempossl_core::scene_store::load_scene_dataset(dir.path(), 2).unwrap();
    let mut cfg = mini_config();
    cfg.epochs = 1;
    cfg.scenes_per_step = 2;
    // a very sharp teacher makes the identical logit rows one-hot, which is
    // exactly the degenerate mode the alarm watches for
    cfg.distill.teacher_temp = 1e-4;
    cfg.distill.teacher_temp_warmup = None;
    let out = pretrain(&ds, &cfg).unwrap();
    let warnings: Vec<_> = out
        .records
        .iter()
        .filter(|r| r.warning.is_some())
        .collect();
    assert_eq!(warnings.len(), 1, "records: {:?}", out.records);
    assert!(warnings[0].warning.as_ref().unwrap().contains("collapse"));
}
