//! Evaluation-protocol contracts: stratified splits and subsampling, the
//! frozen-backbone guarantee, fine-tune trainability, and top-1 accounting.

use std::path::PathBuf;

use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use tempfile::TempDir;

use tempossl_core::eval::{
    linear_probe, stratified_split, subsample_labels, top1_accuracy, EvalConfig, EvalError,
};
use tempossl_core::network::{Backbone, BackboneConfig};
use tempossl_core::rng::{rng_for, stream};
use tempossl_core::scene_store::{
    export_class_folders, generate_synthetic_dataset, LabeledDataset, LabeledItem, SynthSpec,
};

/// In-memory labeled dataset with dummy paths, for split/subsample math.
fn fake_dataset(per_class: &[usize]) -> LabeledDataset {
    let classes: Vec<String> = (0..per_class.len()).map(|c| format!("class_{c}")).collect();
    let mut items = Vec::new();
    for (c, &n) in per_class.iter().enumerate() {
        for i in 0..n {
            items.push(LabeledItem {
                path: PathBuf::from(format!("fake/{c}/{i}.png")),
                class_index: c,
            });
        }
    }
    LabeledDataset {
        root: PathBuf::from("fake"),
        classes,
        items,
        warnings: Vec::new(),
    }
}

fn synth_labeled(dir: &TempDir, out: &TempDir, n_scenes: usize) -> LabeledDataset {
    let ds = generate_synthetic_dataset(
        dir.path(),
        &SynthSpec {
            n_scenes,
            t: 2,
            n_classes: 4,
            height: 96,
            width: 96,
            seed: 3,
        },
    )
    .unwrap();
    export_class_folders(&ds, out.path()).unwrap()
}

fn desk_eval_config() -> EvalConfig {
    EvalConfig {
        epochs: 4,
        label_fractions: vec![0.5, 1.0],
        input_size: 32,
        ..EvalConfig::default()
    }
}

fn tiny_backbone(seed: u64) -> Backbone<f32> {
    let mut rng = rng_for(&[stream::INIT, seed]);
    Backbone::init(&BackboneConfig::tiny_cnn(), &mut rng).unwrap()
}

#[test]
fn table_defaults_match_the_protocol() {
    let cfg = EvalConfig::default();
    assert_eq!(cfg.optimizer.name, "adam");
    assert_eq!(cfg.optimizer.lr, 1e-3);
    assert_eq!(cfg.epochs, 20);
    assert_eq!(cfg.batch_size, 64);
    assert_eq!(cfg.lr_schedule.step_size, 7);
    assert_eq!(cfg.lr_schedule.gamma, 0.1);
    assert_eq!(cfg.split, (0.8, 0.2));
}

#[test]
fn split_is_disjoint_stratified_and_seed_stable() {
    let ds = fake_dataset(&[50, 30, 20]);
    let (train, test) = stratified_split(&ds, 0.8, 11);
    let (train2, test2) = stratified_split(&ds, 0.8, 11);
    assert_eq!(train, train2);
    assert_eq!(test, test2);
    assert_eq!(train.len() + test.len(), 100);
    let train_set: std::collections::BTreeSet<_> = train.iter().collect();
    assert!(test.iter().all(|i| !train_set.contains(i)));
    // per-class train counts = floor(0.8 * n_c)
    let mut counts = vec![0usize; 3];
    for &i in &train {
        counts[ds.items[i].class_index] += 1;
    }
    assert_eq!(counts, vec![40, 24, 16]);
}

#[test]
fn subsample_examples_from_the_protocol() {
    // 21 classes x 100 images at fraction 0.1 -> 10 per class, 210 total
    let ds = fake_dataset(&[100; 21]);
    let sub = subsample_labels(&ds, 0.1, 5);
    assert_eq!(sub.len(), 210);
    assert!(sub.class_counts().iter().all(|&c| c == 10));

    // fraction 1 is the identity
    let full = subsample_labels(&ds, 1.0, 5);
    assert_eq!(full.len(), ds.len());

    // minimum one per non-empty class
    let ds = fake_dataset(&[3, 1, 200]);
    let sub = subsample_labels(&ds, 0.01, 5);
    assert_eq!(sub.class_counts(), vec![1, 1, 2]);

    // determinism
    let a = subsample_labels(&ds, 0.5, 9);
    let b = subsample_labels(&ds, 0.5, 9);
    let paths_a: Vec<_> = a.items.iter().map(|i| i.path.clone()).collect();
    let paths_b: Vec<_> = b.items.iter().map(|i| i.path.clone()).collect();
    assert_eq!(paths_a, paths_b);
}

#[test]
fn top1_matches_an_independent_recount() {
    let mut rng = rng_for(&[31]);
    let n = 64;
    let k = 7;
    let mut logits = Array2::<f32>::zeros((n, k));
    for v in logits.iter_mut() {
        *v = (rng.random::<f64>() * 2.0 - 1.0) as f32;
    }
    let labels: Vec<usize> = (0..n)
        .map(|_| ((rng.random::<f64>() * k as f64) as usize).min(k - 1))
        .collect();
    let got = top1_accuracy(&logits, &labels);
    // scalar recount
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = 0;
        for j in 1..k {
            if logits[(i, j)] > logits[(i, best)] {
                best = j;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    assert_eq!(got, correct as f64 / n as f64);
}

#[test]
fn linear_probe_leaves_the_backbone_bitwise_unchanged() {
    let scenes = TempDir::new().unwrap();
    let labeled = TempDir::new().unwrap();
    let ds = synth_labeled(&scenes, &labeled, 24);
    let backbone = tiny_backbone(1);
    let before: Vec<(String, ndarray::ArrayD<f32>)> = backbone
        .tensors("backbone")
        .into_iter()
        .map(|t| (t.name, t.view.to_owned()))
        .collect();

    let records = linear_probe(&backbone, &ds, &desk_eval_config()).unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        assert!((0.0..=1.0).contains(&r.top1_accuracy));
    }
    assert!(records[0].n_train_used < records[1].n_train_used);

    let after: Vec<(String, ndarray::ArrayD<f32>)> = backbone
        .tensors("backbone")
        .into_iter()
        .map(|t| (t.name, t.view.to_owned()))
        .collect();
    assert_eq!(before.len(), after.len());
    for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
        assert_eq!(a, b, "backbone tensor {name} changed during probing");
    }

    // probe features for a fixed input are identical before/after training
    let x = ndarray::Array4::<f32>::from_elem((1, 3, 32, 32), 0.3);
    let f1 = backbone.forward_eval(&x);
    let records2 = linear_probe(&backbone, &ds, &desk_eval_config()).unwrap();
    let f2 = backbone.forward_eval(&x);
    assert_eq!(f1, f2);
    // deterministic protocol: same config, same accuracies
    assert_eq!(records, records2);
}

#[test]
fn fine_tune_changes_backbone_parameters() {
    let scenes = TempDir::new().unwrap();
    let labeled = TempDir::new().unwrap();
    let ds = synth_labeled(&scenes, &labeled, 12);
    let backbone = tiny_backbone(2);
    let before = backbone
        .tensors("backbone")
        .into_iter()
        .map(|t| t.view.to_owned())
        .collect::<Vec<_>>();

    let mut cfg = desk_eval_config();
    cfg.epochs = 1;
    cfg.label_fractions = vec![1.0];
    let (records, trained) = tempossl_core::eval::fine_tune_detailed(&backbone, &ds, &cfg).unwrap();
    assert_eq!(records.len(), 1);
    assert!((0.0..=1.0).contains(&records[0].top1_accuracy));

    // the input backbone itself is untouched (fine-tuning clones it)...
    let after = backbone
        .tensors("backbone")
        .into_iter()
        .map(|t| t.view.to_owned())
        .collect::<Vec<_>>();
    assert_eq!(before, after);
    // ...while the trained clone moved away from it: every conv weight and
    // batch-norm statistic is trainable or updated
    let trained_tensors = trained
        .tensors("backbone")
        .into_iter()
        .map(|t| (t.name, t.view.to_owned()))
        .collect::<Vec<_>>();
    let moved = trained_tensors
        .iter()
        .zip(before.iter())
        .filter(|((_, a), b)| a != *b)
        .count();
    assert!(
        moved >= trained_tensors.len() / 2,
        "only {moved}/{} tensors moved during fine-tuning",
        trained_tensors.len()
    );
}

#[test]
fn missing_class_in_training_fraction_is_reported() {
    let scenes = TempDir::new().unwrap();
    let labeled = TempDir::new().unwrap();
    let mut ds = synth_labeled(&scenes, &labeled, 16);
    // orphan one class: drop all its items so no fraction can include it
    ds.items.retain(|item| item.class_index != 2);
    let err = linear_probe(&tiny_backbone(3), &ds, &desk_eval_config()).unwrap_err();
    match err {
        EvalError::ClassAbsent { class, .. } => assert_eq!(class, "class_2"),
        other => panic!("expected ClassAbsent, got {other:?}"),
    }
}

#[test]
fn two_class_minimum_is_enforced() {
    let ds = fake_dataset(&[10]);
    let err = linear_probe(&tiny_backbone(4), &ds, &desk_eval_config()).unwrap_err();
    assert!(matches!(err, EvalError::TooFewClasses { found: 1 }));
}

#[test]
fn fraction_sweep_counts_are_monotone() {
    let scenes = TempDir::new().unwrap();
    let labeled = TempDir::new().unwrap();
    let ds = synth_labeled(&scenes, &labeled, 20);
    let mut cfg = desk_eval_config();
    cfg.epochs = 1;
    cfg.label_fractions = vec![0.25, 0.5, 1.0];
    let records = linear_probe(&tiny_backbone(5), &ds, &cfg).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records[0].n_train_used <= records[1].n_train_used);
    assert!(records[1].n_train_used <= records[2].n_train_used);
    assert_eq!(records[2].fraction, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stratified_subsampling_respects_floor_with_minimum_one(
        seed in 0u64..500,
        n0 in 1usize..60,
        n1 in 1usize..60,
        n2 in 1usize..60,
        frac_pct in 1u32..=100,
    ) {
        let fraction = frac_pct as f64 / 100.0;
        let ds = fake_dataset(&[n0, n1, n2]);
        let sub = subsample_labels(&ds, fraction, seed);
        let counts = sub.class_counts();
        for (c, &n) in [n0, n1, n2].iter().enumerate() {
            let floor = (fraction * n as f64).floor() as usize;
            let expected = floor.max(1).min(n);
            prop_assert_eq!(counts[c], expected);
        }
    }

    #[test]
    fn split_test_side_never_overlaps_any_fraction(seed in 0u64..200, frac_pct in 1u32..=100) {
        let ds = fake_dataset(&[13, 17, 9]);
        let (train, test) = stratified_split(&ds, 0.8, seed);
        let sub = tempossl_core::eval::subsample_indices(&ds, &train, frac_pct as f64 / 100.0, seed);
        let test_set: std::collections::BTreeSet<_> = test.iter().collect();
        for i in &sub {
            prop_assert!(!test_set.contains(i));
        }
    }
}
