//! Directory-layout contracts, synthetic generation determinism, and
//! labeled-dataset ingestion.

use std::fs;

use ndarray::Array3;
use tempfile::TempDir;

use tempossl_core::scene_store::{
    export_class_folders, generate_synthetic_dataset, load_labeled_dataset, load_scene_dataset,
    Image, StoreError, SynthSpec,
};
use tempossl_core::view_sampler::{sample_views, CropSpec};

fn synth_spec(n_scenes: usize, t: usize) -> SynthSpec {
    SynthSpec {
        n_scenes,
        t,
        n_classes: 4,
        height: 96,
        width: 96,
        seed: 0,
    }
}

fn gray_image(level: f32, h: usize, w: usize) -> Image {
    Image::new(Array3::from_elem((h, w, 3), level)).unwrap()
}

#[test]
fn synthetic_generation_counts_and_manifest() {
    let dir = TempDir::new().unwrap();
    let ds = generate_synthetic_dataset(dir.path(), &synth_spec(12, 5)).unwrap();
    assert_eq!(ds.len(), 12);
    assert_eq!(ds.t, 5);
    // 12 scenes x 5 views on disk
    let mut image_count = 0;
    for entry in ds.entries() {
        assert_eq!(entry.view_paths.len(), 5);
        image_count += entry.view_paths.len();
    }
    assert_eq!(image_count, 60);
    // balanced classes via round-robin assignment
    let mut counts = std::collections::BTreeMap::new();
    for i in 0..ds.len() {
        *counts.entry(ds.class_of(i).unwrap().to_string()).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 4);
    assert!(counts.values().all(|&c| c == 3));
}

#[test]
fn synthetic_generation_is_bitwise_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let spec = synth_spec(4, 3);
    let da = generate_synthetic_dataset(a.path(), &spec).unwrap();
    let db = generate_synthetic_dataset(b.path(), &spec).unwrap();
    for (ea, eb) in da.entries().iter().zip(db.entries().iter()) {
        for (pa, pb) in ea.view_paths.iter().zip(eb.view_paths.iter()) {
            let bytes_a = fs::read(pa).unwrap();
            let bytes_b = fs::read(pb).unwrap();
            assert_eq!(bytes_a, bytes_b, "{} vs {}", pa.display(), pb.display());
        }
    }
    // a different seed produces different pixels
    let c = TempDir::new().unwrap();
    let dc = generate_synthetic_dataset(c.path(), &SynthSpec { seed: 1, ..spec }).unwrap();
    let a0 = fs::read(&da.entries()[0].view_paths[0]).unwrap();
    let c0 = fs::read(&dc.entries()[0].view_paths[0]).unwrap();
    assert_ne!(a0, c0);
}

#[test]
fn degenerate_single_scene_single_view_still_samples() {
    let dir = TempDir::new().unwrap();
    let ds = generate_synthetic_dataset(
        dir.path(),
        &SynthSpec {
            n_scenes: 1,
            t: 1,
            ..synth_spec(1, 1)
        },
    )
    .unwrap();
    assert_eq!(ds.len(), 1);
    let scene = ds.load_scene(0).unwrap();
    assert_eq!(scene.t(), 1);
    let spec = CropSpec {
        n_global: 2,
        n_local: 3,
        global_size: 48,
        local_size: 24,
        ..CropSpec::default()
    };
    let batch = sample_views(&scene, &spec, 5).unwrap();
    assert_eq!(batch.crops.len(), 5);
    assert!(batch.crops.iter().all(|c| c.source_view == 0));
}

#[test]
fn size_below_minimum_is_rejected() {
    let dir = TempDir::new().unwrap();
    let err = generate_synthetic_dataset(
        dir.path(),
        &SynthSpec {
            height: 64,
            width: 64,
            ..synth_spec(2, 2)
        },
    )
    .unwrap_err();
    assert!(matches!(err, StoreError::SizeBelowMinimum { .. }));
}

#[test]
fn scene_with_wrong_view_count_is_named_in_the_error() {
    let dir = TempDir::new().unwrap();
    generate_synthetic_dataset(dir.path(), &synth_spec(3, 5)).unwrap();
    // break one scene: remove a view file
    let victim = dir.path().join("scene_0001").join("view_04.png");
    fs::remove_file(&victim).unwrap();
    match load_scene_dataset(dir.path(), 5) {
        Err(StoreError::ViewCount(e)) => {
            assert_eq!(e.expected, 5);
            assert_eq!(e.offenders, vec![("scene_0001".to_string(), 4)]);
            let msg = e.to_string();
            assert!(msg.contains("scene_0001"), "message: {msg}");
        }
        other => panic!("expected ViewCount error, got {other:?}"),
    }
}

#[test]
fn empty_root_and_undecodable_files_error() {
    let dir = TempDir::new().unwrap();
    assert!(matches!(
        load_scene_dataset(dir.path(), 5),
        Err(StoreError::NoScenes { .. })
    ));

    let scene_dir = dir.path().join("scene_x");
    fs::create_dir(&scene_dir).unwrap();
    fs::write(scene_dir.join("view_00.png"), b"not a png").unwrap();
    let ds = load_scene_dataset(dir.path(), 1).unwrap();
    match ds.load_scene(0) {
        Err(StoreError::Decode { path, .. }) => {
            assert!(path.ends_with("view_00.png"));
        }
        other => panic!("expected Decode error, got {other:?}"),
    }
}

#[test]
fn scene_ordering_is_lexicographic() {
    let dir = TempDir::new().unwrap();
    for name in ["zulu", "alpha", "mike"] {
        let d = dir.path().join(name);
        fs::create_dir(&d).unwrap();
        gray_image(0.5, 96, 96).save_png(&d.join("v0.png")).unwrap();
    }
    let ds = load_scene_dataset(dir.path(), 1).unwrap();
    let ids: Vec<&str> = (0..ds.len()).map(|i| ds.scene_id(i)).collect();
    assert_eq!(ids, vec!["alpha", "mike", "zulu"]);
}

#[test]
fn synthetic_images_round_trip_losslessly() {
    let dir = TempDir::new().unwrap();
    let ds = generate_synthetic_dataset(dir.path(), &synth_spec(1, 2)).unwrap();
    let scene = ds.load_scene(0).unwrap();
    let copy_path = dir.path().join("copy.png");
    scene.views[0].save_png(&copy_path).unwrap();
    let reloaded = Image::from_file(&copy_path).unwrap();
    assert_eq!(scene.views[0].pixels(), reloaded.pixels());
}

#[test]
fn labeled_layout_assigns_indices_by_sorted_class_name() {
    let dir = TempDir::new().unwrap();
    for (class, n) in [("river", 3usize), ("forest", 2), ("urban", 1)] {
        let d = dir.path().join(class);
        fs::create_dir(&d).unwrap();
        for i in 0..n {
            gray_image(0.3, 96, 96).save_png(&d.join(format!("img_{i}.png"))).unwrap();
        }
    }
    let ds = load_labeled_dataset(dir.path()).unwrap();
    assert_eq!(ds.classes, vec!["forest", "river", "urban"]);
    assert_eq!(ds.class_counts(), vec![2, 3, 1]);
    assert_eq!(ds.len(), 6);
    assert!(ds.warnings.is_empty());
}

#[test]
fn empty_class_folder_warns_but_is_retained() {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("empty_class")).unwrap();
    let full = dir.path().join("full_class");
    fs::create_dir(&full).unwrap();
    gray_image(0.6, 96, 96).save_png(&full.join("a.png")).unwrap();
    let ds = load_labeled_dataset(dir.path()).unwrap();
    assert_eq!(ds.classes, vec!["empty_class", "full_class"]);
    assert_eq!(ds.class_counts(), vec![0, 1]);
    assert_eq!(ds.warnings.len(), 1);
    assert!(ds.warnings[0].contains("empty_class"));
}

#[test]
fn zero_classes_is_an_error() {
    let dir = TempDir::new().unwrap();
    assert!(matches!(
        load_labeled_dataset(dir.path()),
        Err(StoreError::NoClasses { .. })
    ));
}

#[test]
fn class_folder_export_matches_manifest() {
    let scenes = TempDir::new().unwrap();
    let labeled = TempDir::new().unwrap();
    let ds = generate_synthetic_dataset(scenes.path(), &synth_spec(8, 2)).unwrap();
    let out = export_class_folders(&ds, labeled.path()).unwrap();
    assert_eq!(out.n_classes(), 4);
    assert_eq!(out.len(), 16); // 8 scenes x 2 views
    assert_eq!(out.class_counts(), vec![4, 4, 4, 4]);
}

#[test]
fn channel_stats_are_deterministic_and_sane() {
    let dir = TempDir::new().unwrap();
    let ds = generate_synthetic_dataset(dir.path(), &synth_spec(6, 2)).unwrap();
    let (m1, s1) = ds.channel_stats(4).unwrap();
    let (m2, s2) = ds.channel_stats(4).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(s1, s2);
    for c in 0..3 {
        assert!(m1[c] > 0.0 && m1[c] < 1.0);
        assert!(s1[c] > 0.0 && s1[c] < 0.6);
    }
}
