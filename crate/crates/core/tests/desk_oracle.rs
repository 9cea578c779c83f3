//! Manual oracle run for the desk-scale pretraining fixture. Ignored by
//! default; run with `cargo test --test desk_oracle -- --ignored --nocapture`
//! to print the numbers the acceptance thresholds are checked against.

use tempfile::TempDir;

use tempossl_core::eval::{linear_probe, EvalConfig};
use tempossl_core::pretrain::{pretrain, PretrainConfig};
use tempossl_core::rng::{rng_for, stream};
use tempossl_core::scene_store::{export_class_folders, generate_synthetic_dataset, SynthSpec};
use tempossl_core::network::{Backbone, BackboneConfig};

#[test]
#[ignore]
fn desk_scale_oracle_run() {
    let scenes = TempDir::new().unwrap();
    let t0 = std::time::Instant::now();
    let ds = generate_synthetic_dataset(
        scenes.path(),
        &SynthSpec {
            n_scenes: 500,
            t: 5,
            n_classes: 4,
            height: 128,
            width: 128,
            seed: 0,
        },
    )
    .unwrap();
    println!("synth gen: {:.1}s", t0.elapsed().as_secs_f64());

    let mut cfg = PretrainConfig::desk_scale();
    if let Ok(tt) = std::env::var("ORACLE_TEACHER_TEMP") {
        cfg.distill.teacher_temp = tt.parse().unwrap();
    }
    if let Ok(init) = std::env::var("ORACLE_TEMP_ANNEAL_FROM") {
        cfg.distill.teacher_temp_warmup = Some((init.parse().unwrap(), cfg.epochs));
    }
    if let Ok(k) = std::env::var("ORACLE_K") {
        let k: usize = k.parse().unwrap();
        cfg.head = Some(tempossl_core::network::HeadConfig {
            layer_dims: vec![64, 64, 32, k],
            dino_compat: false,
        });
    }
    println!(
        "config: teacher_temp {} (anneal from {:?}), K {}",
        cfg.distill.teacher_temp,
        cfg.distill.teacher_temp_warmup,
        cfg.head_config().output_dim()
    );
    let t1 = std::time::Instant::now();
    let out = pretrain(&ds, &cfg).unwrap();
    println!("pretrain 20 epochs: {:.1}s", t1.elapsed().as_secs_f64());
    if let Ok(path) = std::env::var("ORACLE_WRITE_FIXTURE") {
        tempossl_core::pretrain::write_train_log(std::path::Path::new(&path), &out.records)
            .unwrap();
        println!("fixture log written to {path}");
    }

    let k = out.pair.student.output_dim() as f64;
    let ln_k = k.ln();
    for epoch in 0..cfg.epochs {
        let recs: Vec<_> = out.records.iter().filter(|r| r.epoch == epoch).collect();
        let mean_loss: f64 = recs.iter().map(|r| r.loss).sum::<f64>() / recs.len() as f64;
        let min_entropy = recs
            .iter()
            .map(|r| r.teacher_mean_entropy)
            .fold(f64::INFINITY, f64::min);
        println!(
            "epoch {epoch:2}: mean loss {mean_loss:.4}, min step entropy {min_entropy:.4} (0.5*lnK = {:.4})",
            0.5 * ln_k
        );
    }
    let epoch_mean = |e: usize| {
        let recs: Vec<_> = out.records.iter().filter(|r| r.epoch == e).collect();
        recs.iter().map(|r| r.loss).sum::<f64>() / recs.len() as f64
    };
    println!(
        "loss ratio epoch19/epoch0 = {:.4} (must be < 0.8)",
        epoch_mean(19) / epoch_mean(0)
    );

    // probe gap: pretrained teacher backbone vs random init, 3 seeds
    let labeled_scenes = TempDir::new().unwrap();
    let labeled_out = TempDir::new().unwrap();
    let eval_ds = generate_synthetic_dataset(
        labeled_scenes.path(),
        &SynthSpec {
            n_scenes: 200,
            t: 2,
            n_classes: 4,
            height: 128,
            width: 128,
            seed: 1,
        },
    )
    .unwrap();
    let labeled = export_class_folders(&eval_ds, labeled_out.path()).unwrap();
    println!("labeled eval set: {} images", labeled.len());

    let t2 = std::time::Instant::now();
    let mut gaps = Vec::new();
    for seed in 0..3u64 {
        let cfg_eval = EvalConfig {
            label_fractions: vec![1.0],
            input_size: 64,
            seed,
            ..EvalConfig::default()
        };
        let pre = linear_probe(&out.pair.teacher.backbone, &labeled, &cfg_eval).unwrap();
        let mut rng = rng_for(&[stream::INIT, 1000 + seed]);
        let rand_backbone = Backbone::<f32>::init(&BackboneConfig::tiny_cnn(), &mut rng).unwrap();
        let rnd = linear_probe(&rand_backbone, &labeled, &cfg_eval).unwrap();
        println!(
            "seed {seed}: pretrained {:.4} vs random {:.4}",
            pre[0].top1_accuracy, rnd[0].top1_accuracy
        );
        gaps.push(pre[0].top1_accuracy - rnd[0].top1_accuracy);
    }
    println!(
        "probes: {:.1}s; mean gap {:.4} (must be >= 0.10)",
        t2.elapsed().as_secs_f64(),
        gaps.iter().sum::<f64>() / 3.0
    );

    // learnability ceiling: supervised fine-tune from random init
    let cfg_ft = EvalConfig {
        label_fractions: vec![1.0],
        input_size: 64,
        seed: 0,
        ..EvalConfig::default()
    };
    let mut rng = rng_for(&[stream::INIT, 2000]);
    let rand_backbone = Backbone::<f32>::init(&BackboneConfig::tiny_cnn(), &mut rng).unwrap();
    let t3 = std::time::Instant::now();
    let ft = tempossl_core::eval::fine_tune(&rand_backbone, &labeled, &cfg_ft).unwrap();
    println!(
        "supervised fine-tune from random: {:.4} ({:.1}s)",
        ft[0].top1_accuracy,
        t3.elapsed().as_secs_f64()
    );
}
