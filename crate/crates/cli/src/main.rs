//! Command-line interface: synthetic data generation, pretraining,
//! evaluation, config-driven experiments, and plot emission.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tempossl_cli::config::{load_config, AugmentationMode};
use tempossl_cli::experiment::{random_backbone, run_experiment};
use tempossl_cli::plot::emit_plots;
use tempossl_core::eval::{self, EvalConfig, EvalMode, EvalReport};
use tempossl_core::network::{export_backbone, load_backbone, Arch, BackboneConfig};
use tempossl_core::pretrain::{pretrain, pretrain_subset, write_train_log, PretrainConfig};
use tempossl_core::scene_store::{
    export_class_folders, generate_synthetic_dataset, load_labeled_dataset, load_scene_dataset,
    SynthSpec,
};

#[derive(Parser)]
#[command(
    name = "tempossl",
    about = "Self-supervised pretraining on temporal satellite imagery, with linear-probe and fine-tune evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic temporal scene dataset (with class manifest)
    SynthData(SynthArgs),
    /// Pretrain a student/teacher pair on a scene dataset
    Pretrain(PretrainArgs),
    /// Linear-probe and/or fine-tune a backbone on a labeled dataset
    Evaluate(EvaluateArgs),
    /// Run a config-driven experiment (pretrain + sweeps + figures)
    Experiment(ExperimentArgs),
    /// Emit accuracy-vs-fraction figures from report files
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the scene layout
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    /// Temporal views per scene
    #[arg(long, default_value_t = 5)]
    t: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Square image edge length (>= 96)
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also materialize a class-per-folder copy for downstream evaluation
    #[arg(long)]
    labeled_out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Scene dataset root (one subdirectory per scene)
    #[arg(long)]
    data: PathBuf,
    /// Temporal views per scene
    #[arg(long, default_value_t = 5)]
    t: usize,
    /// Output directory (checkpoints, train log, backbone export)
    #[arg(long)]
    out: PathBuf,
    /// Pretraining config file (TOML/JSON); flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    /// Use the artificial augmentation pipeline on single views
    #[arg(long)]
    artificial_aug: bool,
    /// Train on a seeded subset of the scenes
    #[arg(long)]
    subset_fraction: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Backbone checkpoint to evaluate
    #[arg(long, conflicts_with = "random_init")]
    backbone: Option<PathBuf>,
    /// Evaluate a random-init backbone of this architecture instead
    #[arg(long, value_parser = parse_arch)]
    random_init: Option<Arch>,
    /// Labeled dataset root (one subdirectory per class)
    #[arg(long)]
    data: PathBuf,
    /// Output JSONL report path
    #[arg(long)]
    out: PathBuf,
    /// linear | finetune | both
    #[arg(long, default_value = "both")]
    mode: String,
    /// Comma-separated label fractions, e.g. 0.01,0.1,0.5,1.0
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Label for the report's init column
    #[arg(long)]
    init_name: Option<String>,
    /// Dataset name in the report (defaults to the root directory name)
    #[arg(long)]
    dataset_name: Option<String>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (TOML/JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the pretraining seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the pretraining epoch budget
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the augmentation mode (natural_temporal | artificial_dino)
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// Report files (eval_report.jsonl) to combine
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Output directory for figures and CSV sidecars
    #[arg(long)]
    out: PathBuf,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    match s {
        "resnet18" => Ok(Arch::Resnet18),
        "tiny_cnn" => Ok(Arch::TinyCnn),
        other => Err(format!("unknown arch {other:?} (resnet18 | tiny_cnn)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Cmd::SynthData(args) => synth_data(args),
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Experiment(args) => cmd_experiment(args),
        Cmd::Plot(args) => {
            let produced =
                emit_plots(&args.reports, &args.out).map_err(|e| e.to_string())?;
            for p in produced {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn synth_data(args: SynthArgs) -> Result<(), String> {
    let spec = SynthSpec {
        n_scenes: args.scenes,
        t: args.t,
        n_classes: args.classes,
        height: args.size,
        width: args.size,
        seed: args.seed,
    };
    let ds = generate_synthetic_dataset(&args.out, &spec).map_err(|e| e.to_string())?;
    println!(
        "generated {} scenes x {} views at {} ({} classes)",
        ds.len(),
        ds.t,
        args.out.display(),
        args.classes
    );
    if let Some(labeled_out) = args.labeled_out {
        let labeled = export_class_folders(&ds, &labeled_out).map_err(|e| e.to_string())?;
        println!(
            "exported {} labeled images into {} class folders at {}",
            labeled.len(),
            labeled.n_classes(),
            labeled_out.display()
        );
    }
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), String> {
    let mut cfg: PretrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            match path.extension().and_then(|e| e.to_str()) {
                Some("json") => serde_json::from_str(&text)
                    .map_err(|e| format!("{}: {e}", path.display()))?,
                _ => toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?,
            }
        }
        None => PretrainConfig::desk_scale(),
    };
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(arch) = args.arch {
        cfg.backbone = match arch {
            Arch::Resnet18 => BackboneConfig::resnet18(),
            Arch::TinyCnn => BackboneConfig::tiny_cnn(),
        };
        cfg.head = None;
    }
    cfg.crop_spec.artificial_aug = args.artificial_aug;
    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    cfg.checkpoint_dir = Some(args.out.join("checkpoints"));

    let mut dataset = load_scene_dataset(&args.data, args.t).map_err(|e| e.to_string())?;
    if args.artificial_aug {
        dataset = dataset.truncate_views(1);
    }
    println!(
        "pretraining on {} scenes (T = {}) for {} epochs",
        dataset.len(),
        dataset.t,
        cfg.epochs
    );
    let out = match args.subset_fraction {
        Some(f) => pretrain_subset(&dataset, f, &cfg).map_err(|e| e.to_string())?,
        None => pretrain(&dataset, &cfg).map_err(|e| e.to_string())?,
    };
    write_train_log(&args.out.join("train_log.jsonl"), &out.records)
        .map_err(|e| e.to_string())?;
    let backbone_path = args.out.join("checkpoints").join("backbone.ckpt");
    export_backbone(&out.pair, &backbone_path).map_err(|e| e.to_string())?;
    let last = out.records.last();
    println!(
        "done: {} steps, final loss {:.4}; backbone at {}",
        out.records.len(),
        last.map(|r| r.loss).unwrap_or(f64::NAN),
        backbone_path.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), String> {
    let (backbone, default_init_name) = match (&args.backbone, args.random_init) {
        (Some(path), _) => (
            load_backbone(path).map_err(|e| e.to_string())?.0,
            "external_checkpoint",
        ),
        (None, Some(arch)) => {
            let cfg = match arch {
                Arch::Resnet18 => BackboneConfig::resnet18(),
                Arch::TinyCnn => BackboneConfig::tiny_cnn(),
            };
            (random_backbone(&cfg, args.seed).map_err(|e| e.to_string())?, "random")
        }
        (None, None) => return Err("pass --backbone FILE or --random-init ARCH".into()),
    };

    let labeled = load_labeled_dataset(&args.data).map_err(|e| e.to_string())?;
    for w in &labeled.warnings {
        eprintln!("note: {w}");
    }

    let mut cfg = EvalConfig {
        seed: args.seed,
        ..EvalConfig::default()
    };
    if let Some(fractions) = &args.fractions {
        cfg.label_fractions = fractions
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| format!("fraction {s:?}: {e}")))
            .collect::<Result<Vec<f64>, String>>()?;
    }
    if let Some(sz) = args.input_size {
        cfg.input_size = sz;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }

    let dataset_name = args.dataset_name.clone().unwrap_or_else(|| {
        args.data
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let init_name = args
        .init_name
        .clone()
        .unwrap_or_else(|| default_init_name.to_string());

    let modes: Vec<EvalMode> = match args.mode.as_str() {
        "linear" => vec![EvalMode::LinearProbe],
        "finetune" => vec![EvalMode::FineTune],
        "both" => vec![EvalMode::LinearProbe, EvalMode::FineTune],
        other => return Err(format!("unknown mode {other:?} (linear | finetune | both)")),
    };

    let mut rows = Vec::new();
    for mode in modes {
        let records = match mode {
            EvalMode::LinearProbe => {
                eval::linear_probe(&backbone, &labeled, &cfg).map_err(|e| e.to_string())?
            }
            EvalMode::FineTune => {
                eval::fine_tune(&backbone, &labeled, &cfg).map_err(|e| e.to_string())?
            }
        };
        let report = EvalReport {
            dataset_name: dataset_name.clone(),
            init_name: init_name.clone(),
            mode,
            records,
        };
        for row in report.rows() {
            println!(
                "{} {} {} fraction {:.4}: top-1 {:.4} ({} train images)",
                row.dataset,
                row.init,
                row.mode.as_str(),
                row.fraction,
                row.top1_accuracy,
                row.n_train_used
            );
        }
        rows.extend(report.rows());
    }
    eval::write_eval_rows(&args.out, &rows).map_err(|e| e.to_string())?;
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<(), String> {
    let mut cfg = load_config(&args.config).map_err(|e| e.to_string())?;
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(seed) = args.seed {
        if let Some(p) = cfg.pretrain.as_mut() {
            p.config.seed = seed;
        }
        cfg.eval.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        if let Some(p) = cfg.pretrain.as_mut() {
            p.config.epochs = epochs;
        }
    }
    if let Some(mode) = args.mode {
        cfg.augmentation_mode = match mode.as_str() {
            "natural_temporal" => AugmentationMode::NaturalTemporal,
            "artificial_dino" => AugmentationMode::ArtificialDino,
            other => return Err(format!("unknown augmentation mode {other:?}")),
        };
    }
    let manifest = run_experiment(&cfg).map_err(|e| e.to_string())?;
    println!(
        "experiment {} ({}) complete; {} stages in {}",
        manifest.name,
        manifest.init_name,
        manifest.stages.len(),
        cfg.output_dir.display()
    );
    Ok(())
}
