//! `cgnet` command line: train, eval, predict, audit, ablate, bench, render.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cgnet_core::data::{self, resolve_manifest, synthetic, ImagePair, InMemory, PairSource, Split, TiledDirectory};
use cgnet_core::metrics::MetricRecord;
use cgnet_core::model::ModelConfig;
use cgnet_core::render::{render_error_map, ErrorMapPalette};
use cgnet_core::trainer::{self, build_variant, Checkpoint};
use cgnet_core::{CgNet, Error, ExperimentConfig, Variant};

/// Exit status for malformed invocations and invalid configuration.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for runtime failures.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "cgnet", version, about = "Bi-temporal change detection with change-guided attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct Common {
    /// key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base, B-CGM-4, B-CGM-3, B-CGM-2, B-CGM-4-3, B-CGM-4-2, B-CGM-3-2 or CGNet.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Channel width multiplier (0.25 for the tiny profile).
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    tile_size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct SyntheticArgs {
    /// Pairs per split of the generated dataset.
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    /// Side length of generated pairs.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one variant and keep the best validation checkpoint.
    Train {
        /// Dataset root, or `synthetic`.
        #[arg(long)]
        data: Option<String>,
        #[command(flatten)]
        synthetic: SyntheticArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a split; prints metric JSON.
    Eval {
        /// Checkpoint sidecar, archive, or training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Percentages instead of JSON.
        #[arg(long)]
        human: bool,
        #[command(flatten)]
        synthetic: SyntheticArgs,
    },
    /// Predict a change map for one image pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        /// Output directory for `<stem>.png` and `<stem>.f32`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pixel statistics and split sizes of a dataset.
    Audit {
        root: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile_size: usize,
    },
    /// Train and test all eight guide-module variants.
    Ablate {
        /// Dataset root, or `synthetic`.
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        #[command(flatten)]
        synthetic: SyntheticArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Seconds per training epoch and per test-set pass.
    Bench {
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        #[command(flatten)]
        synthetic: SyntheticArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Colour-code prediction against ground truth.
    Render {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Run with the given arguments (first is the program name), writing to
/// `out` and `err`. Returns the process exit status.
pub fn run_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = if code == 0 { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_FAILURE
        }
    }
}

pub fn run_command(argv: &[String]) -> i32 {
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = &common.variant {
        cfg = cfg.with_variant(v.parse()?);
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(e) = common.epochs {
        cfg.max_epochs = e;
    }
    if let Some(b) = common.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = common.lr {
        cfg.learning_rate = lr;
    }
    if let Some(s) = common.scale {
        cfg.channel_scale = s;
    }
    if let Some(t) = common.tile_size {
        cfg.tile_size = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train, validation and test sources for a dataset root or `synthetic`.
struct Splits {
    train: Box<dyn PairSource>,
    val: Box<dyn PairSource>,
    test: Box<dyn PairSource>,
}

fn synthetic_splits(args: &SyntheticArgs, seed: u64) -> Result<Splits, Failure> {
    if args.size == 0 || args.size % 16 != 0 {
        return Err(Failure::Usage(format!("--size must be a positive multiple of 16, got {}", args.size)));
    }
    let gen = |offset: u64| InMemory(synthetic::synthetic_pairs(args.pairs, args.size, seed.wrapping_add(offset)));
    Ok(Splits { train: Box::new(gen(0)), val: Box::new(gen(1)), test: Box::new(gen(2)) })
}

fn directory_split(root: &Path, split: Split, cfg: &ExperimentConfig) -> Result<Box<dyn PairSource>, Failure> {
    let manifest = resolve_manifest(root, split, cfg.tile_size, cfg.seed)?;
    Ok(Box::new(TiledDirectory::open(root, &manifest)?))
}

fn open_splits(dataset: &str, args: &SyntheticArgs, cfg: &mut ExperimentConfig, scale_given: bool) -> Result<Splits, Failure> {
    if dataset == "synthetic" {
        if !scale_given {
            cfg.channel_scale = ModelConfig::TINY_SCALE;
        }
        return synthetic_splits(args, cfg.seed);
    }
    let root = PathBuf::from(dataset);
    cfg.data_root = Some(root.clone());
    Ok(Splits {
        train: directory_split(&root, Split::Train, cfg)?,
        val: directory_split(&root, Split::Val, cfg)?,
        test: directory_split(&root, Split::Test, cfg)?,
    })
}

fn print_json(out: &mut dyn Write, value: &serde_json::Value) -> Outcome {
    writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Outcome {
    match command {
        Command::Train { data, synthetic, common } => {
            let mut cfg = resolve_config(&common)?;
            let dataset = data
                .or_else(|| cfg.data_root.as_ref().map(|p| p.display().to_string()))
                .ok_or_else(|| Failure::Usage("train needs --data <root|synthetic> or data_root in the config".into()))?;
            let splits = open_splits(&dataset, &synthetic, &mut cfg, common.scale.is_some())?;
            let model = CgNet::new(cfg.model_config(), cfg.seed, candle_core::DType::F32)?;
            let result = trainer::train(&cfg, &model, splits.train.as_ref(), splits.val.as_ref(), |log| {
                eprintln!("{}", serde_json::to_string(log).unwrap_or_default());
            })?;
            print_json(
                out,
                &json!({
                    "variant": cfg.variant().name(),
                    "best_epoch": result.best.epoch,
                    "val_f1": result.best.val_f1,
                    "val_iou": result.best.val_iou,
                    "steps": result.steps,
                    "out_dir": cfg.out_dir,
                    "config": cfg,
                }),
            )
        }
        Command::Eval { checkpoint, data, split, human, synthetic } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let split: Split = split.parse()?;
            let source: Box<dyn PairSource> = if data == "synthetic" {
                let s = synthetic_splits(&synthetic, ck.config.seed)?;
                match split {
                    Split::Train => s.train,
                    Split::Val => s.val,
                    Split::Test => s.test,
                }
            } else {
                directory_split(Path::new(&data), split, &ck.config)?
            };
            let (counts, _) = trainer::evaluate_checkpoint(&ck, source.as_ref())?;
            let record = MetricRecord::new(&counts);
            if human {
                writeln!(out, "{}", record.human())?;
                Ok(())
            } else {
                print_json(out, &serde_json::to_value(record)?)
            }
        }
        Command::Predict { checkpoint, t1, t2, out: dir } => {
            let model = Checkpoint::load(&checkpoint)?.to_model()?;
            let (h, w, a) = data::read_rgb(&t1)?;
            let (h2, w2, b) = data::read_rgb(&t2)?;
            if (h, w) != (h2, w2) {
                return Err(Failure::Runtime(format!("images differ in size: {h}x{w} vs {h2}x{w2}")));
            }
            let stem = t1.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction").to_string();
            let pair = ImagePair::new(stem.clone(), h, w, a, b, vec![0; h * w])?;
            let (mask, prob) = trainer::predict_pair(&model, &pair)?;
            std::fs::create_dir_all(&dir)?;
            let png = dir.join(format!("{stem}.png"));
            data::write_label(&png, h, w, &mask)?;
            let raw = dir.join(format!("{stem}.f32"));
            write_probability(&raw, h, w, &prob)?;
            print_json(out, &json!({ "mask": png, "probability": raw, "height": h, "width": w }))
        }
        Command::Audit { root, tile_size } => {
            let report = data::audit_dataset(&root, tile_size)?;
            writeln!(out, "imbalance {}", report.ratio)?;
            print_json(out, &serde_json::to_value(&report)?)
        }
        Command::Ablate { dataset, synthetic, common } => {
            let base = resolve_config(&common)?;
            let mut rows = Vec::new();
            writeln!(out, "{:<12} {:>8} {:>8}", "Variant", "F1", "IoU")?;
            for variant in Variant::ALL {
                let mut cfg = base.clone().with_variant(variant);
                if let Some(o) = &base.out_dir {
                    cfg.out_dir = Some(o.join(variant.name()));
                }
                let splits = open_splits(&dataset, &synthetic, &mut cfg, common.scale.is_some())?;
                let model = build_variant(variant.name(), &cfg)?;
                let result = trainer::train(&cfg, &model, splits.train.as_ref(), splits.val.as_ref(), |_| {})?;
                let (_, m) = trainer::evaluate(&result.best.to_model()?, splits.test.as_ref(), cfg.eval_batch_size)?;
                writeln!(out, "{:<12} {:>8.2} {:>8.2}", variant.name(), m.f1 * 100.0, m.iou * 100.0)?;
                rows.push(json!({ "variant": variant.name(), "f1": m.f1, "iou": m.iou, "best_epoch": result.best.epoch }));
            }
            if let Some(o) = &base.out_dir {
                std::fs::create_dir_all(o)?;
                std::fs::write(o.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
            }
            Ok(())
        }
        Command::Bench { dataset, synthetic, common } => {
            let mut cfg = resolve_config(&common)?;
            cfg.max_epochs = 1;
            cfg.out_dir = None;
            let splits = open_splits(&dataset, &synthetic, &mut cfg, common.scale.is_some())?;
            let model = CgNet::new(cfg.model_config(), cfg.seed, candle_core::DType::F32)?;
            let start = Instant::now();
            let result = trainer::train(&cfg, &model, splits.train.as_ref(), splits.val.as_ref(), |_| {})?;
            let epoch_seconds = result.history.first().map(|l| l.wall_seconds).unwrap_or_default();
            let total = start.elapsed().as_secs_f64();
            let start = Instant::now();
            trainer::evaluate(&model, splits.test.as_ref(), cfg.eval_batch_size)?;
            let test_seconds = start.elapsed().as_secs_f64();
            print_json(
                out,
                &json!({
                    "variant": cfg.variant().name(),
                    "parameters": model.parameter_count(),
                    "train_units": splits.train.len(),
                    "test_units": splits.test.len(),
                    "seconds_per_epoch": epoch_seconds,
                    "seconds_including_validation": total,
                    "seconds_per_test_set": test_seconds,
                }),
            )
        }
        Command::Render { pred, gt, out: path } => {
            let (h, w, p) = data::read_label(&pred)?;
            let (h2, w2, g) = data::read_label(&gt)?;
            if (h, w) != (h2, w2) {
                return Err(Failure::Runtime(format!("prediction is {h}x{w}, ground truth {h2}x{w2}")));
            }
            let img = render_error_map(&p, &g, h, w, &ErrorMapPalette::default())?;
            img.save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            Ok(())
        }
    }
}

/// Raw probability raster: little-endian `u32` height, `u32` width, then
/// `height * width` little-endian `f32` values in row-major order.
pub fn write_probability(path: &Path, height: usize, width: usize, prob: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + prob.len() * 4);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for p in prob {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, buf)
}

pub fn read_probability(path: &Path) -> std::io::Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path)?;
    let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, "truncated probability raster");
    if bytes.len() < 8 {
        return Err(bad());
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + h * w * 4 {
        return Err(bad());
    }
    let values = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((h, w, values))
}
