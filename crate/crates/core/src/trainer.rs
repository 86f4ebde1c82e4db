//! Experiment configuration, ablation variants, the training loop,
//! evaluation and checkpoint handling.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::cgm::DEFAULT_TOKEN_CAP;
use crate::data::{augment, make_batch, sample_rng, AugmentationPolicy, ImagePair, Normalization, PairSource};
use crate::decoder::CgmToggles;
use crate::init::named_rng;
use crate::loss::{total_loss, LossReport};
use crate::metrics::{compute_metrics, ConfusionCounts, MetricReport};
use crate::model::{CgNet, ModelConfig};
use crate::{Error, Result};

/// The eight ablation configurations, from no guide module to all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Base,
    BCgm4,
    BCgm3,
    BCgm2,
    BCgm43,
    BCgm42,
    BCgm32,
    CgNet,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Base,
        Variant::BCgm4,
        Variant::BCgm3,
        Variant::BCgm2,
        Variant::BCgm43,
        Variant::BCgm42,
        Variant::BCgm32,
        Variant::CgNet,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::BCgm4 => "B-CGM-4",
            Variant::BCgm3 => "B-CGM-3",
            Variant::BCgm2 => "B-CGM-2",
            Variant::BCgm43 => "B-CGM-4-3",
            Variant::BCgm42 => "B-CGM-4-2",
            Variant::BCgm32 => "B-CGM-3-2",
            Variant::CgNet => "CGNet",
        }
    }

    pub fn toggles(&self) -> CgmToggles {
        let (stage4, stage3, stage2) = match self {
            Variant::Base => (false, false, false),
            Variant::BCgm4 => (true, false, false),
            Variant::BCgm3 => (false, true, false),
            Variant::BCgm2 => (false, false, true),
            Variant::BCgm43 => (true, true, false),
            Variant::BCgm42 => (true, false, true),
            Variant::BCgm32 => (false, true, true),
            Variant::CgNet => (true, true, true),
        };
        CgmToggles { stage2, stage3, stage4 }
    }

    pub fn from_toggles(t: CgmToggles) -> Self {
        *Self::ALL.iter().find(|v| v.toggles() == t).expect("all eight toggle combinations are named")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimisation steps across all epochs.
    pub max_steps: Option<usize>,
    pub cgm_toggles: CgmToggles,
    pub aux_weight: f64,
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub channel_scale: f64,
    pub tile_size: usize,
    pub augment: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub token_cap: usize,
    pub eval_batch_size: usize,
    /// Stop once validation F1 exceeds this value.
    pub stop_at_f1: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 2.5e-3,
            batch_size: 8,
            max_epochs: 50,
            max_steps: None,
            cgm_toggles: CgmToggles::ALL,
            aux_weight: 1.0,
            seed: 0,
            data_root: None,
            out_dir: None,
            channel_scale: 1.0,
            tile_size: 256,
            augment: true,
            grad_clip: None,
            token_cap: DEFAULT_TOKEN_CAP,
            eval_batch_size: 8,
            stop_at_f1: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl ExperimentConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.cgm_toggles = v.toggles();
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::from_toggles(self.cgm_toggles)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { channel_scale: self.channel_scale, toggles: self.cgm_toggles, token_cap: self.token_cap }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be a finite value >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::Config("aux_weight must be >= 0".into()));
        }
        if !(self.channel_scale > 0.0) {
            return Err(Error::Config("channel_scale must be positive".into()));
        }
        if self.tile_size == 0 || self.tile_size % crate::backbone::TOTAL_STRIDE != 0 {
            return Err(Error::Config(format!("tile_size must be a positive multiple of 16, got {}", self.tile_size)));
        }
        Ok(())
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" | "epochs" => self.max_epochs = parse(key, value)?,
            "max_steps" => self.max_steps = if value == "none" { None } else { Some(parse(key, value)?) },
            "aux_weight" => self.aux_weight = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_root" | "data" => self.data_root = Some(PathBuf::from(value)),
            "out_dir" | "out" => self.out_dir = Some(PathBuf::from(value)),
            "channel_scale" | "scale" => self.channel_scale = parse(key, value)?,
            "tile_size" => self.tile_size = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "grad_clip" => self.grad_clip = if value == "none" { None } else { Some(parse(key, value)?) },
            "token_cap" => self.token_cap = parse(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse(key, value)?,
            "stop_at_f1" => self.stop_at_f1 = if value == "none" { None } else { Some(parse(key, value)?) },
            "variant" => self.cgm_toggles = value.parse::<Variant>()?.toggles(),
            "cgm_stage2" => self.cgm_toggles.stage2 = parse_bool(key, value)?,
            "cgm_stage3" => self.cgm_toggles.stage3 = parse_bool(key, value)?,
            "cgm_stage4" => self.cgm_toggles.stage4 = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Layer `key = value` lines (`#` starts a comment) over `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }
}

/// Model for a named ablation variant under `cfg`'s width and seed.
pub fn build_variant(name: &str, cfg: &ExperimentConfig) -> Result<CgNet> {
    let variant: Variant = name.parse()?;
    let cfg = cfg.clone().with_variant(variant);
    CgNet::new(cfg.model_config(), cfg.seed, DType::F32)
}

/// One line of the per-epoch JSON log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub main_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub val_f1: f64,
    pub val_iou: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// Same epoch and loss/metric values, ignoring timing.
    pub fn same_values(&self, other: &Self) -> bool {
        (self.epoch, self.main_loss, self.aux_loss, self.total_loss, self.val_f1, self.val_iou)
            == (other.epoch, other.main_loss, other.aux_loss, other.total_loss, other.val_f1, other.val_iou)
    }
}

/// Epoch with the best validation F1; ties go to higher IoU, then to the
/// earlier epoch.
pub fn select_checkpoint(history: &[(usize, f64, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64, f64)> = None;
    for &(epoch, f1, iou) in history {
        best = match best {
            None => Some((epoch, f1, iou)),
            Some(b) => {
                let better = f1 > b.1 || (f1 == b.1 && (iou > b.2 || (iou == b.2 && epoch < b.0)));
                Some(if better { (epoch, f1, iou) } else { b })
            }
        };
    }
    best.map(|b| b.0).ok_or_else(|| Error::Input("checkpoint history is empty".into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    val_f1: f64,
    val_iou: f64,
    params: String,
    config: ExperimentConfig,
}

/// Parameter snapshot plus the validation scores it was selected on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub epoch: usize,
    pub val_f1: f64,
    pub val_iou: f64,
    pub config: ExperimentConfig,
}

impl Checkpoint {
    pub fn capture(model: &CgNet, epoch: usize, val: &MetricReport, config: &ExperimentConfig) -> Result<Self> {
        Ok(Self { params: model.snapshot()?, epoch, val_f1: val.f1, val_iou: val.iou, config: config.clone() })
    }

    /// Writes `<stem>.safetensors` plus a `<stem>.json` sidecar; returns the sidecar path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let params = format!("{stem}.safetensors");
        archive::save_tensors(dir.join(&params), &self.params)?;
        let meta = CheckpointMeta {
            epoch: self.epoch,
            val_f1: self.val_f1,
            val_iou: self.val_iou,
            params,
            config: self.config.clone(),
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?)?;
        Ok(path)
    }

    /// Accepts the JSON sidecar, the tensor archive, or an output directory
    /// containing a `best` pointer file.
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = if path.is_dir() {
            let pointer = path.join("best");
            let stem = std::fs::read_to_string(&pointer).map_err(|e| Error::ingestion(&pointer, e.to_string()))?;
            path.join(format!("{}.json", stem.trim()))
        } else {
            path.with_extension("json")
        };
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::ingestion(&sidecar, e.to_string()))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let dir = sidecar.parent().unwrap_or(Path::new("."));
        let mut params: Vec<_> = archive::load_tensors(dir.join(&meta.params))?.into_iter().collect();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self { params, epoch: meta.epoch, val_f1: meta.val_f1, val_iou: meta.val_iou, config: meta.config })
    }

    pub fn to_model(&self) -> Result<CgNet> {
        let model = CgNet::new(self.config.model_config(), self.config.seed, DType::F32)?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Total loss of the first optimisation step, before any update.
    pub initial_loss: f64,
    pub steps: usize,
}

fn clip_gradients(grads: &mut candle_core::backprop::GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.get(v) {
                let scaled = (g * s)?;
                grads.insert(v, scaled);
            }
        }
    }
    Ok(())
}

fn load_batch(source: &dyn PairSource, indices: &[usize], cfg: &ExperimentConfig, epoch: usize) -> Result<Vec<ImagePair>> {
    let policy = AugmentationPolicy::standard(cfg.seed);
    indices
        .iter()
        .map(|&i| {
            let p = source.get(i)?;
            Ok(if cfg.augment {
                augment(&p, &policy, &mut sample_rng(cfg.seed, epoch as u64, i as u64))
            } else {
                p
            })
        })
        .collect()
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(log)?)?;
    Ok(())
}

/// Optimise `model` with AdamW (decoupled weight decay) at a constant
/// learning rate, validating after every epoch and keeping the best epoch
/// per [`select_checkpoint`]. With `cfg.out_dir` set, the log goes to
/// `log.jsonl`, each new best to `epoch_NNN.{safetensors,json}`, and its
/// stem to the `best` pointer file.
pub fn train(
    cfg: &ExperimentConfig,
    model: &CgNet,
    train_set: &dyn PairSource,
    val_set: &dyn PairSource,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let log = dir.join("log.jsonl");
        if log.exists() {
            std::fs::remove_file(log)?;
        }
    }
    let vars: Vec<Var> = model.trainable_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() },
    )?;
    let norm = Normalization::default();
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut initial_loss = None;
    let mut steps = 0usize;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut named_rng(cfg.seed, &format!("epoch{epoch}")));
        let (mut main, mut aux, mut total, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let pairs = load_batch(train_set, chunk, cfg, epoch)?;
            let batch = make_batch(&pairs, &norm, model.dtype())?;
            let pred = model.forward(&batch.t1, &batch.t2, true)?;
            let loss = total_loss(&pred, &batch.label, cfg.aux_weight)?;
            let LossReport { main: m, aux: a, total: t, .. } = loss.report;
            if !t.is_finite() {
                return Err(Error::Divergence { epoch, step: steps, loss: t });
            }
            initial_loss.get_or_insert(t);
            let mut grads = loss.total.backward()?;
            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut grads, &vars, c)?;
            }
            opt.step(&grads)?;
            steps += 1;
            let n = chunk.len();
            main += m * n as f64;
            aux += a * n as f64;
            total += t * n as f64;
            seen += n;
        }
        if seen == 0 {
            break 'epochs;
        }
        let (_, val) = evaluate(model, val_set, cfg.eval_batch_size)?;
        let log = EpochLog {
            epoch,
            main_loss: main / seen as f64,
            aux_loss: aux / seen as f64,
            total_loss: total / seen as f64,
            val_f1: val.f1,
            val_iou: val.iou,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let scores: Vec<_> = history.iter().map(|l: &EpochLog| (l.epoch, l.val_f1, l.val_iou)).chain([(epoch, val.f1, val.iou)]).collect();
        if select_checkpoint(&scores)? == epoch {
            let ck = Checkpoint::capture(model, epoch, &val, cfg)?;
            if let Some(dir) = &cfg.out_dir {
                let stem = format!("epoch_{epoch:03}");
                ck.save(dir, &stem)?;
                std::fs::write(dir.join("best"), format!("{stem}\n"))?;
            }
            best = Some(ck);
        }
        if let Some(dir) = &cfg.out_dir {
            append_log(&dir.join("log.jsonl"), &log)?;
        }
        on_epoch(&log);
        let done = cfg.stop_at_f1.is_some_and(|t| log.val_f1 > t);
        history.push(log);
        if done {
            break;
        }
    }
    let best = best.ok_or_else(|| Error::Input("no epoch completed".into()))?;
    Ok(TrainOutcome { best, history, initial_loss: initial_loss.unwrap_or(f64::NAN), steps })
}

/// Counts over `range` of `source` in eval mode, without augmentation.
pub fn evaluate_counts(model: &CgNet, source: &dyn PairSource, range: Range<usize>, batch_size: usize) -> Result<ConfusionCounts> {
    let norm = Normalization::default();
    let indices: Vec<usize> = range.collect();
    let mut counts = ConfusionCounts::default();
    for chunk in indices.chunks(batch_size.max(1)) {
        let pairs = chunk.iter().map(|&i| source.get(i)).collect::<Result<Vec<_>>>()?;
        let batch = make_batch(&pairs, &norm, model.dtype())?;
        let pred = model.forward(&batch.t1, &batch.t2, false)?;
        for (mask, gt) in pred.binary_masks()?.iter().zip(&batch.masks) {
            counts += ConfusionCounts::from_masks(mask, gt)?;
        }
    }
    Ok(counts)
}

/// Global confusion counts and metrics over a whole split.
pub fn evaluate(model: &CgNet, source: &dyn PairSource, batch_size: usize) -> Result<(ConfusionCounts, MetricReport)> {
    if source.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let counts = evaluate_counts(model, source, 0..source.len(), batch_size)?;
    Ok((counts, compute_metrics(&counts)))
}

pub fn evaluate_checkpoint(ck: &Checkpoint, source: &dyn PairSource) -> Result<(ConfusionCounts, MetricReport)> {
    evaluate(&ck.to_model()?, source, ck.config.eval_batch_size)
}

/// Binary mask and change probability for one pair, both row-major `H * W`.
pub fn predict_pair(model: &CgNet, pair: &ImagePair) -> Result<(Vec<u8>, Vec<f32>)> {
    let batch = make_batch(std::slice::from_ref(pair), &Normalization::default(), model.dtype())?;
    let pred = model.forward(&batch.t1, &batch.t2, false)?;
    let mask = pred.binary_masks()?.remove(0);
    let prob = pred.change_probability()?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((mask, prob))
}
