//! Siamese VGG-16-BN encoder sliced into five stages.
//!
//! The canonical `features` sequence has 44 layers. Stage boundaries fall
//! just after a batch-norm, so each stage emits pre-activation features and
//! every later stage opens with the ReLU and max-pool of its predecessor.

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{batch_norm, BatchNorm, BatchNormConfig, VarBuilder};

use crate::conv::Conv;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub stage_id: usize,
    pub layer_slice: (usize, usize),
    pub out_channels: usize,
    pub stride_vs_input: usize,
}

pub const STAGES: [StageSpec; 5] = [
    StageSpec { stage_id: 1, layer_slice: (0, 5), out_channels: 64, stride_vs_input: 1 },
    StageSpec { stage_id: 2, layer_slice: (5, 12), out_channels: 128, stride_vs_input: 2 },
    StageSpec { stage_id: 3, layer_slice: (12, 22), out_channels: 256, stride_vs_input: 4 },
    StageSpec { stage_id: 4, layer_slice: (22, 32), out_channels: 512, stride_vs_input: 8 },
    StageSpec { stage_id: 5, layer_slice: (32, 42), out_channels: 512, stride_vs_input: 16 },
];

/// Total downsampling of the five-stage encoder.
pub const TOTAL_STRIDE: usize = 16;

const VGG16_CFG: [Option<usize>; 18] = [
    Some(64), Some(64), None,
    Some(128), Some(128), None,
    Some(256), Some(256), Some(256), None,
    Some(512), Some(512), Some(512), None,
    Some(512), Some(512), Some(512), None,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VggLayer {
    Conv { in_channels: usize, out_channels: usize },
    BatchNorm { channels: usize },
    Relu,
    MaxPool,
}

/// The canonical VGG-16-BN feature layer list at full width.
pub fn vgg16_bn_layers() -> Vec<VggLayer> {
    let mut layers = Vec::with_capacity(44);
    let mut in_c = 3;
    for entry in VGG16_CFG {
        match entry {
            Some(c) => {
                layers.push(VggLayer::Conv { in_channels: in_c, out_channels: c });
                layers.push(VggLayer::BatchNorm { channels: c });
                layers.push(VggLayer::Relu);
                in_c = c;
            }
            None => layers.push(VggLayer::MaxPool),
        }
    }
    layers
}

/// Channel count under a width multiplier. Three input channels never scale.
pub fn scaled_channels(channels: usize, scale: f64) -> usize {
    if channels == 3 {
        return 3;
    }
    ((channels as f64 * scale).round() as usize).max(1)
}

pub(crate) fn bn_config() -> BatchNormConfig {
    BatchNormConfig {
        eps: 1e-5,
        remove_mean: true,
        affine: true,
        momentum: 0.1,
    }
}

enum Layer {
    Conv(Conv),
    Bn(BatchNorm),
    Relu,
    MaxPool,
}

pub struct EncoderStage {
    spec: StageSpec,
    in_channels: usize,
    out_channels: usize,
    layers: Vec<Layer>,
    pools: bool,
}

impl EncoderStage {
    pub fn spec(&self) -> StageSpec {
        self.spec
    }
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
}

/// Per-image feature pyramid, one `[B, C_s, H/stride_s, W/stride_s]` tensor per stage.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn stage(&self, stage_id: usize) -> &Tensor {
        &self.stages[stage_id - 1]
    }

    pub fn is_finite(&self) -> Result<bool> {
        for s in &self.stages {
            let v: Vec<f64> = s.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Weight-shared encoder. Both temporal images go through the same instance.
pub struct Encoder {
    stages: Vec<EncoderStage>,
}

impl Encoder {
    /// Parameters live under `stage{n}.layer{m}` where `m` is the index in
    /// the canonical layer list.
    pub fn new(vb: VarBuilder, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Config(format!("channel scale must be positive, got {scale}")));
        }
        let canonical = vgg16_bn_layers();
        let mut stages = Vec::with_capacity(5);
        for spec in STAGES {
            let (lo, hi) = spec.layer_slice;
            let svb = vb.pp(format!("stage{}", spec.stage_id));
            let mut layers = Vec::new();
            let mut in_channels = None;
            let mut pools = false;
            let mut current = 0;
            for (m, layer) in canonical.iter().enumerate().take(hi).skip(lo) {
                let lvb = svb.pp(format!("layer{m}"));
                let built = match *layer {
                    VggLayer::Conv { in_channels: ci, out_channels: co } => {
                        let ci = scaled_channels(ci, scale);
                        let co = scaled_channels(co, scale);
                        in_channels.get_or_insert(ci);
                        current = co;
                        Layer::Conv(Conv::new(ci, co, 3, lvb)?)
                    }
                    VggLayer::BatchNorm { channels } => {
                        Layer::Bn(batch_norm(scaled_channels(channels, scale), bn_config(), lvb)?)
                    }
                    VggLayer::Relu => Layer::Relu,
                    VggLayer::MaxPool => {
                        pools = true;
                        Layer::MaxPool
                    }
                };
                layers.push(built);
            }
            stages.push(EncoderStage {
                spec,
                in_channels: in_channels.expect("every stage holds a convolution"),
                out_channels: current,
                layers,
                pools,
            });
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[EncoderStage] {
        &self.stages
    }

    pub fn stage_channels(&self) -> [usize; 5] {
        let mut out = [0; 5];
        for (o, s) in out.iter_mut().zip(&self.stages) {
            *o = s.out_channels;
        }
        out
    }

    /// Run a single stage (1-based id) on a `[B, C, H, W]` tensor.
    pub fn encode_stage(&self, x: &Tensor, stage_id: usize, train: bool) -> Result<Tensor> {
        let stage = self
            .stages
            .get(stage_id.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("stage id must be 1..=5, got {stage_id}")))?;
        let (_, c, h, w) = x
            .dims4()
            .map_err(|_| Error::Shape(format!("expected [B,C,H,W], got {:?}", x.dims())))?;
        if c != stage.in_channels {
            return Err(Error::Config(format!(
                "stage {stage_id} expects {} input channels, got {c}",
                stage.in_channels
            )));
        }
        if stage.pools && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::Shape(format!(
                "stage {stage_id} halves the resolution; {h}x{w} is not divisible by 2"
            )));
        }
        let mut x = x.clone();
        for layer in &stage.layers {
            x = match layer {
                Layer::Conv(conv) => conv.forward(&x)?,
                Layer::Bn(bn) => bn.forward_t(&x, train)?,
                Layer::Relu => x.relu()?,
                Layer::MaxPool => x.max_pool2d(2)?,
            };
        }
        Ok(x)
    }

    /// Encode an image batch `[B, 3, H, W]`; H and W must be multiples of 16.
    pub fn encode_pyramid(&self, image: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let (_, _, h, w) = image
            .dims4()
            .map_err(|_| Error::Shape(format!("expected [B,3,H,W], got {:?}", image.dims())))?;
        if h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image size {h}x{w} must be a non-zero multiple of {TOTAL_STRIDE}"
            )));
        }
        let mut stages = Vec::with_capacity(5);
        let mut x = image.clone();
        for s in 1..=5 {
            x = self.encode_stage(&x, s, train)?;
            stages.push(x.clone());
        }
        Ok(FeaturePyramid { stages })
    }
}
