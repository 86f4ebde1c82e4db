//! Bi-temporal fusion decoder.
//!
//! Both pyramids are fused stage by stage (concat + conv block). Decoding
//! runs deep to shallow: the stage-5 fusion is upsampled into stage 4, whose
//! decoded feature yields the change guiding map. Stages 4, 3 and 2 may each
//! apply a guide module fed with that one map resampled to their size, and a
//! last conv block at input resolution joins the stage-1 fusion before the
//! 1x1 classifier.

use std::cell::RefCell;

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{batch_norm, BatchNorm, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::backbone::{bn_config, scaled_channels, FeaturePyramid};
use crate::cgm::{AttentionConfig, ChangeGuideModule};
use crate::conv::Conv;
use crate::resample::resize_bilinear;
use crate::{Error, Result};

/// Decoded widths for stages 4, 3, 2, 1 at full channel scale.
pub const DECODER_WIDTHS: [usize; 4] = [512, 256, 128, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CgmToggles {
    pub stage2: bool,
    pub stage3: bool,
    pub stage4: bool,
}

impl CgmToggles {
    pub const NONE: Self = Self { stage2: false, stage3: false, stage4: false };
    pub const ALL: Self = Self { stage2: true, stage3: true, stage4: true };

    pub fn count(&self) -> usize {
        [self.stage2, self.stage3, self.stage4].iter().filter(|&&b| b).count()
    }

    pub fn enabled(&self, stage: usize) -> bool {
        match stage {
            2 => self.stage2,
            3 => self.stage3,
            4 => self.stage4,
            _ => false,
        }
    }
}

/// 3x3 convolution, batch-norm, ReLU.
pub struct ConvBlock {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(in_channels: usize, out_channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(in_channels, out_channels, 3, vb.pp("conv"))?,
            bn: batch_norm(out_channels, bn_config(), vb.pp("bn"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward_t(&self.conv.forward(x)?, train)?.relu()?)
    }
}

/// Change guiding logits at the stage-4 resolution, with resampled views
/// memoised per requested size.
pub struct ChangeGuidingMap {
    logits: Tensor,
    views: RefCell<Vec<((usize, usize), Tensor)>>,
}

impl ChangeGuidingMap {
    pub fn new(logits: Tensor) -> Self {
        Self { logits, views: RefCell::new(Vec::new()) }
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn at(&self, height: usize, width: usize) -> Result<Tensor> {
        if let Some((_, t)) = self.views.borrow().iter().find(|(k, _)| *k == (height, width)) {
            return Ok(t.clone());
        }
        let t = resize_bilinear(&self.logits, height, width)?;
        self.views.borrow_mut().push(((height, width), t.clone()));
        Ok(t)
    }
}

#[derive(Debug, Clone)]
pub struct ChangePrediction {
    /// `[B, 2, H, W]` raw class logits.
    pub logits: Tensor,
    /// `[B, 1, H, W]` guiding-map logits at input resolution.
    pub aux_logits: Tensor,
}

impl ChangePrediction {
    /// `[B, H, W]` u8 map: 1 where the change logit strictly exceeds the
    /// no-change logit, ties go to 0.
    pub fn binary_map(&self) -> Result<Tensor> {
        let l0 = self.logits.narrow(1, 0, 1)?.squeeze(1)?;
        let l1 = self.logits.narrow(1, 1, 1)?.squeeze(1)?;
        Ok(l1.gt(&l0)?)
    }

    /// One flat row-major mask per batch item.
    pub fn binary_masks(&self) -> Result<Vec<Vec<u8>>> {
        let m = self.binary_map()?;
        let b = m.dim(0)?;
        (0..b).map(|i| Ok(m.get(i)?.flatten_all()?.to_vec1::<u8>()?)).collect()
    }

    /// Per-pixel change probability `softmax(logits)[1]`, `[B, H, W]`.
    pub fn change_probability(&self) -> Result<Tensor> {
        let l0 = self.logits.narrow(1, 0, 1)?;
        let l1 = self.logits.narrow(1, 1, 1)?;
        Ok(candle_nn::ops::sigmoid(&(l1 - l0)?)?.squeeze(1)?)
    }
}

pub struct Decoder {
    fuse: Vec<ConvBlock>,
    decode: Vec<ConvBlock>,
    guide_head: Conv,
    cgm: [Option<ChangeGuideModule>; 3],
    classifier: Conv,
    widths: [usize; 4],
}

impl Decoder {
    /// `stage_channels` are the encoder widths. Parameter groups are created
    /// only for enabled guide modules.
    pub fn new(
        stage_channels: [usize; 5],
        scale: f64,
        toggles: CgmToggles,
        token_cap: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        let fuse = (0..5)
            .map(|s| {
                let c = stage_channels[s];
                ConvBlock::new(2 * c, c, vb.pp(format!("fuse{}", s + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let widths = DECODER_WIDTHS.map(|w| scaled_channels(w, scale));
        // decode[i] handles stage 4 - i
        let mut decode = Vec::with_capacity(4);
        let mut deeper = stage_channels[4];
        for (i, &width) in widths.iter().enumerate() {
            let stage = 4 - i;
            let skip = stage_channels[stage - 1];
            decode.push(ConvBlock::new(deeper + skip, width, vb.pp(format!("dec{stage}")))?);
            deeper = width;
        }
        let guide_head = Conv::new(widths[0], 1, 1, vb.pp("guide_head"))?;
        let make_cgm = |stage: usize, width: usize| -> Result<Option<ChangeGuideModule>> {
            if !toggles.enabled(stage) {
                return Ok(None);
            }
            Ok(Some(ChangeGuideModule::new(
                width,
                AttentionConfig::for_channels(width),
                token_cap,
                vb.pp(format!("cgm{stage}")),
            )?))
        };
        let cgm = [make_cgm(2, widths[2])?, make_cgm(3, widths[1])?, make_cgm(4, widths[0])?];
        let classifier = Conv::new(widths[3], 2, 1, vb.pp("classifier"))?;
        Ok(Self { fuse, decode, guide_head, cgm, classifier, widths })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn cgm_count(&self) -> usize {
        self.cgm.iter().filter(|c| c.is_some()).count()
    }

    pub fn cgm(&self, stage: usize) -> Option<&ChangeGuideModule> {
        match stage {
            2..=4 => self.cgm[stage - 2].as_ref(),
            _ => None,
        }
    }

    /// Concatenate the two temporal features on channels and apply the
    /// stage's conv block. Output is non-negative.
    pub fn fuse_stage(&self, stage: usize, a: &Tensor, b: &Tensor, train: bool) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!(
                "stage {stage} features differ: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let block = self
            .fuse
            .get(stage.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("stage id must be 1..=5, got {stage}")))?;
        block.forward(&Tensor::cat(&[a, b], 1)?, train)
    }

    /// One-channel guiding logits from the decoded stage-4 feature.
    pub fn generate_guiding_map(&self, stage4: &Tensor) -> Result<ChangeGuidingMap> {
        Ok(ChangeGuidingMap::new(self.guide_head.forward(stage4)?))
    }

    /// 1x1 convolution to two raw logits per pixel.
    pub fn classify(&self, feature: &Tensor) -> Result<Tensor> {
        Ok(self.classifier.forward(feature)?)
    }

    fn up_and_join(&self, deeper: &Tensor, skip: &Tensor, block: &ConvBlock, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = skip.dims4()?;
        let up = resize_bilinear(deeper, h, w)?;
        block.forward(&Tensor::cat(&[&up, skip], 1)?, train)
    }

    pub fn decode(&self, a: &FeaturePyramid, b: &FeaturePyramid, train: bool) -> Result<ChangePrediction> {
        if a.stages.len() != 5 || b.stages.len() != 5 {
            return Err(Error::Shape("pyramids must have five stages".into()));
        }
        for (s, (x, y)) in a.stages.iter().zip(&b.stages).enumerate() {
            if x.dims() != y.dims() {
                return Err(Error::Shape(format!(
                    "pyramid stage {} mismatch: {:?} vs {:?}",
                    s + 1,
                    x.dims(),
                    y.dims()
                )));
            }
        }
        let fused = (1..=5)
            .map(|s| self.fuse_stage(s, a.stage(s), b.stage(s), train))
            .collect::<Result<Vec<_>>>()?;

        let mut x = fused[4].clone();
        let mut guiding: Option<ChangeGuidingMap> = None;
        for (i, block) in self.decode.iter().enumerate() {
            let stage = 4 - i;
            x = self.up_and_join(&x, &fused[stage - 1], block, train)?;
            if stage == 4 {
                guiding = Some(self.generate_guiding_map(&x)?);
            }
            if let (Some(cgm), Some(map)) = (self.cgm(stage), guiding.as_ref()) {
                let (_, _, h, w) = x.dims4()?;
                x = cgm.forward(&x, &map.at(h, w)?, train)?;
            }
        }
        let map = guiding.expect("stage 4 always runs");
        let (_, _, h, w) = fused[0].dims4()?;
        Ok(ChangePrediction { logits: self.classify(&x)?, aux_logits: map.at(h, w)? })
    }
}
