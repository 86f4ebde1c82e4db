use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::archive::{self, BACKBONE_PREFIX};
use crate::backbone::{Encoder, FeaturePyramid};
use crate::cgm::DEFAULT_TOKEN_CAP;
use crate::decoder::{CgmToggles, ChangePrediction, Decoder};
use crate::{init, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channel_scale: f64,
    pub toggles: CgmToggles,
    pub token_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channel_scale: 1.0, toggles: CgmToggles::ALL, token_cap: DEFAULT_TOKEN_CAP }
    }
}

impl ModelConfig {
    pub const TINY_SCALE: f64 = 0.25;

    pub fn tiny(toggles: CgmToggles) -> Self {
        Self { channel_scale: Self::TINY_SCALE, toggles, ..Self::default() }
    }
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Siamese encoder plus change-guided decoder, owning its parameters.
pub struct CgNet {
    config: ModelConfig,
    dtype: DType,
    varmap: VarMap,
    encoder: Encoder,
    decoder: Decoder,
}

impl CgNet {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &crate::device());
        let encoder = Encoder::new(vb.pp("backbone"), config.channel_scale)?;
        let decoder = Decoder::new(
            encoder.stage_channels(),
            config.channel_scale,
            config.toggles,
            config.token_cap,
            vb.pp("decoder"),
        )?;
        init::reinitialize(&varmap, seed)?;
        Ok(Self { config, dtype, varmap, encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn encode(&self, image: &Tensor, train: bool) -> Result<FeaturePyramid> {
        self.encoder.encode_pyramid(&image.to_dtype(self.dtype)?, train)
    }

    /// `t1`, `t2`: `[B, 3, H, W]` normalised images, H and W multiples of 16.
    pub fn forward(&self, t1: &Tensor, t2: &Tensor, train: bool) -> Result<ChangePrediction> {
        if t1.dims() != t2.dims() {
            return Err(Error::Shape(format!(
                "temporal images differ in shape: {:?} vs {:?}",
                t1.dims(),
                t2.dims()
            )));
        }
        let n = t1.dim(0)?;
        let joint = self.encode(&Tensor::cat(&[t1, t2], 0)?, train)?;
        let split = |from| -> Result<FeaturePyramid> {
            let stages = joint.stages.iter().map(|s| s.narrow(0, from, n)).collect::<candle_core::Result<_>>()?;
            Ok(FeaturePyramid { stages })
        };
        self.decoder.decode(&split(0)?, &split(n)?, train)
    }

    /// Learnable variables sorted by name; batch-norm running statistics excluded.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock poisoned");
        let mut vars: Vec<_> = data
            .iter()
            .filter(|(k, _)| !is_running_stat(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn cgm_group_count(&self) -> usize {
        self.decoder.cgm_count()
    }

    /// Detached copy of every variable including running statistics.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        init::snapshot(&self.varmap)
    }

    /// Overwrite all variables. Every model variable must be present.
    pub fn load_params(&self, params: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.varmap.data().lock().expect("varmap lock poisoned").keys().cloned().collect();
        for name in &names {
            if !params.iter().any(|(k, _)| k == name) {
                return Err(Error::Config(format!("parameter `{name}` missing from archive")));
            }
        }
        for (name, t) in params {
            init::set_named(&self.varmap, name, t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        archive::save_tensors(path, &self.snapshot()?)
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = archive::load_tensors(path)?;
        let params: Vec<_> = map.into_iter().collect();
        self.load_params(&params)
    }

    /// Backbone tensors under their bare archive names.
    pub fn backbone_params(&self) -> Result<Vec<(String, Tensor)>> {
        Ok(self
            .snapshot()?
            .into_iter()
            .filter_map(|(k, t)| k.strip_prefix(BACKBONE_PREFIX).map(|s| (s.to_string(), t)))
            .collect())
    }

    /// Load a backbone archive; returns the number of tensors applied.
    pub fn load_backbone(&self, path: impl AsRef<Path>) -> Result<usize> {
        let map = archive::load_tensors(path.as_ref())?;
        let expected = self.backbone_params()?;
        for (name, _) in &expected {
            if !map.contains_key(name) {
                return Err(Error::ingestion(path.as_ref(), format!("missing backbone tensor `{name}`")));
            }
        }
        for (name, t) in &map {
            if !archive::is_backbone_key(name) {
                return Err(Error::ingestion(path.as_ref(), format!("unexpected key `{name}`")));
            }
            init::set_named(&self.varmap, &format!("{BACKBONE_PREFIX}{name}"), t)?;
        }
        Ok(map.len())
    }
}
