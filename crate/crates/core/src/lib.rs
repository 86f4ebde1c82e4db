//! Bi-temporal change detection built around a change-guided decoder.
//!
//! A shared-weight VGG-16-BN encoder turns each image of a co-registered
//! pair into a five-level feature pyramid. The decoder fuses both pyramids,
//! produces a one-channel change guiding map from the deep features and
//! uses it to steer prior-weighted self-attention ([`cgm`]) while fusing
//! from deep to shallow. Training supervises both the final two-class
//! logits and the guiding map.

pub mod archive;
pub mod backbone;
pub mod cgm;
pub mod conv;
pub mod data;
pub mod decoder;
pub mod error;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod render;
pub mod resample;
pub mod trainer;

pub use error::{Error, Result};
pub use metrics::{ConfusionCounts, MetricReport};
pub use model::{CgNet, ModelConfig};
pub use trainer::{ExperimentConfig, Variant};

/// Default compute device. Everything in this crate runs on the CPU.
pub fn device() -> candle_core::Device {
    candle_core::Device::Cpu
}
