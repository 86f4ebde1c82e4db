//! Pixel-wise binary cross-entropy with deep supervision on the guiding map.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::ChangePrediction;
use crate::{Error, Result};

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub main: f64,
    pub aux: f64,
    pub total: f64,
    pub pixel_count: usize,
}

fn check_binary(label: &Tensor) -> Result<()> {
    let bad = label
        .ne(0.0)?
        .mul(&label.ne(1.0)?)?
        .to_dtype(DType::F32)?
        .sum_all()?
        .to_scalar::<f32>()?;
    if bad > 0.0 {
        return Err(Error::Input(format!("{bad} label values outside {{0, 1}}")));
    }
    Ok(())
}

/// Mean over all pixels of `-(y log p + (1 - y) log(1 - p))`, with `p`
/// clamped to `[PROB_EPS, 1 - PROB_EPS]`. Returns a scalar tensor so the
/// result can be backpropagated.
pub fn bce_loss(prob: &Tensor, label: &Tensor) -> Result<Tensor> {
    if prob.dims() != label.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and label {:?} differ",
            prob.dims(),
            label.dims()
        )));
    }
    if prob.elem_count() == 0 {
        return Err(Error::Input("empty prediction".into()));
    }
    let label = label.to_dtype(prob.dtype())?;
    check_binary(&label)?;
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = (&label * p.log()?)?;
    let neg = (label.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Scalar loss tensor to optimise together with its components.
pub struct SupervisedLoss {
    pub total: Tensor,
    pub report: LossReport,
}

/// Main term on the softmax change probability of the two-class logits,
/// auxiliary term on the sigmoid of the guiding-map logits, both against the
/// same full-resolution label (`[B, H, W]` or `[B, 1, H, W]`).
pub fn total_loss(prediction: &ChangePrediction, label: &Tensor, aux_weight: f64) -> Result<SupervisedLoss> {
    if !(aux_weight >= 0.0) {
        return Err(Error::Config(format!("aux_weight must be >= 0, got {aux_weight}")));
    }
    let (b, _, h, w) = prediction.logits.dims4()?;
    let label = match label.rank() {
        3 => label.clone(),
        4 if label.dim(1)? == 1 => label.squeeze(1)?,
        _ => return Err(Error::Shape(format!("label must be [B,H,W], got {:?}", label.dims()))),
    };
    if label.dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "label {:?} does not match prediction resolution [{b}, {h}, {w}]",
            label.dims()
        )));
    }
    let main_t = bce_loss(&prediction.change_probability()?, &label)?;
    let aux_prob = candle_nn::ops::sigmoid(&prediction.aux_logits)?.squeeze(1)?;
    let aux_t = bce_loss(&aux_prob, &label)?;
    let total = if aux_weight == 0.0 { main_t.clone() } else { (&main_t + (&aux_t * aux_weight)?)? };
    let main = main_t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let aux = aux_t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(SupervisedLoss {
        total,
        report: LossReport { main, aux, total: main + aux_weight * aux, pixel_count: b * h * w },
    })
}
