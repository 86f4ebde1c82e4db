//! Bilinear resampling expressed as two dense interpolation matrices, so the
//! operation is differentiable through ordinary matmuls.

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

/// Row `o` holds the weights of output position `o` over the input axis.
/// Half-pixel centres, edges clamped. Every row sums to one.
pub fn interpolation_weights(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; input * output];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m[o * input + lo] += 1.0 - frac;
        m[o * input + hi] += frac;
    }
    m
}

fn weight_tensor(input: usize, output: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let w = interpolation_weights(input, output);
    Ok(Tensor::from_vec(w, (output, input), device)?.to_dtype(dtype)?)
}

/// Resize a `[B, C, H, W]` tensor to `[B, C, out_h, out_w]`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4().map_err(|_| {
        Error::Shape(format!("bilinear resize expects [B,C,H,W], got {:?}", x.dims()))
    })?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape("cannot resample an empty spatial grid".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dtype = x.dtype();
    let device = x.device();
    // width pass: [B*C*H, W] x [W, W']
    let mw = weight_tensor(w, out_w, dtype, device)?.t()?;
    let x = x
        .contiguous()?
        .reshape((b * c * h, w))?
        .matmul(&mw)?
        .reshape((b, c, h, out_w))?;
    // height pass on the transposed layout: [B*C*W', H] x [H, H']
    let mh = weight_tensor(h, out_h, dtype, device)?.t()?;
    let x = x
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&mh)?
        .reshape((b, c, out_w, out_h))?
        .transpose(2, 3)?
        .contiguous()?;
    Ok(x)
}
