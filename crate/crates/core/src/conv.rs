//! Square stride-1 "same" convolutions whose backward pass is itself a
//! forward convolution (input gradient) and a batched matrix product
//! (kernel gradient).

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Module, Shape, Tensor};
use candle_nn::{Init, VarBuilder};

use crate::{Error, Result};

fn storage_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("convolution operand must be contiguous".into()))?;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        _ => Err(candle_core::Error::Msg("conv2d-same supports f32 and f64 only".into())),
    }
}

fn into_storage(t: &Tensor) -> candle_core::Result<(CpuStorage, Shape)> {
    let flat = t.flatten_all()?;
    let storage = match t.dtype() {
        DType::F64 => CpuStorage::F64(flat.to_vec1()?),
        _ => CpuStorage::F32(flat.to_dtype(DType::F32)?.to_vec1()?),
    };
    Ok((storage, t.shape().clone()))
}

/// Columns `[B, C * k * k, H * W]` ordered like the flattened kernel.
fn columns(x: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if k == 1 {
        return x.reshape((b, c, h * w));
    }
    let p = k / 2;
    let padded = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
    let mut shifts = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            shifts.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    Tensor::stack(&shifts, 2)?.reshape((b, c * k * k, h * w))
}

struct SameConv;

impl CustomOp2 for SameConv {
    fn name(&self) -> &'static str {
        "conv2d-same"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = storage_tensor(s1, l1)?;
        let w = storage_tensor(s2, l2)?;
        let k = w.dim(2)?;
        into_storage(&x.conv2d(&w, k / 2, 1, 1, 1)?)
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (x, w, grad) = (x.detach(), w.detach(), grad.detach().contiguous()?);
        let (o, c, k, _) = w.dims4()?;
        let (b, _, h, wd) = x.dims4()?;
        let rev = Tensor::new((0..k as u32).rev().collect::<Vec<_>>(), &Device::Cpu)?;
        let flipped = w.index_select(&rev, 2)?.index_select(&rev, 3)?.transpose(0, 1)?.contiguous()?;
        let grad_x = grad.conv2d(&flipped, k / 2, 1, 1, 1)?;
        let cols = columns(&x, k)?;
        let grad_w = grad
            .reshape((b, o, h * wd))?
            .matmul(&cols.transpose(1, 2)?)?
            .sum(0)?
            .reshape((o, c, k, k))?;
        Ok((Some(grad_x), Some(grad_w)))
    }
}

/// `kernel x kernel` convolution with `kernel / 2` zero padding and a bias.
/// Variables are `weight` `[O, C, k, k]` and `bias` `[O]`.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl Conv {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, vb: VarBuilder) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {kernel}")));
        }
        let weight = vb.get_with_hints(
            (out_channels, in_channels, kernel, kernel),
            "weight",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        let bias = vb.get_with_hints(out_channels, "bias", Init::Const(0.0))?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let (o, c, _, _) = self.weight.dims4()?;
        let y = if self.kernel == 1 {
            self.weight.reshape((o, c))?.broadcast_matmul(&x.reshape((b, c, h * w))?)?.reshape((b, o, h, w))?
        } else {
            x.contiguous()?.apply_op2(&self.weight.contiguous()?, SameConv)?
        };
        y.broadcast_add(&self.bias.reshape((1, o, 1, 1))?)
    }
}
