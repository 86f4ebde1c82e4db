//! Change Guide Module: multi-head self-attention whose queries and keys are
//! computed from features re-weighted by the change guiding map.
//!
//! Dataflow for an input `F` and guiding logits `g` at the same resolution:
//!
//! ```text
//! W      = sigmoid(g)                      weight map in (0, 1)
//! G      = W * conv(F)                     guided features
//! Q, K   = tokens(G) W_Q, tokens(G) W_K    per-head [L, d_k]
//! V      = tokens(F) W_V                   per-head [L, d_v]
//! A_i    = softmax(Q_i K_i^T / sqrt(d_k))
//! H_i    = A_i V_i
//! out    = conv(merge(H)) + F
//! ```

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Module, Shape, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::conv::Conv;
use crate::{Error, Result};

/// Token cap covering a 128x128 map, the largest resolution a guide module
/// sees for 256x256 inputs.
pub const DEFAULT_TOKEN_CAP: usize = 16_384;

/// Query rows processed per attention block. Rows are independent, so the
/// split does not change results.
const QUERY_CHUNK: usize = 1024;

/// Upper bound on attention scores materialised at once.
const BLOCK_ELEMENTS: usize = 1 << 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    /// Per-head query/key width; also the softmax temperature `sqrt(d_k)`.
    pub key_dim: usize,
    pub value_dim: usize,
}

impl AttentionConfig {
    /// Four heads with `C/4` key and value channels each.
    pub fn for_channels(channels: usize) -> Self {
        let num_heads = 4;
        let per_head = (channels / num_heads).max(1);
        Self { num_heads, key_dim: per_head, value_dim: per_head }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.key_dim == 0 || self.value_dim == 0 {
            return Err(Error::Config(format!(
                "attention needs heads, key_dim and value_dim >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn query_channels(&self) -> usize {
        self.num_heads * self.key_dim
    }

    pub fn value_channels(&self) -> usize {
        self.num_heads * self.value_dim
    }
}

fn any_nan(t: &Tensor) -> Result<bool> {
    // NaN != NaN
    let n = t.ne(t)?.to_dtype(candle_core::DType::F32)?.sum_all()?.to_scalar::<f32>()?;
    Ok(n > 0.0)
}

/// Elementwise logistic sigmoid of the guiding logits.
pub fn compute_weight_map(guide_logits: &Tensor) -> Result<Tensor> {
    if any_nan(guide_logits)? {
        return Err(Error::Numeric("guiding map contains NaN".into()));
    }
    Ok(candle_nn::ops::sigmoid(guide_logits)?)
}

macro_rules! row_kernels {
    ($fwd:ident, $bwd:ident, $t:ty) => {
        fn $fwd(x: &[$t], n: usize) -> Vec<$t> {
            let mut out = vec![0 as $t; x.len()];
            for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                let max = row.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
                let mut sum = 0 as $t;
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - max).exp();
                    sum += *d;
                }
                let inv = 1 as $t / sum;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            out
        }

        fn $bwd(y: &[$t], g: &[$t], n: usize) -> Vec<$t> {
            let mut out = vec![0 as $t; y.len()];
            for ((yr, gr), dst) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
                let dot: $t = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &a), &b) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = a * (b - dot);
                }
            }
            out
        }
    };
}

row_kernels!(softmax_f32, softmax_grad_f32, f32);
row_kernels!(softmax_f64, softmax_grad_f64, f64);

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("row softmax needs a contiguous operand".into()))?;
    Ok(&v[a..b])
}

fn row_len(l: &Layout) -> usize {
    l.dims().last().copied().unwrap_or(1).max(1)
}

struct RowSoftmax;

impl CustomOp1 for RowSoftmax {
    fn name(&self) -> &'static str {
        "row-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = row_len(l);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_f32(contiguous(v, l)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_f64(contiguous(v, l)?, n)),
            _ => return Err(candle_core::Error::Msg("row softmax supports f32 and f64 only".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.to_dtype(res.dtype())?.contiguous()?;
        Ok(Some(res.detach().contiguous()?.apply_op2_no_bwd(&grad, &RowSoftmaxGrad)?))
    }
}

struct RowSoftmaxGrad;

impl CustomOp2 for RowSoftmaxGrad {
    fn name(&self) -> &'static str {
        "row-softmax-grad"
    }

    fn cpu_fwd(&self, y: &CpuStorage, ly: &Layout, g: &CpuStorage, lg: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = row_len(ly);
        let out = match (y, g) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(softmax_grad_f32(contiguous(y, ly)?, contiguous(g, lg)?, n)),
            (CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(softmax_grad_f64(contiguous(y, ly)?, contiguous(g, lg)?, n)),
            _ => return Err(candle_core::Error::Msg("row softmax gradient dtype mismatch".into())),
        };
        Ok((out, ly.shape().clone()))
    }
}

/// Softmax over the last axis with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(RowSoftmax)?)
}

fn spatial(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    t.dims4()
        .map_err(|_| Error::Shape(format!("{what} must be [B,C,H,W], got {:?}", t.dims())))
}

/// `W ⊙ conv(F)`, with the one-channel weight map broadcast over channels.
pub fn guide_features(features: &Tensor, weight_map: &Tensor, projection: &Conv) -> Result<Tensor> {
    let (b, _, h, w) = spatial(features, "features")?;
    let (wb, wc, wh, ww) = spatial(weight_map, "weight map")?;
    if (wb, wc, wh, ww) != (b, 1, h, w) {
        return Err(Error::Shape(format!(
            "weight map {:?} does not match features {:?}",
            weight_map.dims(),
            features.dims()
        )));
    }
    Ok(projection.forward(features)?.broadcast_mul(weight_map)?)
}

/// `[B, C, H, W]` -> `[B, H*W, C]`, tokens in row-major pixel order.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// `[B, L, N*d]` -> `[B, N, L, d]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, c) = x.dims3()?;
    if c % heads != 0 {
        return Err(Error::Config(format!("{c} channels do not split into {heads} heads")));
    }
    Ok(x.reshape((b, l, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

/// `[B, N, L, d]` -> `[B, N*d, H, W]`; channel index is `head * d + j`.
pub fn merge_heads(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, n, l, d) = x.dims4()?;
    if l != height * width {
        return Err(Error::Shape(format!("{l} tokens cannot fill a {height}x{width} map")));
    }
    Ok(x.transpose(1, 2)?
        .reshape((b, l, n * d))?
        .transpose(1, 2)?
        .reshape((b, n * d, height, width))?)
}

fn project(tokens: &Tensor, weight: &Tensor, heads: usize, name: &str) -> Result<Tensor> {
    let (b, l, c) = tokens.dims3()?;
    let (out, inp) = weight
        .dims2()
        .map_err(|_| Error::Config(format!("{name} must be a [out, in] matrix")))?;
    if inp != c {
        return Err(Error::Config(format!("{name} expects {inp} input channels, tokens carry {c}")));
    }
    let y = tokens.reshape((b * l, c))?.matmul(&weight.t()?)?.reshape((b, l, out))?;
    split_heads(&y, heads)
}

/// Linear projections: `Q`, `K` from the guided tokens, `V` from the input
/// tokens. Weights are `[out, in]`; results are `[B, N_h, L, d]`.
pub fn project_qkv(
    guided: &Tensor,
    features: &Tensor,
    cfg: &AttentionConfig,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    cfg.validate()?;
    let (gb, _, gh, gw) = spatial(guided, "guided features")?;
    let (fb, _, fh, fw) = spatial(features, "features")?;
    if (gb, gh, gw) != (fb, fh, fw) {
        return Err(Error::Shape("guided and input features differ in batch or size".into()));
    }
    for (w, expect, name) in [
        (w_q, cfg.query_channels(), "W_Q"),
        (w_k, cfg.query_channels(), "W_K"),
        (w_v, cfg.value_channels(), "W_V"),
    ] {
        if w.dims().first() != Some(&expect) {
            return Err(Error::Config(format!(
                "{name} has {:?} rows, config needs {expect}",
                w.dims().first()
            )));
        }
    }
    let g = to_tokens(guided)?;
    let f = to_tokens(features)?;
    Ok((
        project(&g, w_q, cfg.num_heads, "W_Q")?,
        project(&g, w_k, cfg.num_heads, "W_K")?,
        project(&f, w_v, cfg.num_heads, "W_V")?,
    ))
}

/// Row-stochastic attention `softmax(Q K^T / sqrt(d_k))` over `[..., L, d_k]` inputs.
pub fn attention_map(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let key_dim = *q.dims().last().ok_or_else(|| Error::Shape("scalar query".into()))?;
    if key_dim == 0 {
        return Err(Error::Config("key dimension d_k must be positive".into()));
    }
    if q.rank() < 2 || q.rank() != k.rank() || k.dims().last() != Some(&key_dim) {
        return Err(Error::Shape(format!(
            "query {:?} and key {:?} disagree on d_k or rank",
            q.dims(),
            k.dims()
        )));
    }
    let r = q.rank();
    let q = (q * (1.0 / (key_dim as f64).sqrt()))?;
    softmax_rows(&q.contiguous()?.matmul(&k.transpose(r - 2, r - 1)?.contiguous()?)?)
}

/// `H_i = A_i V_i` per head.
pub fn attend(attention: &Tensor, values: &Tensor) -> Result<Tensor> {
    let (ad, vd) = (attention.dims(), values.dims());
    let r = ad.len();
    if r < 2 || vd.len() != r || ad[r - 1] != vd[r - 2] || ad[..r - 2] != vd[..r - 2] {
        return Err(Error::Shape(format!("attention {ad:?} cannot weight values {vd:?}")));
    }
    Ok(attention.contiguous()?.matmul(&values.contiguous()?)?)
}

/// Every intermediate of one guide-module pass, for inspection and tests.
#[derive(Debug, Clone)]
pub struct GuidedAttentionState {
    pub weight_map: Tensor,
    pub guided: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attention: Tensor,
    pub attended: Tensor,
    pub output: Tensor,
}

pub struct ChangeGuideModule {
    cfg: AttentionConfig,
    channels: usize,
    token_cap: usize,
    guide: Conv,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    out: Conv,
}

impl ChangeGuideModule {
    pub fn new(channels: usize, cfg: AttentionConfig, token_cap: usize, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let guide = Conv::new(channels, channels, 1, vb.pp("guide"))?;
        let init = candle_nn::init::DEFAULT_KAIMING_NORMAL;
        let w_q = vb.get_with_hints((cfg.query_channels(), channels), "w_q", init)?;
        let w_k = vb.get_with_hints((cfg.query_channels(), channels), "w_k", init)?;
        let w_v = vb.get_with_hints((cfg.value_channels(), channels), "w_v", init)?;
        let out = Conv::new(cfg.value_channels(), channels, 1, vb.pp("out"))?;
        Ok(Self { cfg, channels, token_cap, guide, w_q, w_k, w_v, out })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn check(&self, features: &Tensor, guide_logits: &Tensor) -> Result<(usize, usize)> {
        let (b, c, h, w) = spatial(features, "features")?;
        if c != self.channels {
            return Err(Error::Config(format!(
                "guide module built for {} channels, got {c}",
                self.channels
            )));
        }
        let g = spatial(guide_logits, "guiding map")?;
        if g != (b, 1, h, w) {
            return Err(Error::Shape(format!(
                "guiding map {:?} must be [{b}, 1, {h}, {w}]",
                guide_logits.dims()
            )));
        }
        if h * w > self.token_cap {
            return Err(Error::Resource(format!(
                "{h}x{w} map gives {} attention tokens, cap is {}; pool the features or lower the input resolution",
                h * w,
                self.token_cap
            )));
        }
        Ok((h, w))
    }

    /// Output has the shape of `features`. With `train == false` each block of
    /// attention rows is detached once consumed, which bounds memory at large
    /// token counts but stops gradients through the attention path.
    pub fn forward(&self, features: &Tensor, guide_logits: &Tensor, train: bool) -> Result<Tensor> {
        let (h, w) = self.check(features, guide_logits)?;
        let weight_map = compute_weight_map(guide_logits)?;
        let guided = guide_features(features, &weight_map, &self.guide)?;
        let (q, k, v) = project_qkv(&guided, features, &self.cfg, &self.w_q, &self.w_k, &self.w_v)?;
        let tokens = h * w;
        let rows = (BLOCK_ELEMENTS / (q.dims()[0] * self.cfg.num_heads * tokens)).clamp(1, QUERY_CHUNK);
        let attended = if tokens <= rows {
            attend(&attention_map(&q, &k)?, &v)?
        } else {
            let mut blocks = Vec::with_capacity(tokens.div_ceil(rows));
            for start in (0..tokens).step_by(rows) {
                let len = rows.min(tokens - start);
                let a = attention_map(&q.narrow(2, start, len)?, &k)?;
                let block = attend(&a, &v)?;
                blocks.push(if train { block } else { block.detach() });
            }
            Tensor::cat(&blocks, 2)?
        };
        let merged = merge_heads(&attended, h, w)?;
        Ok((self.out.forward(&merged)? + features)?)
    }

    /// Unchunked pass that keeps every intermediate.
    pub fn trace(&self, features: &Tensor, guide_logits: &Tensor) -> Result<GuidedAttentionState> {
        let (h, w) = self.check(features, guide_logits)?;
        let weight_map = compute_weight_map(guide_logits)?;
        let guided = guide_features(features, &weight_map, &self.guide)?;
        let (q, k, v) = project_qkv(&guided, features, &self.cfg, &self.w_q, &self.w_k, &self.w_v)?;
        let attention = attention_map(&q, &k)?;
        let attended = attend(&attention, &v)?;
        let output = (self.out.forward(&merge_heads(&attended, h, w)?)? + features)?;
        Ok(GuidedAttentionState { weight_map, guided, q, k, v, attention, attended, output })
    }
}
