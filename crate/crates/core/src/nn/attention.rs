//! Masked multi-head attention.

use std::sync::Arc;

use ebwm_autodiff::Tensor;

use super::rotary::Rotary;
use crate::error::Result;

/// `[B, T, d]` -> `[B, H, T, d / H]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Ok(x.reshape(&[b, t, heads, d / heads])?
        .permute(&[0, 2, 1, 3])?)
}

/// `[B, H, T, hd]` -> `[B, T, H * hd]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, hd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    Ok(x.permute(&[0, 2, 1, 3])?.reshape(&[b, t, h * hd])?)
}

/// `x [.., d_in] · w [d_in, d_out]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut shape = x.shape().to_vec();
    let d_in = shape.pop().unwrap_or(0);
    let rows = x.numel() / d_in.max(1);
    let y = x.reshape(&[rows, d_in])?.matmul(w)?;
    shape.push(w.shape()[1]);
    Ok(y.reshape(&shape)?)
}

/// `[T, T]` mask, true above the diagonal.
pub fn causal_mask(t: usize) -> Arc<[bool]> {
    (0..t * t).map(|i| i % t > i / t).collect()
}

/// Projected, rotated heads of one stream.
pub struct Heads {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

/// Q/K/V heads of normed input `x [B, T, d]` with rotary phases applied to Q and K.
pub fn project_heads(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    heads: usize,
    rotary: &Rotary,
) -> Result<Heads> {
    Ok(Heads {
        q: rotary.apply(&split_heads(&linear(x, wq)?, heads)?)?,
        k: rotary.apply(&split_heads(&linear(x, wk)?, heads)?)?,
        v: split_heads(&linear(x, wv)?, heads)?,
    })
}

/// Causal softmax attention over heads `[B, H, T, hd]`. Returns the per-head
/// output and the attention probabilities `[B, H, T, T]`.
pub fn causal_attend(h: &Heads) -> Result<(Tensor, Tensor)> {
    let t = h.q.shape()[2];
    let scale = 1.0 / (h.q.shape()[3] as f64).sqrt();
    let scores = h.q.matmul_t(&h.k, false, true)?.mul_scalar(scale)?;
    let probs = scores
        .mask_fill(causal_mask(t), &[t, t], f64::NEG_INFINITY)?
        .softmax_last()?;
    Ok((probs.matmul(&h.v)?, probs))
}
