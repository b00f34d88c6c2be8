//! Rotary position embedding on interleaved feature pairs `(2k, 2k + 1)`.

use ebwm_autodiff::{Error as TensorError, NdArray, Tensor};

use crate::error::Result;

pub const ROTARY_BASE: f64 = 10_000.0;

/// Per-position rotation tables for one head width.
#[derive(Clone, Debug)]
pub struct Rotary {
    cos: Tensor,
    sin: Tensor,
    /// Constant pair swap: `(x R)[2k] = -x[2k+1]`, `(x R)[2k+1] = x[2k]`.
    swap: Tensor,
    head_dim: usize,
}

impl Rotary {
    pub fn new(head_dim: usize, positions: &[usize]) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(TensorError::InvalidAttr {
                op: "rotary",
                msg: format!("last axis must be even, got {head_dim}"),
            }
            .into());
        }
        let t = positions.len();
        let angle = |i: usize| {
            let (p, c) = (positions[i / head_dim], i % head_dim);
            let k = (c / 2) as f64;
            p as f64 * ROTARY_BASE.powf(-2.0 * k / head_dim as f64)
        };
        let cos = NdArray::from_fn(&[t, head_dim], |i| angle(i).cos());
        let sin = NdArray::from_fn(&[t, head_dim], |i| angle(i).sin());
        let swap = NdArray::from_fn(&[head_dim, head_dim], |i| {
            let (r, c) = (i / head_dim, i % head_dim);
            if r % 2 == 0 && c == r + 1 {
                1.0
            } else if r % 2 == 1 && c + 1 == r {
                -1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            cos: Tensor::constant(cos),
            sin: Tensor::constant(sin),
            swap: Tensor::constant(swap),
            head_dim,
        })
    }

    /// Rotates `x` of shape `[.., T, head_dim]`, row `t` by position `positions[t]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let last = *shape.last().unwrap_or(&0);
        if last != self.head_dim || shape.len() < 2 || shape[shape.len() - 2] != self.cos.shape()[0]
        {
            return Err(TensorError::ShapeMismatch {
                op: "rotary",
                lhs: shape,
                rhs: self.cos.shape().to_vec(),
            }
            .into());
        }
        let rows = x.numel() / last;
        let swapped = x
            .reshape(&[rows, last])?
            .matmul(&self.swap)?
            .reshape(&shape)?;
        Ok(x.mul(&self.cos)?.add(&swapped.mul(&self.sin)?)?)
    }
}

/// Rotates the last axis of `x` (shape `[.., T, D]`) by `positions`.
pub fn rotary_positions(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let d = *x.shape().last().unwrap_or(&0);
    Rotary::new(d, positions)?.apply(x)
}
