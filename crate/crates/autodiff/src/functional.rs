//! Composite functions built from primitives. Their gradients (of any order)
//! come from the primitives they are made of.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `x / sqrt(mean(x^2, last) + eps)` along the last axis.
pub fn rms_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let last = x.rank() - 1;
    let inv = x
        .square()?
        .mean_axis(last, true)?
        .add_scalar(eps)?
        .powf(-0.5)?;
    x.mul(&inv)
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    x.mul(&x.sigmoid()?)
}

/// Cosine similarity along the last axis (reduced away). Zero-norm rows are
/// rejected.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let last = a.rank() - 1;
    let na = a.square()?.sum_axis(last, false)?;
    let nb = b.square()?.sum_axis(last, false)?;
    if na
        .value()
        .data()
        .iter()
        .chain(nb.value().data())
        .any(|&v| v == 0.0)
    {
        return Err(Error::NonFiniteInput {
            op: "cosine_similarity",
            msg: "zero-norm vector".into(),
        });
    }
    let dot = a.mul(b)?.sum_axis(last, false)?;
    dot.div(&na.mul(&nb)?.sqrt()?)
}

/// `log(sum(exp(x)))` along the last axis (reduced away).
pub fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let m = x.max_axis(last)?.detach();
    let shape = x.shape().to_vec();
    let mut ks = shape.clone();
    ks[last] = 1;
    let mb = m.reshape(&ks)?.expand(last, shape[last])?;
    x.sub(&mb)?.exp()?.sum_axis(last, false)?.log()?.add(&m)
}
