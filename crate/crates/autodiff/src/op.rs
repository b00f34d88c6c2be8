//! Primitive operations: forward kernels and backward rules.
//!
//! Every backward rule is written in terms of other primitives applied to
//! [`Tensor`]s, so when the tape is recording during a backward pass the
//! gradients are themselves differentiable.

use std::sync::Arc;

use smallvec::SmallVec;

use crate::array::{numel, split_at_axis, NdArray, Shape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Axes = SmallVec<[usize; 4]>;

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    PowScalar(f64),
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    Clamp {
        lo: f64,
        hi: f64,
    },
    SmoothL1 {
        beta: f64,
    },
    Sum {
        axis: usize,
        keepdim: bool,
    },
    Expand {
        axis: usize,
        size: usize,
    },
    Max {
        axis: usize,
    },
    SoftmaxLast,
    LogSoftmaxLast,
    Matmul {
        ta: bool,
        tb: bool,
    },
    Reshape(Shape),
    Permute(Axes),
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    Pad {
        axis: usize,
        before: usize,
        after: usize,
    },
    Concat {
        axis: usize,
    },
    IndexSelect {
        ids: Arc<[usize]>,
    },
    IndexAdd {
        ids: Arc<[usize]>,
        rows: usize,
    },
    Pick {
        ids: Arc<[usize]>,
    },
    Scatter {
        ids: Arc<[usize]>,
        classes: usize,
    },
    MaskFill {
        mask: Arc<[bool]>,
        mask_shape: Shape,
        value: f64,
    },
    SetSuperdiag,
    Superdiag,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::PowScalar(_) => "pow",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Relu => "relu",
            Op::Clamp { .. } => "clamp",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Sum { .. } => "sum",
            Op::Expand { .. } => "expand",
            Op::Max { .. } => "max",
            Op::SoftmaxLast => "softmax",
            Op::LogSoftmaxLast => "log_softmax",
            Op::Matmul { .. } => "matmul",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Pad { .. } => "pad",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::IndexAdd { .. } => "index_add",
            Op::Pick { .. } => "pick",
            Op::Scatter { .. } => "scatter",
            Op::MaskFill { .. } => "mask_fill",
            Op::SetSuperdiag => "set_superdiag",
            Op::Superdiag => "superdiag",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Matmul { .. } | Op::SetSuperdiag => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Computes the output value from input values. Pure: the same inputs always
    /// give bit-identical output, which is what tape replay relies on.
    pub fn forward(&self, xs: &[&NdArray]) -> Result<NdArray> {
        if let Some(n) = self.arity() {
            if xs.len() != n {
                return Err(Error::InvalidAttr {
                    op: self.name(),
                    msg: format!("expected {n} inputs, got {}", xs.len()),
                });
            }
        }
        match self {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Add => binary(self.name(), xs[0], xs[1], |a, b| a + b),
            Op::Sub => binary(self.name(), xs[0], xs[1], |a, b| a - b),
            Op::Mul => binary(self.name(), xs[0], xs[1], |a, b| a * b),
            Op::Div => {
                if xs[1].data().contains(&0.0) {
                    return Err(Error::NonFiniteInput {
                        op: "div",
                        msg: "division by zero".into(),
                    });
                }
                binary(self.name(), xs[0], xs[1], |a, b| a / b)
            }
            Op::AddScalar(c) => Ok(xs[0].map(|x| x + c)),
            Op::MulScalar(c) => Ok(xs[0].map(|x| x * c)),
            Op::PowScalar(p) => {
                let p = *p;
                if p.fract() != 0.0 && xs[0].data().iter().any(|&x| x < 0.0) {
                    return Err(Error::NonFiniteInput {
                        op: "pow",
                        msg: format!("negative base with non-integer exponent {p}"),
                    });
                }
                if p < 0.0 && xs[0].data().contains(&0.0) {
                    return Err(Error::NonFiniteInput {
                        op: "pow",
                        msg: format!("zero base with negative exponent {p}"),
                    });
                }
                Ok(xs[0].map(|x| if p == 2.0 { x * x } else { x.powf(p) }))
            }
            Op::Exp => Ok(xs[0].map(f64::exp)),
            Op::Log => {
                if xs[0].data().iter().any(|&x| x <= 0.0 || x.is_nan()) {
                    return Err(Error::NonFiniteInput {
                        op: "log",
                        msg: "non-positive argument".into(),
                    });
                }
                Ok(xs[0].map(f64::ln))
            }
            Op::Sigmoid => Ok(xs[0].map(sigmoid)),
            Op::Softplus => Ok(xs[0].map(softplus)),
            Op::Relu => Ok(xs[0].map(|x| if x > 0.0 { x } else { 0.0 })),
            Op::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::InvalidAttr {
                        op: "clamp",
                        msg: format!("lo {lo} > hi {hi}"),
                    });
                }
                Ok(xs[0].map(|x| x.clamp(*lo, *hi)))
            }
            Op::SmoothL1 { beta } => {
                let beta = *beta;
                if beta <= 0.0 {
                    return Err(Error::InvalidAttr {
                        op: "smooth_l1",
                        msg: format!("beta must be positive, got {beta}"),
                    });
                }
                Ok(xs[0].map(|x| {
                    let a = x.abs();
                    if a < beta {
                        0.5 * x * x / beta
                    } else {
                        a - 0.5 * beta
                    }
                }))
            }
            Op::Sum { axis, keepdim } => sum_axis(xs[0], *axis, *keepdim),
            Op::Expand { axis, size } => expand(xs[0], *axis, *size),
            Op::Max { axis } => max_axis(xs[0], *axis).map(|(v, _)| v),
            Op::SoftmaxLast => softmax_last(xs[0], false),
            Op::LogSoftmaxLast => softmax_last(xs[0], true),
            Op::Matmul { ta, tb } => matmul(xs[0], xs[1], *ta, *tb),
            Op::Reshape(shape) => xs[0].reshape(shape),
            Op::Permute(perm) => permute(xs[0], perm),
            Op::Narrow { axis, start, len } => narrow(xs[0], *axis, *start, *len),
            Op::Pad {
                axis,
                before,
                after,
            } => pad(xs[0], *axis, *before, *after),
            Op::Concat { axis } => concat(xs, *axis),
            Op::IndexSelect { ids } => index_select(xs[0], ids),
            Op::IndexAdd { ids, rows } => index_add(xs[0], ids, *rows),
            Op::Pick { ids } => pick(xs[0], ids),
            Op::Scatter { ids, classes } => scatter(xs[0], ids, *classes),
            Op::MaskFill {
                mask,
                mask_shape,
                value,
            } => mask_fill(xs[0], mask, mask_shape, *value),
            Op::SetSuperdiag => set_superdiag(xs[0], xs[1]),
            Op::Superdiag => superdiag(xs[0]),
        }
    }

    /// Vector-Jacobian product for each input flagged in `needs`.
    pub(crate) fn backward(
        &self,
        inputs: &[Tensor],
        out: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs.first();
        let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
        match self {
            Op::Leaf => Ok(vec![]),
            Op::Add => Ok(vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.clone()),
            ]),
            Op::Sub => Ok(vec![
                needs[0].then(|| g.clone()),
                if needs[1] { Some(g.neg()?) } else { None },
            ]),
            Op::Mul => Ok(vec![
                if needs[0] {
                    Some(g.mul(&inputs[1])?)
                } else {
                    None
                },
                if needs[1] {
                    Some(g.mul(&inputs[0])?)
                } else {
                    None
                },
            ]),
            Op::Div => Ok(vec![
                if needs[0] {
                    Some(g.div(&inputs[1])?)
                } else {
                    None
                },
                if needs[1] {
                    Some(g.mul(out)?.div(&inputs[1])?.neg()?)
                } else {
                    None
                },
            ]),
            Op::AddScalar(_) => Ok(vec![Some(g.clone())]),
            Op::MulScalar(c) => one(g.mul_scalar(*c)),
            Op::PowScalar(p) => {
                let x = x.unwrap();
                let d = if *p == 2.0 {
                    x.mul_scalar(2.0)?
                } else if *p == 1.0 {
                    return Ok(vec![Some(g.clone())]);
                } else {
                    x.powf(p - 1.0)?.mul_scalar(*p)?
                };
                one(g.mul(&d))
            }
            Op::Exp => one(g.mul(out)),
            Op::Log => one(g.div(x.unwrap())),
            Op::Sigmoid => {
                // s * (1 - s)
                let d = out.mul(&out.neg()?.add_scalar(1.0)?)?;
                one(g.mul(&d))
            }
            Op::Softplus => one(g.mul(&x.unwrap().sigmoid()?)),
            Op::Relu => {
                let mask = x.unwrap().value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                one(g.mul(&Tensor::constant(mask)))
            }
            Op::Clamp { lo, hi } => {
                // boundary points pass the gradient through
                let mask = x
                    .unwrap()
                    .value()
                    .map(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                one(g.mul(&Tensor::constant(mask)))
            }
            Op::SmoothL1 { beta } => {
                let d = x.unwrap().mul_scalar(1.0 / beta)?.clamp(-1.0, 1.0)?;
                one(g.mul(&d))
            }
            Op::Sum { axis, keepdim } => {
                let in_shape = x.unwrap().shape().to_vec();
                let gk = if *keepdim {
                    g.clone()
                } else {
                    let mut s = in_shape.clone();
                    s[*axis] = 1;
                    g.reshape(&s)?
                };
                one(gk.expand(*axis, in_shape[*axis]))
            }
            Op::Expand { axis, .. } => one(g.sum_axis(*axis, true)),
            Op::Max { axis } => {
                let xv = x.unwrap().value();
                let (_, arg) = max_axis(xv, *axis)?;
                let (outer, n, inner) = split_at_axis(xv.shape(), *axis);
                let mut mask = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        mask[(o * n + arg[o * inner + i]) * inner + i] = 1.0;
                    }
                }
                let mut s = xv.shape().to_vec();
                s[*axis] = 1;
                let ge = g.reshape(&s)?.expand(*axis, n)?;
                let mask = NdArray::new(xv.shape(), mask)?;
                one(ge.mul(&Tensor::constant(mask)))
            }
            Op::SoftmaxLast => {
                // y * (g - sum(g * y))
                let last = out.rank() - 1;
                let n = out.shape()[last];
                let s = g.mul(out)?.sum_axis(last, true)?.expand(last, n)?;
                one(out.mul(&g.sub(&s)?))
            }
            Op::LogSoftmaxLast => {
                // g - softmax(x) * sum(g)
                let last = out.rank() - 1;
                let n = out.shape()[last];
                let p = out.exp()?;
                let s = g.sum_axis(last, true)?.expand(last, n)?;
                one(g.sub(&p.mul(&s)?))
            }
            Op::Matmul { ta, tb } => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let ga = if needs[0] {
                    Some(if *ta {
                        b.matmul_t(g, *tb, true)?
                    } else {
                        g.matmul_t(b, false, !*tb)?
                    })
                } else {
                    None
                };
                let gb = if needs[1] {
                    Some(if *tb {
                        g.matmul_t(a, true, *ta)?
                    } else {
                        a.matmul_t(g, !*ta, false)?
                    })
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            Op::Reshape(_) => one(g.reshape(x.unwrap().shape())),
            Op::Permute(perm) => {
                let mut inv: Axes = SmallVec::from_elem(0, perm.len());
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                one(g.permute(&inv))
            }
            Op::Narrow { axis, start, len } => {
                let n = x.unwrap().shape()[*axis];
                one(g.pad(*axis, *start, n - start - len))
            }
            Op::Pad { axis, before, .. } => {
                let n = x.unwrap().shape()[*axis];
                one(g.narrow(*axis, *before, n))
            }
            Op::Concat { axis } => {
                let mut start = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for (inp, &need) in inputs.iter().zip(needs) {
                    let len = inp.shape()[*axis];
                    res.push(if need {
                        Some(g.narrow(*axis, start, len)?)
                    } else {
                        None
                    });
                    start += len;
                }
                Ok(res)
            }
            Op::IndexSelect { ids } => {
                let rows = x.unwrap().shape()[0];
                one(g.apply1(Op::IndexAdd {
                    ids: ids.clone(),
                    rows,
                }))
            }
            Op::IndexAdd { ids, .. } => one(g.apply1(Op::IndexSelect { ids: ids.clone() })),
            Op::Pick { ids } => {
                let classes = x.unwrap().shape()[1];
                one(g.apply1(Op::Scatter {
                    ids: ids.clone(),
                    classes,
                }))
            }
            Op::Scatter { ids, .. } => one(g.apply1(Op::Pick { ids: ids.clone() })),
            Op::MaskFill {
                mask, mask_shape, ..
            } => one(g.apply1(Op::MaskFill {
                mask: mask.clone(),
                mask_shape: mask_shape.clone(),
                value: 0.0,
            })),
            Op::SetSuperdiag => {
                let gx = if needs[0] {
                    let zeros = Tensor::constant(NdArray::zeros(inputs[1].shape()));
                    Some(g.set_superdiag(&zeros)?)
                } else {
                    None
                };
                let gv = if needs[1] { Some(g.superdiag()?) } else { None };
                Ok(vec![gx, gv])
            }
            Op::Superdiag => {
                let zeros = Tensor::constant(NdArray::zeros(x.unwrap().shape()));
                one(zeros.set_superdiag(g))
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn binary(
    op: &'static str,
    a: &NdArray,
    b: &NdArray,
    f: impl Fn(f64, f64) -> f64,
) -> Result<NdArray> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(NdArray::from_parts(Shape::from_slice(a.shape()), data))
}

fn check_axis(op: &'static str, x: &NdArray, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::InvalidAttr {
            op,
            msg: format!("axis {axis} out of range for shape {:?}", x.shape()),
        });
    }
    Ok(())
}

fn sum_axis(x: &NdArray, axis: usize, keepdim: bool) -> Result<NdArray> {
    check_axis("sum", x, axis)?;
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (acc, v) in dst.iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let mut shape = Shape::from_slice(x.shape());
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(NdArray::from_parts(shape, out))
}

fn expand(x: &NdArray, axis: usize, size: usize) -> Result<NdArray> {
    check_axis("expand", x, axis)?;
    if x.shape()[axis] != 1 {
        return Err(Error::InvalidAttr {
            op: "expand",
            msg: format!("axis {axis} of {:?} is not a singleton", x.shape()),
        });
    }
    let (outer, _, inner) = split_at_axis(x.shape(), axis);
    let d = x.data();
    let mut out = Vec::with_capacity(outer * size * inner);
    for o in 0..outer {
        let src = &d[o * inner..(o + 1) * inner];
        for _ in 0..size {
            out.extend_from_slice(src);
        }
    }
    let mut shape = Shape::from_slice(x.shape());
    shape[axis] = size;
    Ok(NdArray::from_parts(shape, out))
}

fn max_axis(x: &NdArray, axis: usize) -> Result<(NdArray, Vec<usize>)> {
    check_axis("max", x, axis)?;
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    if n == 0 {
        return Err(Error::InvalidAttr {
            op: "max",
            msg: "empty axis".into(),
        });
    }
    let d = x.data();
    let mut vals = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                let v = d[(o * n + k) * inner + i];
                let j = o * inner + i;
                // first maximum wins on ties
                if v > vals[j] || k == 0 {
                    vals[j] = v;
                    arg[j] = k;
                }
            }
        }
    }
    let mut shape = Shape::from_slice(x.shape());
    shape.remove(axis);
    Ok((NdArray::from_parts(shape, vals), arg))
}

fn softmax_last(x: &NdArray, log: bool) -> Result<NdArray> {
    let op = if log { "log_softmax" } else { "softmax" };
    if x.rank() == 0 {
        return Err(Error::InvalidAttr {
            op,
            msg: "needs at least one axis".into(),
        });
    }
    let n = *x.shape().last().unwrap();
    let mut out = x.to_vec();
    for row in out.chunks_mut(n.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::NonFiniteInput {
                op,
                msg: "row with every entry masked".into(),
            });
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            let e = (*v - m).exp();
            z += e;
            if !log {
                *v = e;
            }
        }
        if log {
            let lz = m + z.ln();
            for v in row.iter_mut() {
                *v -= lz;
            }
        } else {
            for v in row.iter_mut() {
                *v /= z;
            }
        }
    }
    Ok(NdArray::from_parts(Shape::from_slice(x.shape()), out))
}

/// Batched matrix product over the last two axes. Leading axes must agree.
fn matmul(a: &NdArray, b: &NdArray, ta: bool, tb: bool) -> Result<NdArray> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || a.rank() != b.rank() {
        return Err(mismatch());
    }
    let r = a.rank();
    if a.shape()[..r - 2] != b.shape()[..r - 2] {
        return Err(mismatch());
    }
    let batch = numel(&a.shape()[..r - 2]);
    let (ar, ac) = (a.shape()[r - 2], a.shape()[r - 1]);
    let (br, bc) = (b.shape()[r - 2], b.shape()[r - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = vec![0.0; batch * m * n];
    // strides of the logical (untransposed) operands
    let (rsa, csa) = if ta {
        (1, ac as isize)
    } else {
        (ac as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, bc as isize)
    } else {
        (bc as isize, 1)
    };
    if m > 0 && n > 0 {
        for bi in 0..batch {
            let ap = &a.data()[bi * ar * ac..(bi + 1) * ar * ac];
            let bp = &b.data()[bi * br * bc..(bi + 1) * br * bc];
            let cp = &mut out[bi * m * n..(bi + 1) * m * n];
            // SAFETY: the slices cover exactly the index ranges the strides address.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    ap.as_ptr(),
                    rsa,
                    csa,
                    bp.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    cp.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
    let mut shape = Shape::from_slice(&a.shape()[..r - 2]);
    shape.push(m);
    shape.push(n);
    Ok(NdArray::from_parts(shape, out))
}

fn permute(x: &NdArray, perm: &[usize]) -> Result<NdArray> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r
        || perm
            .iter()
            .any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::InvalidAttr {
            op: "permute",
            msg: format!("{perm:?} is not a permutation of rank {r}"),
        });
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Shape = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let mut out = Vec::with_capacity(total);
    let d = x.data();
    let mut idx = vec![0usize; r];
    let last = r.saturating_sub(1);
    if r == 0 || total == 0 {
        return Ok(NdArray::from_parts(out_shape, d.to_vec()));
    }
    let inner = out_shape[last];
    let inner_stride = strides[last];
    let mut off = 0usize;
    while out.len() < total {
        for j in 0..inner {
            out.push(d[off + j * inner_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(NdArray::from_parts(out_shape, out))
}

fn narrow(x: &NdArray, axis: usize, start: usize, len: usize) -> Result<NdArray> {
    check_axis("narrow", x, axis)?;
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    if start + len > n {
        return Err(Error::InvalidAttr {
            op: "narrow",
            msg: format!("range {start}..{} exceeds axis length {n}", start + len),
        });
    }
    let d = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut shape = Shape::from_slice(x.shape());
    shape[axis] = len;
    Ok(NdArray::from_parts(shape, out))
}

fn pad(x: &NdArray, axis: usize, before: usize, after: usize) -> Result<NdArray> {
    check_axis("pad", x, axis)?;
    let (outer, n, inner) = split_at_axis(x.shape(), axis);
    let m = before + n + after;
    let d = x.data();
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        out[(o * m + before) * inner..(o * m + before + n) * inner]
            .copy_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
    }
    let mut shape = Shape::from_slice(x.shape());
    shape[axis] = m;
    Ok(NdArray::from_parts(shape, out))
}

fn concat(xs: &[&NdArray], axis: usize) -> Result<NdArray> {
    let first = xs.first().ok_or(Error::InvalidAttr {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    check_axis("concat", first, axis)?;
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.shape()[axis];
            out.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = Shape::from_slice(first.shape());
    shape[axis] = total;
    Ok(NdArray::from_parts(shape, out))
}

fn index_select(table: &NdArray, ids: &[usize]) -> Result<NdArray> {
    if table.rank() != 2 {
        return Err(Error::InvalidAttr {
            op: "index_select",
            msg: format!("table must be rank 2, got {:?}", table.shape()),
        });
    }
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * cols);
    for &id in ids {
        if id >= rows {
            return Err(Error::InvalidAttr {
                op: "index_select",
                msg: format!("row {id} out of range {rows}"),
            });
        }
        out.extend_from_slice(&table.data()[id * cols..(id + 1) * cols]);
    }
    Ok(NdArray::from_parts(
        Shape::from_slice(&[ids.len(), cols]),
        out,
    ))
}

fn index_add(g: &NdArray, ids: &[usize], rows: usize) -> Result<NdArray> {
    if g.rank() != 2 || g.shape()[0] != ids.len() {
        return Err(Error::InvalidAttr {
            op: "index_add",
            msg: format!("shape {:?} does not match {} ids", g.shape(), ids.len()),
        });
    }
    let cols = g.shape()[1];
    let mut out = vec![0.0; rows * cols];
    for (r, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(Error::InvalidAttr {
                op: "index_add",
                msg: format!("row {id} out of range {rows}"),
            });
        }
        for (o, v) in out[id * cols..(id + 1) * cols]
            .iter_mut()
            .zip(&g.data()[r * cols..(r + 1) * cols])
        {
            *o += v;
        }
    }
    Ok(NdArray::from_parts(Shape::from_slice(&[rows, cols]), out))
}

fn pick(x: &NdArray, ids: &[usize]) -> Result<NdArray> {
    if x.rank() != 2 || x.shape()[0] != ids.len() {
        return Err(Error::InvalidAttr {
            op: "pick",
            msg: format!("shape {:?} does not match {} ids", x.shape(), ids.len()),
        });
    }
    let c = x.shape()[1];
    let mut out = Vec::with_capacity(ids.len());
    for (r, &id) in ids.iter().enumerate() {
        if id >= c {
            return Err(Error::InvalidAttr {
                op: "pick",
                msg: format!("class {id} out of range {c}"),
            });
        }
        out.push(x.data()[r * c + id]);
    }
    Ok(NdArray::from_parts(Shape::from_slice(&[ids.len()]), out))
}

fn scatter(g: &NdArray, ids: &[usize], classes: usize) -> Result<NdArray> {
    if g.rank() != 1 || g.numel() != ids.len() {
        return Err(Error::InvalidAttr {
            op: "scatter",
            msg: format!("shape {:?} does not match {} ids", g.shape(), ids.len()),
        });
    }
    let mut out = vec![0.0; ids.len() * classes];
    for (r, &id) in ids.iter().enumerate() {
        if id >= classes {
            return Err(Error::InvalidAttr {
                op: "scatter",
                msg: format!("class {id} out of range {classes}"),
            });
        }
        out[r * classes + id] = g.data()[r];
    }
    Ok(NdArray::from_parts(
        Shape::from_slice(&[ids.len(), classes]),
        out,
    ))
}

/// Fills entries where `mask` is set. The mask shape must be a suffix of the
/// input shape and is repeated over the leading axes.
fn mask_fill(x: &NdArray, mask: &[bool], mask_shape: &[usize], value: f64) -> Result<NdArray> {
    let r = x.rank();
    if mask_shape.len() > r || x.shape()[r - mask_shape.len()..] != *mask_shape {
        return Err(Error::ShapeMismatch {
            op: "mask_fill",
            lhs: x.shape().to_vec(),
            rhs: mask_shape.to_vec(),
        });
    }
    let m = mask.len();
    let mut out = x.to_vec();
    for chunk in out.chunks_mut(m.max(1)) {
        for (v, &masked) in chunk.iter_mut().zip(mask) {
            if masked {
                *v = value;
            }
        }
    }
    Ok(NdArray::from_parts(Shape::from_slice(x.shape()), out))
}

fn superdiag_dims(op: &'static str, x: &NdArray) -> Result<(usize, usize)> {
    let r = x.rank();
    if r < 2 || x.shape()[r - 1] != x.shape()[r - 2] + 1 {
        return Err(Error::InvalidAttr {
            op,
            msg: format!("expected [.., T, T+1], got {:?}", x.shape()),
        });
    }
    Ok((numel(&x.shape()[..r - 2]), x.shape()[r - 2]))
}

/// Copies `x` ([.., T, T+1]) replacing entry (i, i+1) of every matrix with `v[.., i]`.
fn set_superdiag(x: &NdArray, v: &NdArray) -> Result<NdArray> {
    let (batch, t) = superdiag_dims("set_superdiag", x)?;
    let r = x.rank();
    if v.shape() != &x.shape()[..r - 1] {
        return Err(Error::ShapeMismatch {
            op: "set_superdiag",
            lhs: x.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let mut out = x.to_vec();
    for b in 0..batch {
        for i in 0..t {
            out[b * t * (t + 1) + i * (t + 1) + i + 1] = v.data()[b * t + i];
        }
    }
    Ok(NdArray::from_parts(Shape::from_slice(x.shape()), out))
}

fn superdiag(x: &NdArray) -> Result<NdArray> {
    let (batch, t) = superdiag_dims("superdiag", x)?;
    let mut out = Vec::with_capacity(batch * t);
    for b in 0..batch {
        for i in 0..t {
            out.push(x.data()[b * t * (t + 1) + i * (t + 1) + i + 1]);
        }
    }
    Ok(NdArray::from_parts(
        Shape::from_slice(&x.shape()[..x.rank() - 1]),
        out,
    ))
}
