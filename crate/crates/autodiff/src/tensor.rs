//! Tape-tracked tensors and the reverse pass.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use smallvec::SmallVec;

use crate::array::{numel, NdArray, Shape};
use crate::error::{Error, Result};
use crate::op::{Axes, Op};

#[derive(Clone, Debug)]
pub(crate) enum Input {
    Node(usize),
    Const(NdArray),
}

#[derive(Clone, Debug)]
struct Entry {
    op: Op,
    inputs: SmallVec<[Input; 2]>,
    value: NdArray,
}

#[derive(Debug)]
struct TapeInner {
    entries: Vec<Entry>,
    recording: bool,
}

/// An append-only record of primitive applications.
///
/// Entries are stored in creation order, so every entry's inputs precede it.
/// A tape is single-threaded; use one tape per training step or per worker.
#[derive(Clone, Debug)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            entries: Vec::new(),
            recording: true,
        })))
    }

    /// Registers `value` as a differentiable leaf.
    pub fn leaf(&self, value: NdArray) -> Tensor {
        let id = self.push(Entry {
            op: Op::Leaf,
            inputs: SmallVec::new(),
            value: value.clone(),
        });
        Tensor {
            value,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.0.borrow().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.0.borrow().recording
    }

    /// Stops recording until the returned guard is dropped. Operations on
    /// tracked tensors then produce untracked constants.
    pub fn pause(&self) -> PauseGuard {
        let prev = std::mem::replace(&mut self.0.borrow_mut().recording, false);
        PauseGuard {
            tape: self.clone(),
            prev,
        }
    }

    fn push(&self, e: Entry) -> usize {
        let mut inner = self.0.borrow_mut();
        inner.entries.push(e);
        inner.entries.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn tensor_at(&self, id: usize) -> Tensor {
        let value = self.0.borrow().entries[id].value.clone();
        Tensor {
            value,
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Recomputes every entry from the recorded leaves and constants.
    pub fn replay(&self) -> Result<Vec<NdArray>> {
        let entries = self.0.borrow().entries.clone();
        let mut values: Vec<NdArray> = Vec::with_capacity(entries.len());
        for e in &entries {
            let v = match e.op {
                Op::Leaf => e.value.clone(),
                _ => {
                    let xs: Vec<&NdArray> = e
                        .inputs
                        .iter()
                        .map(|i| match i {
                            Input::Node(j) => &values[*j],
                            Input::Const(c) => c,
                        })
                        .collect();
                    e.op.forward(&xs)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Replays the tape and checks every value is bit-identical to the recording.
    pub fn verify_replay(&self) -> Result<()> {
        let replayed = self.replay()?;
        let inner = self.0.borrow();
        for (i, (e, v)) in inner.entries.iter().zip(&replayed).enumerate() {
            if !e.value.bit_eq(v) {
                return Err(Error::ReplayMismatch(i));
            }
        }
        Ok(())
    }
}

pub struct PauseGuard {
    tape: Tape,
    prev: bool,
}

impl Drop for PauseGuard {
    fn drop(&mut self) {
        self.tape.0.borrow_mut().recording = self.prev;
    }
}

#[derive(Clone, Debug)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// A value plus an optional link into a [`Tape`].
#[derive(Clone, Debug)]
pub struct Tensor {
    value: NdArray,
    node: Option<NodeRef>,
}

impl From<NdArray> for Tensor {
    fn from(value: NdArray) -> Self {
        Tensor::constant(value)
    }
}

/// Applies a primitive, recording it when any input is tracked and its tape is
/// recording.
pub fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let values: Vec<&NdArray> = inputs.iter().map(|t| &t.value).collect();
    let value = op.forward(&values)?;
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match tape {
                None => tape = Some(&n.tape),
                Some(tp) if !tp.same(&n.tape) => return Err(Error::TapeMismatch),
                _ => {}
            }
        }
    }
    let Some(tape) = tape.filter(|t| t.is_recording()) else {
        return Ok(Tensor { value, node: None });
    };
    let ins = inputs
        .iter()
        .map(|t| match &t.node {
            Some(n) => Input::Node(n.id),
            None => Input::Const(t.value.clone()),
        })
        .collect();
    let id = tape.push(Entry {
        op,
        inputs: ins,
        value: value.clone(),
    });
    Ok(Tensor {
        value,
        node: Some(NodeRef {
            tape: tape.clone(),
            id,
        }),
    })
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the backward pass is itself recorded, so the returned
/// gradients can be differentiated again. Without it they are constants.
/// Tensors that `output` does not depend on get zero gradients.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.value.numel() != 1 {
        return Err(Error::OutputNotScalar(output.shape().to_vec()));
    }
    let out_node = output.node.as_ref().ok_or(Error::NotOnTape)?;
    let tape = out_node.tape.clone();
    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for w in wrt {
        match &w.node {
            Some(n) if n.tape.same(&tape) => wrt_ids.push(n.id),
            _ => return Err(Error::NotOnTape),
        }
    }
    let out_id = out_node.id;

    // Nodes downstream of some wrt tensor; only these need adjoints.
    let mut dep = vec![false; out_id + 1];
    let mut is_wrt = vec![false; out_id + 1];
    for &w in &wrt_ids {
        if w <= out_id {
            dep[w] = true;
            is_wrt[w] = true;
        }
    }
    {
        let inner = tape.0.borrow();
        for id in 0..=out_id {
            if dep[id] {
                continue;
            }
            dep[id] = inner.entries[id].inputs.iter().any(|i| match i {
                Input::Node(j) => dep[*j],
                Input::Const(_) => false,
            });
        }
    }

    let _guard = if create_graph {
        None
    } else {
        Some(tape.pause())
    };
    let mut adj: Vec<Option<Tensor>> = vec![None; out_id + 1];
    adj[out_id] = Some(Tensor::constant(NdArray::ones(output.shape())));
    let mut found: Vec<Option<Tensor>> = vec![None; out_id + 1];

    for id in (0..=out_id).rev() {
        if !dep[id] {
            continue;
        }
        let Some(g) = adj[id].take() else { continue };
        if is_wrt[id] {
            found[id] = Some(g.clone());
        }
        let entry = tape.0.borrow().entries[id].clone();
        if matches!(entry.op, Op::Leaf) {
            continue;
        }
        let needs: Vec<bool> = entry
            .inputs
            .iter()
            .map(|i| matches!(i, Input::Node(j) if dep[*j]))
            .collect();
        let inputs: Vec<Tensor> = entry
            .inputs
            .iter()
            .map(|i| match i {
                Input::Node(j) => tape.tensor_at(*j),
                Input::Const(c) => Tensor::constant(c.clone()),
            })
            .collect();
        let out = tape.tensor_at(id);
        let grads = entry.op.backward(&inputs, &out, &g, &needs)?;
        for ((inp, need), gi) in entry.inputs.iter().zip(&needs).zip(grads) {
            let (Input::Node(j), true, Some(gi)) = (inp, *need, gi) else {
                continue;
            };
            adj[*j] = Some(match adj[*j].take() {
                Some(acc) => acc.add(&gi)?,
                None => gi,
            });
        }
    }

    Ok(wrt
        .iter()
        .zip(&wrt_ids)
        .map(|(w, &id)| {
            found
                .get(id)
                .cloned()
                .flatten()
                .unwrap_or_else(|| Tensor::constant(NdArray::zeros(w.shape())))
        })
        .collect())
}

impl Tensor {
    pub fn constant(value: NdArray) -> Self {
        Tensor { value, node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(NdArray::scalar(v))
    }

    pub fn value(&self) -> &NdArray {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.value.rank()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.value.clone())
    }

    pub(crate) fn apply1(&self, op: Op) -> Result<Tensor> {
        apply(op, &[self])
    }

    // --- elementwise -------------------------------------------------------

    /// Brings `self` and `other` to a common shape. Supported cases: equal
    /// shapes, one-element operands, a suffix shape repeated over leading
    /// axes, and a trailing singleton axis repeated along the last axis.
    fn broadcast_pair(&self, other: &Tensor) -> Result<(Tensor, Tensor)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        if self.numel() >= other.numel() {
            Ok((self.clone(), other.broadcast_to(self.shape())?))
        } else {
            Ok((self.broadcast_to(other.shape())?, other.clone()))
        }
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let own = self.shape();
        if own == shape {
            return Ok(self.clone());
        }
        let r = shape.len();
        let total = numel(shape);
        if self.numel() == 1 {
            return self.reshape(&[1])?.expand(0, total)?.reshape(shape);
        }
        if own.len() <= r && shape[r - own.len()..] == *own {
            let inner = self.numel();
            return self
                .reshape(&[1, inner])?
                .expand(0, total / inner)?
                .reshape(shape);
        }
        if own.len() == r && r > 0 && own[r - 1] == 1 && own[..r - 1] == shape[..r - 1] {
            return self.expand(r - 1, shape[r - 1]);
        }
        Err(Error::ShapeMismatch {
            op: "broadcast",
            lhs: own.to_vec(),
            rhs: shape.to_vec(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other)?;
        apply(Op::Add, &[&a, &b])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other)?;
        apply(Op::Sub, &[&a, &b])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other)?;
        apply(Op::Mul, &[&a, &b])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair(other)?;
        apply(Op::Div, &[&a, &b])
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.apply1(Op::AddScalar(c))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        self.apply1(Op::MulScalar(c))
    }

    pub fn powf(&self, p: f64) -> Result<Tensor> {
        self.apply1(Op::PowScalar(p))
    }

    pub fn square(&self) -> Result<Tensor> {
        self.powf(2.0)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.apply1(Op::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.apply1(Op::Log)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.apply1(Op::Sigmoid)
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.apply1(Op::Softplus)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.apply1(Op::Relu)
    }

    /// Elementwise clamp. The backward pass lets gradients through on `[lo, hi]`
    /// (boundary included) and zeroes them outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        self.apply1(Op::Clamp { lo, hi })
    }

    /// Elementwise Huber-style loss with threshold `beta` (not reduced).
    pub fn smooth_l1_elem(&self, beta: f64) -> Result<Tensor> {
        self.apply1(Op::SmoothL1 { beta })
    }

    // --- reductions --------------------------------------------------------

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.apply1(Op::Sum { axis, keepdim })
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        self.reshape(&[self.numel()])?.sum_axis(0, false)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum_all()?.mul_scalar(1.0 / n)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = self.shape().get(axis).copied().unwrap_or(1) as f64;
        self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / n)
    }

    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.apply1(Op::Max { axis })
    }

    /// Repeats a singleton `axis` to `size`.
    pub fn expand(&self, axis: usize, size: usize) -> Result<Tensor> {
        self.apply1(Op::Expand { axis, size })
    }

    pub fn softmax_last(&self) -> Result<Tensor> {
        self.apply1(Op::SoftmaxLast)
    }

    pub fn log_softmax_last(&self) -> Result<Tensor> {
        self.apply1(Op::LogSoftmaxLast)
    }

    // --- linear algebra and layout -------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` over the last two axes, where `op` transposes
    /// when the matching flag is set.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        apply(Op::Matmul { ta, tb }, &[self, other])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        self.apply1(Op::Reshape(Shape::from_slice(shape)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        self.apply1(Op::Permute(Axes::from_slice(perm)))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.apply1(Op::Narrow { axis, start, len })
    }

    /// Zero-pads `axis` with `before` and `after` entries.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        self.apply1(Op::Pad {
            axis,
            before,
            after,
        })
    }

    pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        apply(Op::Concat { axis }, xs)
    }

    /// Gathers rows of a rank-2 table.
    pub fn index_select(&self, ids: &[usize]) -> Result<Tensor> {
        self.apply1(Op::IndexSelect {
            ids: Arc::from(ids),
        })
    }

    /// For a `[N, C]` tensor, picks column `ids[n]` of row `n`.
    pub fn pick(&self, ids: &[usize]) -> Result<Tensor> {
        self.apply1(Op::Pick {
            ids: Arc::from(ids),
        })
    }

    /// Sets entries where `mask` is true to `value`. `mask_shape` must be a
    /// suffix of this tensor's shape.
    pub fn mask_fill(&self, mask: Arc<[bool]>, mask_shape: &[usize], value: f64) -> Result<Tensor> {
        if numel(mask_shape) != mask.len() {
            return Err(Error::BufferLength {
                shape: mask_shape.to_vec(),
                len: mask.len(),
            });
        }
        self.apply1(Op::MaskFill {
            mask,
            mask_shape: Shape::from_slice(mask_shape),
            value,
        })
    }

    /// For `[.., T, T+1]` input, replaces each entry `(i, i+1)` with `v[.., i]`.
    pub fn set_superdiag(&self, v: &Tensor) -> Result<Tensor> {
        apply(Op::SetSuperdiag, &[self, v])
    }

    /// Extracts entries `(i, i+1)` of a `[.., T, T+1]` tensor.
    pub fn superdiag(&self) -> Result<Tensor> {
        self.apply1(Op::Superdiag)
    }
}
