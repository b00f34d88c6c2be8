//! Central finite differences, used as an oracle for tape gradients.

use crate::array::NdArray;
use crate::error::Result;
use crate::tensor::{grad, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Denominator floor for the relative error; differences between values
    /// smaller than this are effectively measured on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference derivative of `f` at `x` for each coordinate in
/// `coords` (all coordinates when `None`).
pub fn central_difference(
    mut f: impl FnMut(&NdArray) -> Result<f64>,
    x: &NdArray,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(coords.len());
    let mut buf = x.to_vec();
    for &i in coords {
        let orig = buf[i];
        buf[i] = orig + eps;
        let up = f(&NdArray::new(x.shape(), buf.clone())?)?;
        buf[i] = orig - eps;
        let down = f(&NdArray::new(x.shape(), buf.clone())?)?;
        buf[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>, floor: f64) -> GradCheckReport {
    let mut rep = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: 0,
        analytic,
        numeric,
    };
    for (i, (a, n)) in rep.analytic.iter().zip(&rep.numeric).enumerate() {
        let rel = relative_error(*a, *n, floor);
        rep.max_abs_error = rep.max_abs_error.max((a - n).abs());
        if rel > rep.max_rel_error {
            rep.max_rel_error = rel;
            rep.worst = i;
        }
    }
    rep
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// over every coordinate.
pub fn check_gradient(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &NdArray,
    cfg: GradCheck,
) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let xt = tape.leaf(x.clone());
    let y = f(&xt)?;
    let g = grad(&y, &[&xt], false)?.remove(0);
    let numeric = central_difference(
        |p| f(&Tensor::constant(p.clone()))?.item(),
        x,
        cfg.eps,
        None,
    )?;
    Ok(compare(g.value().to_vec(), numeric, cfg.floor))
}

/// Maximum relative error between the tape gradient and central differences.
pub fn finite_difference_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &NdArray,
    eps: f64,
) -> Result<f64> {
    let cfg = GradCheck {
        eps,
        ..GradCheck::default()
    };
    Ok(check_gradient(f, x, cfg)?.max_rel_error)
}
