//! Shared helpers for the integration tests: seeded random tensors and a
//! loop-level reference implementation of candidate attention.

#![allow(dead_code)]

use ebwm::data::SequenceBatch;
use ebwm::ebt::{encode_context, energy_forward};
use ebwm::model::{forward_loss, ForwardOptions, ModelSpec};
use ebwm::nn::{init_params, BlockWeights};
use ebwm::params::Params;
use ebwm::{Family, Mode, ModelConfig};
use ebwm_autodiff::check::{central_difference, compare, GradCheckReport};
use ebwm_autodiff::{grad, NdArray, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_arr(shape: &[usize], seed: u64) -> NdArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NdArray::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn mat_row(x: &[f64], w: &NdArray) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|o| (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum())
        .collect()
}

fn rotate(x: &[f64], pos: usize) -> Vec<f64> {
    let hd = x.len();
    let mut out = x.to_vec();
    for k in 0..hd / 2 {
        let theta = pos as f64 * 10_000f64.powf(-2.0 * k as f64 / hd as f64);
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        out[2 * k] = a * theta.cos() - b * theta.sin();
        out[2 * k + 1] = b * theta.cos() + a * theta.sin();
    }
    out
}

/// Prediction-stream attention output computed one row at a time: row `i`
/// runs ordinary attention over the sequence `[x_o rows 0..=i, x_p row i]`
/// (positions `0..=i, i + 1`) and keeps the final query row.
pub fn naive_prediction_attention(
    x_o: &NdArray,
    x_p: &NdArray,
    w: &BlockWeights,
    cfg: &ModelConfig,
) -> NdArray {
    let (b, t, d) = (x_o.shape()[0], x_o.shape()[1], x_o.shape()[2]);
    let (nh, hd) = (cfg.heads, cfg.head_dim());
    let val = |o: &Option<ebwm_autodiff::Tensor>, s: &ebwm_autodiff::Tensor| {
        o.as_ref().unwrap_or(s).value().clone()
    };
    let (wq_p, wk_p, wv_p) = (
        val(&w.wq_p, &w.wq),
        val(&w.wk_p, &w.wk),
        val(&w.wv_p, &w.wv),
    );
    let (wk, wv, wo) = (
        w.wk.value().clone(),
        w.wv.value().clone(),
        w.wo.value().clone(),
    );
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        let row = |x: &NdArray, r: usize| x.data()[(bi * t + r) * d..(bi * t + r + 1) * d].to_vec();
        for i in 0..t {
            let xp = row(x_p, i);
            let (q, kp, vp) = (
                mat_row(&xp, &wq_p),
                mat_row(&xp, &wk_p),
                mat_row(&xp, &wv_p),
            );
            let mut merged = vec![0.0; d];
            for h in 0..nh {
                let sl = |v: &[f64]| v[h * hd..(h + 1) * hd].to_vec();
                let qh = rotate(&sl(&q), i + 1);
                let mut keys = Vec::new();
                let mut vals = Vec::new();
                for j in 0..=i {
                    let xo = row(x_o, j);
                    keys.push(rotate(&sl(&mat_row(&xo, &wk)), j));
                    vals.push(sl(&mat_row(&xo, &wv)));
                }
                keys.push(rotate(&sl(&kp), i + 1));
                vals.push(sl(&vp));
                let n = keys.len();
                let scores: Vec<f64> = keys
                    .iter()
                    .enumerate()
                    .map(|(j, k)| {
                        let s: f64 = qh.iter().zip(k).map(|(a, b)| a * b).sum();
                        if j + 1 == n && !cfg.scale_self_score {
                            s
                        } else {
                            s * scale
                        }
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, v) in vals.iter().enumerate() {
                    for c in 0..hd {
                        merged[h * hd + c] += e[j] / z * v[c];
                    }
                }
            }
            out.extend(mat_row(&merged, &wo));
        }
    }
    NdArray::new(&[b, t, d], out).unwrap()
}

/// Tape gradient of the total energy with respect to the candidate against
/// central differences, for a two-block EBT of width 32.
pub fn energy_gradient_check(seed: u64) -> GradCheckReport {
    let mut c = ModelConfig {
        embed_dim: 32,
        heads: 4,
        init_std: 0.4,
        ..ModelConfig::desk(Mode::Continuous, 6, 8)
    };
    c.blocks = 2;
    let p = init_params(&c, Family::Ebwm, seed).unwrap().constants();
    let batch = SequenceBatch::continuous(rand_arr(&[1, 4, 6], seed + 1)).unwrap();
    let ctx = encode_context(&p, &c, &batch).unwrap();
    let x0 = rand_arr(&[1, 3, 6], seed + 2);
    let tape = Tape::new();
    let cand = tape.leaf(x0.clone());
    let total = energy_forward(&p, &c, &ctx, &cand).unwrap().total;
    let g = grad(&total, &[&cand], false).unwrap().remove(0);
    let numeric = central_difference(
        |x| {
            energy_forward(&p, &c, &ctx, &Tensor::constant(x.clone()))
                .unwrap()
                .total
                .item()
        },
        &x0,
        1e-5,
        None,
    )
    .unwrap();
    compare(g.value().to_vec(), numeric, 1e-6)
}

pub fn chain_batch(mode: Mode) -> SequenceBatch {
    match mode {
        Mode::Continuous => SequenceBatch::continuous(rand_arr(&[2, 4, 6], 1)).unwrap(),
        Mode::Discrete => SequenceBatch::discrete(vec![0, 3, 5, 1, 2, 4, 4, 1], 2, 4, 6).unwrap(),
    }
}

fn eval_loss(spec: &ModelSpec, p: &Params, b: &SequenceBatch) -> f64 {
    let opts = ForwardOptions {
        tape: None,
        seed: 7,
        final_energies: false,
    };
    forward_loss(spec, &p.constants(), b, opts)
        .unwrap()
        .objective
        .item()
        .unwrap()
}

fn with_param(p: &Params, name: &str, v: &NdArray) -> Params {
    let mut q = p.clone();
    q.insert(name, v.clone());
    q
}

/// Gradient of the training loss through the whole refinement chain against
/// central differences, on the first `n` coordinates of each named
/// parameter. A zero-initialized decoder is randomized first.
pub fn chain_gradient_check(
    spec: &ModelSpec,
    names: &[(&str, usize)],
) -> Vec<(String, GradCheckReport)> {
    let b = chain_batch(spec.model.mode);
    let mut p = spec.init_params(3).unwrap();
    if p.contains("decoder") {
        let shape = p.get("decoder").unwrap().shape().to_vec();
        p.insert("decoder", rand_arr(&shape, 4));
    }
    let tape = Tape::new();
    let bound = p.bind(Some(&tape), |_| true);
    let opts = ForwardOptions {
        tape: Some(&tape),
        seed: 7,
        final_energies: false,
    };
    let loss = forward_loss(spec, &bound, &b, opts).unwrap().objective;
    let wrt: Vec<&Tensor> = names.iter().map(|(n, _)| bound.get(n).unwrap()).collect();
    let grads = grad(&loss, &wrt, false).unwrap();
    names
        .iter()
        .zip(grads)
        .map(|((name, take), g)| {
            let x0 = p.get(name).unwrap().clone();
            let coords: Vec<usize> = (0..x0.numel().min(*take)).collect();
            let numeric = central_difference(
                |x| Ok(eval_loss(spec, &with_param(&p, name, x), &b)),
                &x0,
                1e-5,
                Some(&coords),
            )
            .unwrap();
            let analytic: Vec<f64> = coords.iter().map(|&i| g.value().data()[i]).collect();
            (name.to_string(), compare(analytic, numeric, 1e-6))
        })
        .collect()
}
