//! The Energy-Based Transformer.
//!
//! Two streams run through every block. The observed stream `z_o` is exactly
//! the baseline's causal stack. The prediction stream `z_p` holds one
//! candidate per position: row `i` stands for state `i + 1`. Its attention
//! row `i` covers the observed rows `0..=i` plus the candidate itself, which
//! is laid out as a `T x (T + 1)` score matrix whose superdiagonal carries
//! each candidate's self-score. After the last block a final norm and a
//! linear head map each `z_p` row to a scalar energy.
//!
//! The observed stream never reads `z_p`, so [`encode_context`] computes it
//! once and keeps each block's keys and values for any number of candidates.

use std::sync::Arc;

use ebwm_autodiff::{NdArray, Tensor};

use crate::config::{Mode, ModelConfig};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::nn::attention::{causal_attend, linear, merge_heads, project_heads, split_heads};
use crate::nn::baseline::{embed_context, project_input};
use crate::nn::rotary::Rotary;
use crate::nn::{ffn_residual, rms_norm, BlockWeights};
use crate::objectives;
use crate::params::Bound;

/// `[T, T + 1]` mask, true for columns `j > i + 1`.
pub fn prediction_mask(t: usize) -> Arc<[bool]> {
    (0..t * (t + 1))
        .map(|k| k % (t + 1) > k / (t + 1) + 1)
        .collect()
}

fn positions(t: usize, offset: usize) -> Vec<usize> {
    (offset..t + offset).collect()
}

/// Attention of the prediction stream for one block.
///
/// `x_p` is the normed prediction stream `[B, T, d]`; `k_o` and `v_o` are the
/// observed stream's rotated keys and values `[B, H, T, hd]`. Returns the
/// projected output `[B, T, d]` and the probabilities `[B, H, T, T + 1]`.
fn prediction_attention(
    x_p: &Tensor,
    k_o: &Tensor,
    v_o: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
    rot_p: &Rotary,
) -> Result<(Tensor, Tensor)> {
    let wq = w.wq_p.as_ref().unwrap_or(&w.wq);
    let wk = w.wk_p.as_ref().unwrap_or(&w.wk);
    let wv = w.wv_p.as_ref().unwrap_or(&w.wv);
    let h = project_heads(x_p, wq, wk, wv, cfg.heads, rot_p)?;
    let (b, nh, t) = (h.q.shape()[0], h.q.shape()[1], h.q.shape()[2]);
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    let past = h.q.matmul_t(k_o, false, true)?.mul_scalar(scale)?;
    let mut own = h.q.mul(&h.k)?.sum_axis(3, false)?;
    if cfg.scale_self_score {
        own = own.mul_scalar(scale)?;
    }
    let scores = past.pad(3, 0, 1)?.set_superdiag(&own)?;
    let probs = scores
        .mask_fill(prediction_mask(t), &[t, t + 1], f64::NEG_INFINITY)?
        .softmax_last()?;

    let own_weight = probs.superdiag()?.reshape(&[b, nh, t, 1])?;
    let zeros = Tensor::constant(NdArray::zeros(&[b, nh, t]));
    let past_weights = probs.set_superdiag(&zeros)?.narrow(3, 0, t)?;
    let out = past_weights.matmul(v_o)?.add(&h.v.mul(&own_weight)?)?;
    Ok((linear(&merge_heads(&out)?, &w.wo)?, probs))
}

/// Output of one EBT attention layer.
pub struct EbtAttention {
    pub z_o: Tensor,
    pub z_p: Tensor,
    /// Row-softmaxed `[B, H, T, T + 1]` prediction scores.
    pub probs_p: Tensor,
}

/// One dual-stream attention layer over normed inputs `x_o`, `x_p` of shape
/// `[B, T, d]`. Observed rows use positions `0..T`, candidate rows `1..=T`.
pub fn ebt_attention(
    x_o: &Tensor,
    x_p: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
) -> Result<EbtAttention> {
    if x_o.shape() != x_p.shape() || x_o.rank() != 3 {
        return Err(ebwm_autodiff::Error::ShapeMismatch {
            op: "ebt_attention",
            lhs: x_o.shape().to_vec(),
            rhs: x_p.shape().to_vec(),
        }
        .into());
    }
    let t = x_o.shape()[1];
    let rot_o = Rotary::new(cfg.head_dim(), &positions(t, 0))?;
    let rot_p = Rotary::new(cfg.head_dim(), &positions(t, 1))?;
    let heads = project_heads(x_o, &w.wq, &w.wk, &w.wv, cfg.heads, &rot_o)?;
    let (o, _) = causal_attend(&heads)?;
    let z_o = linear(&merge_heads(&o)?, &w.wo)?;
    let (z_p, probs_p) = prediction_attention(x_p, &heads.k, &heads.v, w, cfg, &rot_p)?;
    Ok(EbtAttention { z_o, z_p, probs_p })
}

/// Full residual EBT block on both streams.
pub fn ebt_block(
    z_o: &Tensor,
    z_p: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    let x_o = rms_norm(z_o, &w.attn_norm, cfg.norm_eps)?;
    let x_p = rms_norm(z_p, &w.attn_norm, cfg.norm_eps)?;
    let a = ebt_attention(&x_o, &x_p, w, cfg)?;
    let h_o = z_o.add(&a.z_o)?;
    let h_p = z_p.add(&a.z_p)?;
    Ok((ffn_residual(&h_o, w, cfg)?, ffn_residual(&h_p, w, cfg)?))
}

/// The observed stream of a batch, with each block's rotated keys and values.
#[derive(Clone, Debug)]
pub struct ContextCache {
    /// `z_o` after the last block.
    pub z_o: Tensor,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub batch: usize,
    pub len: usize,
}

/// Runs the observed stream once.
pub fn encode_context(p: &Bound, cfg: &ModelConfig, batch: &SequenceBatch) -> Result<ContextCache> {
    let mut z = embed_context(p, cfg, batch)?;
    let t = batch.context_len();
    let rot = Rotary::new(cfg.head_dim(), &positions(t, 0))?;
    let mut keys = Vec::with_capacity(cfg.blocks);
    let mut values = Vec::with_capacity(cfg.blocks);
    for w in BlockWeights::all(p, cfg)? {
        let x = rms_norm(&z, &w.attn_norm, cfg.norm_eps)?;
        let heads = project_heads(&x, &w.wq, &w.wk, &w.wv, cfg.heads, &rot)?;
        let (o, _) = causal_attend(&heads)?;
        let h = z.add(&linear(&merge_heads(&o)?, &w.wo)?)?;
        z = ffn_residual(&h, &w, cfg)?;
        keys.push(heads.k);
        values.push(heads.v);
    }
    Ok(ContextCache {
        z_o: z,
        keys,
        values,
        batch: batch.batch_size(),
        len: t,
    })
}

/// Per-position energies `[B, T]` and their sum.
#[derive(Clone, Debug)]
pub struct EnergyOutput {
    pub energies: Tensor,
    pub total: Tensor,
}

/// Maps an input-space candidate `[B, T, d_in]` into the prediction stream.
pub fn embed_candidate(p: &Bound, cfg: &ModelConfig, candidate: &Tensor) -> Result<Tensor> {
    match cfg.mode {
        Mode::Discrete => Ok(candidate.clone()),
        Mode::Continuous => project_input(p, candidate),
    }
}

/// Energies of `candidate` given an encoded context.
pub fn energy_forward(
    p: &Bound,
    cfg: &ModelConfig,
    ctx: &ContextCache,
    candidate: &Tensor,
) -> Result<EnergyOutput> {
    let expect = [ctx.batch, ctx.len, cfg.candidate_dim()];
    if candidate.shape() != expect {
        return Err(ebwm_autodiff::Error::ShapeMismatch {
            op: "energy_forward",
            lhs: candidate.shape().to_vec(),
            rhs: expect.to_vec(),
        }
        .into());
    }
    if !candidate.value().is_finite() {
        return Err(Error::NonFinite("candidate"));
    }
    let rot_p = Rotary::new(cfg.head_dim(), &positions(ctx.len, 1))?;
    let mut z = embed_candidate(p, cfg, candidate)?;
    for (l, w) in BlockWeights::all(p, cfg)?.iter().enumerate() {
        let x = rms_norm(&z, &w.attn_norm, cfg.norm_eps)?;
        let (a, _) = prediction_attention(&x, &ctx.keys[l], &ctx.values[l], w, cfg, &rot_p)?;
        z = ffn_residual(&z.add(&a)?, w, cfg)?;
    }
    let z = rms_norm(&z, p.get("final_norm")?, cfg.norm_eps)?;
    let energies = linear(&z, p.get("energy_head")?)?
        .add(p.get("energy_bias")?)?
        .reshape(&[ctx.batch, ctx.len])?;
    let total = energies.sum_all()?;
    Ok(EnergyOutput { energies, total })
}

/// Convenience: encode `batch` and score `candidate`.
pub fn energy(
    p: &Bound,
    cfg: &ModelConfig,
    batch: &SequenceBatch,
    candidate: &Tensor,
) -> Result<EnergyOutput> {
    let ctx = encode_context(p, cfg, batch)?;
    energy_forward(p, cfg, &ctx, candidate)
}

/// Vocabulary logits of refined candidates (discrete mode only).
pub fn decode(p: &Bound, cfg: &ModelConfig, candidate: &Tensor) -> Result<Tensor> {
    if cfg.mode != Mode::Discrete {
        return Err(Error::ModeMismatch);
    }
    objectives::decode_candidate(candidate, p.get("decoder")?)
}

/// Per-head raw scores `[B, H, T, T + 1]` before masking, for inspection.
pub fn raw_prediction_scores(
    x_o: &Tensor,
    x_p: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let t = x_o.shape()[1];
    let rot_o = Rotary::new(cfg.head_dim(), &positions(t, 0))?;
    let rot_p = Rotary::new(cfg.head_dim(), &positions(t, 1))?;
    let k_o = rot_o.apply(&split_heads(&linear(x_o, &w.wk)?, cfg.heads)?)?;
    let wq = w.wq_p.as_ref().unwrap_or(&w.wq);
    let wk = w.wk_p.as_ref().unwrap_or(&w.wk);
    let q_p = rot_p.apply(&split_heads(&linear(x_p, wq)?, cfg.heads)?)?;
    let k_p = rot_p.apply(&split_heads(&linear(x_p, wk)?, cfg.heads)?)?;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut own = q_p.mul(&k_p)?.sum_axis(3, false)?;
    if cfg.scale_self_score {
        own = own.mul_scalar(scale)?;
    }
    Ok(q_p
        .matmul_t(&k_o, false, true)?
        .mul_scalar(scale)?
        .pad(3, 0, 1)?
        .set_superdiag(&own)?)
}
