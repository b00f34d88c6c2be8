//! The traditional autoregressive transformer: one forward pass predicts
//! every next state in output space.

use ebwm_autodiff::{NdArray, Tensor};

use super::attention::linear;
use super::{causal_stack, rms_norm, BlockWeights};
use crate::config::{Mode, ModelConfig};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::objectives::{cross_entropy, smooth_l1};
use crate::params::Bound;

pub(crate) fn check_batch(cfg: &ModelConfig, batch: &SequenceBatch) -> Result<()> {
    if batch.mode() != cfg.mode {
        return Err(Error::ModeMismatch);
    }
    let t = batch.context_len();
    if t > cfg.context_length {
        return Err(Error::ContextOverflow {
            len: t,
            max: cfg.context_length,
        });
    }
    Ok(())
}

/// Maps input-space states `[B, T, F]` (continuous) into model width.
pub fn project_input(p: &Bound, x: &Tensor) -> Result<Tensor> {
    Ok(linear(x, p.get("in_proj")?)?.add(p.get("in_bias")?)?)
}

/// Embeds the batch context into `z [B, T, d]`.
pub fn embed_context(p: &Bound, cfg: &ModelConfig, batch: &SequenceBatch) -> Result<Tensor> {
    check_batch(cfg, batch)?;
    let (b, t) = (batch.batch_size(), batch.context_len());
    match cfg.mode {
        Mode::Discrete => {
            let ids = batch.context_tokens()?;
            Ok(p.get("tok_emb")?
                .index_select(&ids)?
                .reshape(&[b, t, cfg.embed_dim])?)
        }
        Mode::Continuous => project_input(p, &Tensor::constant(batch.context_features()?)),
    }
}

/// Next-state predictions: logits `[B, T, V]` or features `[B, T, F]`.
pub fn ar_forward(p: &Bound, cfg: &ModelConfig, batch: &SequenceBatch) -> Result<Tensor> {
    let z = embed_context(p, cfg, batch)?;
    let blocks = BlockWeights::all(p, cfg)?;
    let z = causal_stack(&z, &blocks, cfg)?;
    let z = rms_norm(&z, p.get("final_norm")?, cfg.norm_eps)?;
    match cfg.mode {
        Mode::Discrete if cfg.tie_embeddings => {
            let (b, t, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            let logits = z
                .reshape(&[b * t, d])?
                .matmul_t(p.get("tok_emb")?, false, true)?;
            Ok(logits.reshape(&[b, t, cfg.vocab()])?)
        }
        Mode::Discrete => linear(&z, p.get("head")?),
        Mode::Continuous => Ok(linear(&z, p.get("head")?)?.add(p.get("head_bias")?)?),
    }
}

/// Reconstruction loss of the baseline: next-token cross-entropy or SmoothL1
/// (beta = 1) against the next features.
pub fn baseline_loss(p: &Bound, cfg: &ModelConfig, batch: &SequenceBatch) -> Result<Tensor> {
    let pred = ar_forward(p, cfg, batch)?;
    match cfg.mode {
        Mode::Discrete => cross_entropy(&pred, &batch.target_tokens()?),
        Mode::Continuous => smooth_l1(&pred, &Tensor::constant(batch.target_features()?), 1.0),
    }
}

/// Prediction-only helper for evaluation without a tape.
pub fn predict(p: &Bound, cfg: &ModelConfig, batch: &SequenceBatch) -> Result<NdArray> {
    Ok(ar_forward(p, cfg, batch)?.value().clone())
}
