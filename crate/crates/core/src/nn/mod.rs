//! Llama-style transformer pieces shared by the baseline and the EBT:
//! RMS pre-norm, rotary positions, causal attention and a SwiGLU feedforward.

pub mod attention;
pub mod baseline;
pub mod rotary;

use ebwm_autodiff::functional::{rms_normalize, silu};
use ebwm_autodiff::{NdArray, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Family, Mode, ModelConfig};
use crate::error::Result;
use crate::params::{normal, Bound, Params};
use attention::{causal_attend, linear, merge_heads, project_heads};
use rotary::Rotary;

/// Weights of one transformer block, bound for a forward pass.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// Prediction-stream projections, when not shared with the observed stream.
    pub wq_p: Option<Tensor>,
    pub wk_p: Option<Tensor>,
    pub wv_p: Option<Tensor>,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    pub w3: Tensor,
    pub w2: Tensor,
}

impl BlockWeights {
    pub fn from_bound(p: &Bound, block: usize) -> Result<Self> {
        let get = |n: &str| p.get(&format!("blocks.{block}.{n}")).cloned();
        let opt = |n: &str| p.get(&format!("blocks.{block}.{n}")).ok().cloned();
        Ok(Self {
            attn_norm: get("attn_norm")?,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            wq_p: opt("wq_p"),
            wk_p: opt("wk_p"),
            wv_p: opt("wv_p"),
            ffn_norm: get("ffn_norm")?,
            w1: get("w1")?,
            w3: get("w3")?,
            w2: get("w2")?,
        })
    }

    pub fn all(p: &Bound, cfg: &ModelConfig) -> Result<Vec<Self>> {
        (0..cfg.blocks).map(|l| Self::from_bound(p, l)).collect()
    }
}

/// `x * gain` after RMS normalization over the last axis.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(rms_normalize(x, eps)?.mul(gain)?)
}

/// `(silu(x W1) * (x W3)) W2`.
pub fn feed_forward(x: &Tensor, w: &BlockWeights) -> Result<Tensor> {
    let gate = silu(&linear(x, &w.w1)?)?;
    let up = linear(x, &w.w3)?;
    linear(&gate.mul(&up)?, &w.w2)
}

/// Multi-head causal self-attention of (already normed) `z [B, T, d]`,
/// including the output projection. Row `t` uses rotary position `positions[t]`.
pub fn causal_attention(
    z: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
    positions: &[usize],
) -> Result<Tensor> {
    let rotary = Rotary::new(cfg.head_dim(), positions)?;
    attention_branch(z, w, cfg, &rotary)
}

fn attention_branch(
    x: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
    rotary: &Rotary,
) -> Result<Tensor> {
    let heads = project_heads(x, &w.wq, &w.wk, &w.wv, cfg.heads, rotary)?;
    let (o, _) = causal_attend(&heads)?;
    linear(&merge_heads(&o)?, &w.wo)
}

/// Pre-norm residual block: `h = z + attn(norm(z))`, `h + ffn(norm(h))`.
pub fn block_forward(
    z: &Tensor,
    w: &BlockWeights,
    cfg: &ModelConfig,
    rotary: &Rotary,
) -> Result<Tensor> {
    let x = rms_norm(z, &w.attn_norm, cfg.norm_eps)?;
    let h = z.add(&attention_branch(&x, w, cfg, rotary)?)?;
    ffn_residual(&h, w, cfg)
}

pub(crate) fn ffn_residual(h: &Tensor, w: &BlockWeights, cfg: &ModelConfig) -> Result<Tensor> {
    let x = rms_norm(h, &w.ffn_norm, cfg.norm_eps)?;
    Ok(h.add(&feed_forward(&x, w)?)?)
}

/// The causal block stack over `z [B, T, d]` at positions `0..T`.
pub fn causal_stack(z: &Tensor, blocks: &[BlockWeights], cfg: &ModelConfig) -> Result<Tensor> {
    let t = z.shape()[1];
    let positions: Vec<usize> = (0..t).collect();
    let rotary = Rotary::new(cfg.head_dim(), &positions)?;
    let mut z = z.clone();
    for w in blocks {
        z = block_forward(&z, w, cfg, &rotary)?;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

fn layout(cfg: &ModelConfig, family: Family) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let h = cfg.ffn_hidden();
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    match cfg.mode {
        Mode::Discrete => add("tok_emb".into(), vec![cfg.vocab(), d], Init::Normal),
        Mode::Continuous => {
            add("in_proj".into(), vec![cfg.features(), d], Init::Normal);
            add("in_bias".into(), vec![d], Init::Zeros);
        }
    }
    for l in 0..cfg.blocks {
        let p = |n: &str| format!("blocks.{l}.{n}");
        add(p("attn_norm"), vec![d], Init::Ones);
        for n in ["wq", "wk", "wv", "wo"] {
            add(p(n), vec![d, d], Init::Normal);
        }
        if family == Family::Ebwm && cfg.separate_prediction_projections {
            for n in ["wq_p", "wk_p", "wv_p"] {
                add(p(n), vec![d, d], Init::Normal);
            }
        }
        add(p("ffn_norm"), vec![d], Init::Ones);
        add(p("w1"), vec![d, h], Init::Normal);
        add(p("w3"), vec![d, h], Init::Normal);
        add(p("w2"), vec![h, d], Init::Normal);
    }
    add("final_norm".into(), vec![d], Init::Ones);
    match (family, cfg.mode) {
        (Family::Baseline, Mode::Discrete) => {
            if !cfg.tie_embeddings {
                add("head".into(), vec![d, cfg.vocab()], Init::Zeros);
            }
        }
        (Family::Baseline, Mode::Continuous) => {
            add("head".into(), vec![d, cfg.features()], Init::Zeros);
            add("head_bias".into(), vec![cfg.features()], Init::Zeros);
        }
        (Family::Ebwm, mode) => {
            add("energy_head".into(), vec![d, 1], Init::Normal);
            add("energy_bias".into(), vec![1], Init::Zeros);
            if mode == Mode::Discrete {
                add("decoder".into(), vec![d, cfg.vocab()], Init::Zeros);
            }
        }
    }
    out
}

/// Names and shapes of every network parameter, in initialization order.
pub fn param_shapes(cfg: &ModelConfig, family: Family) -> Vec<(String, Vec<usize>)> {
    layout(cfg, family)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}

/// Seeded initialization. Projections and embeddings are normal with
/// `init_std`, norm gains are one, biases are zero. Output heads (baseline
/// head, EBT decoder) start at zero so an untrained model predicts uniformly.
pub fn init_params(cfg: &ModelConfig, family: Family, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    for (name, shape, init) in layout(cfg, family) {
        let v = match init {
            Init::Normal => normal(&shape, cfg.init_std, &mut rng),
            Init::Ones => NdArray::ones(&shape),
            Init::Zeros => NdArray::zeros(&shape),
        };
        p.insert(name, v);
    }
    Ok(p)
}

/// Closed-form parameter count of the network (excluding MCMC parameters).
pub fn param_count_formula(cfg: &ModelConfig, family: Family) -> usize {
    let (d, h, l) = (cfg.embed_dim, cfg.ffn_hidden(), cfg.blocks);
    let (v, f) = (cfg.vocab(), cfg.features());
    let embed = match cfg.mode {
        Mode::Discrete => v * d,
        Mode::Continuous => f * d + d,
    };
    let separate = family == Family::Ebwm && cfg.separate_prediction_projections;
    let block = 4 * d * d + 3 * d * h + 2 * d + if separate { 3 * d * d } else { 0 };
    let out = match (family, cfg.mode) {
        (Family::Baseline, Mode::Discrete) if cfg.tie_embeddings => 0,
        (Family::Baseline, Mode::Discrete) => d * v,
        (Family::Baseline, Mode::Continuous) => d * f + f,
        (Family::Ebwm, Mode::Discrete) => d + 1 + d * v,
        (Family::Ebwm, Mode::Continuous) => d + 1,
    };
    embed + l * block + d + out
}

/// Parameters that cost compute per position: everything but the token
/// embedding table, which is a lookup.
pub fn compute_param_count(cfg: &ModelConfig, family: Family) -> usize {
    let lookup = match cfg.mode {
        Mode::Discrete => cfg.vocab() * cfg.embed_dim,
        Mode::Continuous => 0,
    };
    let tied_head =
        if family == Family::Baseline && cfg.mode == Mode::Discrete && cfg.tie_embeddings {
            cfg.vocab() * cfg.embed_dim
        } else {
            0
        };
    param_count_formula(cfg, family) - lookup + tied_head
}
