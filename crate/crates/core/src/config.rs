//! Model shape configuration shared by the baseline and the energy-based model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Discrete,
    Continuous,
}

/// Model family: a traditional autoregressive transformer, or the
/// energy-based world model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Baseline,
    Ebwm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub context_length: usize,
    /// Discrete mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    /// Continuous mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    /// Baseline only: reuse the token embedding as the output head.
    #[serde(default)]
    pub tie_embeddings: bool,
    /// EBT only: give the prediction stream its own Q/K/V projections.
    #[serde(default)]
    pub separate_prediction_projections: bool,
    /// EBT only: divide the candidate self-score by sqrt(head_dim) like every
    /// other attention score.
    #[serde(default = "yes")]
    pub scale_self_score: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn yes() -> bool {
    true
}

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Two blocks of width 64 with four heads: trains on a CPU in minutes.
    pub fn desk(mode: Mode, io_dim: usize, context_length: usize) -> Self {
        let mut cfg = Self {
            mode,
            embed_dim: 64,
            heads: 4,
            blocks: 2,
            context_length,
            vocab_size: None,
            feature_dim: None,
            tie_embeddings: false,
            separate_prediction_projections: false,
            scale_self_score: true,
            norm_eps: default_norm_eps(),
            init_std: default_init_std(),
        };
        match mode {
            Mode::Discrete => cfg.vocab_size = Some(io_dim),
            Mode::Continuous => cfg.feature_dim = Some(io_dim),
        }
        cfg
    }

    /// Twelve blocks, width 768, twelve heads, context 16 over 768-d features.
    pub fn paper_cv() -> Self {
        Self {
            embed_dim: 768,
            heads: 12,
            blocks: 12,
            ..Self::desk(Mode::Continuous, 768, 16)
        }
    }

    /// Twelve blocks, width 768, twelve heads, context 256 over a 50277-token vocabulary.
    pub fn paper_nlp() -> Self {
        Self {
            embed_dim: 768,
            heads: 12,
            blocks: 12,
            ..Self::desk(Mode::Discrete, 50277, 256)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::Config {
                key: "model".into(),
                msg,
            })
        };
        if self.embed_dim == 0 || self.heads == 0 || self.blocks == 0 || self.context_length == 0 {
            return bad("embed_dim, heads, blocks and context_length must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!(
                "head_dim {} must be even for rotary positions",
                self.head_dim()
            ));
        }
        match (self.mode, self.vocab_size, self.feature_dim) {
            (Mode::Discrete, Some(v), None) if v > 0 => Ok(()),
            (Mode::Continuous, None, Some(f)) if f > 0 => Ok(()),
            _ => bad(format!(
                "mode {:?} needs exactly {} set",
                self.mode,
                match self.mode {
                    Mode::Discrete => "vocab_size",
                    Mode::Continuous => "feature_dim",
                }
            )),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Gated feedforward width: 8d/3 rounded to the nearest integer.
    pub fn ffn_hidden(&self) -> usize {
        ((8 * self.embed_dim) as f64 / 3.0).round() as usize
    }

    pub fn vocab(&self) -> usize {
        self.vocab_size.unwrap_or(0)
    }

    pub fn features(&self) -> usize {
        self.feature_dim.unwrap_or(0)
    }

    /// Width of an input-space candidate: the feature dimension, or the
    /// embedding width in discrete mode.
    pub fn candidate_dim(&self) -> usize {
        match self.mode {
            Mode::Discrete => self.embed_dim,
            Mode::Continuous => self.features(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        ModelConfig::desk(Mode::Discrete, 256, 32)
            .validate()
            .unwrap();
        ModelConfig::paper_cv().validate().unwrap();
        ModelConfig::paper_nlp().validate().unwrap();
        let mut c = ModelConfig::desk(Mode::Continuous, 16, 16);
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(Mode::Continuous, 16, 16);
        c.vocab_size = Some(3);
        assert!(c.validate().is_err());
    }

    #[test]
    fn ffn_width() {
        assert_eq!(ModelConfig::paper_nlp().ffn_hidden(), 2048);
        assert_eq!(ModelConfig::desk(Mode::Discrete, 256, 8).ffn_hidden(), 171);
    }
}
