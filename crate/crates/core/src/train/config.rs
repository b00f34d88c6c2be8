//! Training configuration: JSON schema, presets and dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::optim::{scaled_lr, OptimConfig};
use crate::config::{Family, Mode, ModelConfig};
use crate::data::synth::Mixing;
use crate::data::text::BYTE_VOCAB;
use crate::error::{Error, Result};
use crate::mcmc::McmcConfig;
use crate::model::ModelSpec;
use crate::objectives::LossWeights;

/// Environment variable that overrides `out_dir`.
pub const OUT_DIR_ENV: &str = "EBWM_OUT_DIR";

/// Where batches come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Synthetic AR(1) feature sequences.
    Continuous {
        gamma: f64,
        #[serde(default = "orthogonal")]
        mixing: Mixing,
        #[serde(default)]
        mixing_seed: u64,
    },
    /// Byte-level text. Without a `corpus` file a corpus of `generated_bytes`
    /// bytes is generated from `corpus_seed`.
    Text {
        #[serde(default)]
        corpus: Option<PathBuf>,
        #[serde(default = "megabyte")]
        generated_bytes: usize,
        #[serde(default)]
        corpus_seed: u64,
        /// Trailing fraction of the corpus held out for validation.
        #[serde(default = "tenth")]
        val_fraction: f64,
    },
}

fn orthogonal() -> Mixing {
    Mixing::Orthogonal
}
fn megabyte() -> usize {
    1 << 20
}
fn tenth() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub family: Family,
    pub model: ModelConfig,
    /// Ignored by the baseline.
    #[serde(default = "McmcConfig::paper_cv")]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub loss: LossWeights,
    pub optim: OptimConfig,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    /// Sequences per optimizer step, reached by gradient accumulation.
    pub effective_batch_size: usize,
    /// Step budget; also the length of the cosine schedule.
    pub max_steps: usize,
    /// Nominal epoch budget, recorded only (the step budget governs).
    #[serde(default)]
    pub epochs: Option<f64>,
    /// Recorded only: encoder freezing needs a pretrained feature encoder.
    #[serde(default)]
    pub freeze_encoder_epochs: Option<f64>,
    /// Depth of the energy head; only a single linear layer is implemented.
    #[serde(default = "one")]
    pub end_mlp_layers: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataSpec,
    /// Validate every this many steps (0: only after the last step).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Write a training row every this many steps.
    #[serde(default = "one")]
    pub log_every: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_metrics")]
    pub metrics_file: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint_file: PathBuf,
    /// Record elapsed seconds; off writes 0 so reruns are byte-identical.
    #[serde(default = "yes")]
    pub wall_clock: bool,
    /// Batches prepared ahead of the training loop.
    #[serde(default = "default_queue")]
    pub queue_depth: usize,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_seed() -> u64 {
    33
}
fn default_eval_batches() -> usize {
    4
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_metrics() -> PathBuf {
    PathBuf::from("metrics.csv")
}
fn default_checkpoint() -> PathBuf {
    PathBuf::from("model.ckpt")
}
fn default_queue() -> usize {
    4
}

impl TrainConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            family: self.family,
            model: self.model.clone(),
            mcmc: self.mcmc.clone(),
            loss: self.loss.clone(),
        }
    }

    pub fn scaled_lr(&self) -> f64 {
        scaled_lr(self.optim.base_lr, self.effective_batch_size)
    }

    pub fn micro_batches(&self) -> usize {
        self.effective_batch_size / self.batch_size
    }

    /// Output directory, honoring [`OUT_DIR_ENV`].
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.resolved_out_dir().join(&self.metrics_file)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolved_out_dir().join(&self.checkpoint_file)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: key.into(),
                msg,
            })
        };
        self.spec().validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.effective_batch_size == 0
            || !self.effective_batch_size.is_multiple_of(self.batch_size)
        {
            return bad(
                "effective_batch_size",
                format!(
                    "must be a positive multiple of batch_size ({})",
                    self.batch_size
                ),
            );
        }
        if self.max_steps <= self.optim.warmup_steps {
            return bad(
                "max_steps",
                format!(
                    "must exceed optim.warmup_steps ({})",
                    self.optim.warmup_steps
                ),
            );
        }
        if self.end_mlp_layers != 1 {
            return bad(
                "end_mlp_layers",
                "only a single linear energy head is supported".into(),
            );
        }
        if self.eval_batches == 0 {
            return bad("eval_batches", "must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every", "must be positive".into());
        }
        if self.queue_depth == 0 {
            return bad("queue_depth", "must be positive".into());
        }
        match (&self.data, self.model.mode) {
            (DataSpec::Continuous { gamma, .. }, Mode::Continuous) => {
                if !(0.0..=1.0).contains(gamma) {
                    return bad("data.gamma", format!("{gamma} is outside [0, 1]"));
                }
            }
            (DataSpec::Text { val_fraction, .. }, Mode::Discrete) => {
                if !(*val_fraction > 0.0 && *val_fraction < 1.0) {
                    return bad("data.val_fraction", "must be in (0, 1)".into());
                }
                if self.model.vocab() < BYTE_VOCAB {
                    return bad(
                        "model.vocab_size",
                        format!("byte text needs at least {BYTE_VOCAB}"),
                    );
                }
            }
            _ => return bad("data.kind", "does not match model.mode".into()),
        }
        Ok(())
    }

    /// Parse JSON, reporting the path of the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            key: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file and apply `key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| Error::Config {
            key: String::new(),
            msg: format!("{}: {e}", path.display()),
        })?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_json(&value.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Baseline, video-feature setting (published CV hyperparameters).
    pub fn paper_cv_baseline() -> Self {
        Self::paper(
            Family::Baseline,
            ModelConfig::paper_cv(),
            64,
            192,
            1e-3,
            continuous(0.9),
        )
    }

    /// Baseline, language setting (published NLP hyperparameters).
    pub fn paper_nlp_baseline() -> Self {
        Self::paper(
            Family::Baseline,
            ModelConfig::paper_nlp(),
            128,
            384,
            6e-4,
            text(),
        )
    }

    /// EBWM, video-feature setting.
    pub fn paper_cv_ebwm() -> Self {
        Self {
            mcmc: McmcConfig::paper_cv(),
            ..Self::paper(
                Family::Ebwm,
                ModelConfig::paper_cv(),
                64,
                192,
                2e-4,
                continuous(0.9),
            )
        }
    }

    /// EBWM, language setting.
    pub fn paper_nlp_ebwm() -> Self {
        Self {
            mcmc: McmcConfig::paper_nlp(),
            ..Self::paper(Family::Ebwm, ModelConfig::paper_nlp(), 24, 72, 2e-4, text())
        }
    }

    fn paper(
        family: Family,
        model: ModelConfig,
        batch: usize,
        effective: usize,
        lr: f64,
        data: DataSpec,
    ) -> Self {
        Self {
            family,
            model,
            mcmc: McmcConfig::paper_cv(),
            loss: LossWeights::default(),
            optim: OptimConfig::with_lr(lr, 10_000),
            batch_size: batch,
            effective_batch_size: effective,
            max_steps: 100_000,
            epochs: Some(400.0),
            freeze_encoder_epochs: Some(2000.0),
            end_mlp_layers: 1,
            seed: default_seed(),
            data,
            eval_every: 1000,
            eval_batches: default_eval_batches(),
            log_every: 10,
            out_dir: default_out_dir(),
            metrics_file: default_metrics(),
            checkpoint_file: default_checkpoint(),
            wall_clock: true,
            queue_depth: default_queue(),
        }
    }

    /// Tiny models for the toy tasks: two blocks of width 64.
    pub fn toy(family: Family, mode: Mode) -> Self {
        let (model, data, mcmc) = match mode {
            Mode::Continuous => (
                ModelConfig::desk(mode, 16, 16),
                continuous(0.9),
                McmcConfig::desk_continuous(),
            ),
            Mode::Discrete => (
                ModelConfig::desk(mode, BYTE_VOCAB, 64),
                text(),
                McmcConfig::desk_text(),
            ),
        };
        let lr = match family {
            Family::Baseline => 3e-3,
            Family::Ebwm => 2e-3,
        };
        let (max_steps, eval_every) = match mode {
            Mode::Continuous => (1500, 250),
            Mode::Discrete => (500, 100),
        };
        Self {
            mcmc,
            optim: OptimConfig::with_lr(lr, 100),
            batch_size: 16,
            effective_batch_size: 32,
            max_steps,
            epochs: None,
            freeze_encoder_epochs: None,
            eval_every,
            log_every: 10,
            ..Self::paper(family, model, 16, 32, lr, data)
        }
    }

    /// A run of a few dozen steps for CI.
    pub fn smoke(family: Family, mode: Mode) -> Self {
        let mut cfg = Self::toy(family, mode);
        cfg.model.embed_dim = 32;
        cfg.model.heads = 2;
        cfg.model.context_length = cfg.model.context_length.min(16);
        cfg.batch_size = 8;
        cfg.effective_batch_size = 16;
        cfg.max_steps = 40;
        cfg.optim.warmup_steps = 5;
        cfg.eval_every = 20;
        cfg.eval_batches = 2;
        cfg.log_every = 1;
        cfg.wall_clock = false;
        if let DataSpec::Text {
            generated_bytes, ..
        } = &mut cfg.data
        {
            *generated_bytes = 1 << 16;
        }
        cfg
    }
}

fn continuous(gamma: f64) -> DataSpec {
    DataSpec::Continuous {
        gamma,
        mixing: Mixing::Orthogonal,
        mixing_seed: 0,
    }
}

fn text() -> DataSpec {
    DataSpec::Text {
        corpus: None,
        generated_bytes: megabyte(),
        corpus_seed: 0,
        val_fraction: tenth(),
    }
}

/// Apply `a.b.c=value` to a JSON tree. The value is parsed as JSON when
/// possible and taken as a string otherwise. Missing objects are created.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        key: spec.into(),
        msg: "override must look like key=value".into(),
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config {
                key: key.into(),
                msg: "empty key segment".into(),
            });
        }
        let obj = match node {
            Value::Object(map) => map,
            _ => {
                return Err(Error::Config {
                    key: parts[..i].join("."),
                    msg: "is not an object".into(),
                })
            }
        };
        if i + 1 == parts.len() {
            obj.insert((*part).into(), value);
            return Ok(());
        }
        node = obj
            .entry(*part)
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [
            TrainConfig::paper_cv_baseline(),
            TrainConfig::paper_nlp_baseline(),
            TrainConfig::paper_cv_ebwm(),
            TrainConfig::paper_nlp_ebwm(),
            TrainConfig::toy(Family::Ebwm, Mode::Continuous),
            TrainConfig::toy(Family::Baseline, Mode::Discrete),
            TrainConfig::smoke(Family::Ebwm, Mode::Continuous),
            TrainConfig::smoke(Family::Ebwm, Mode::Discrete),
        ] {
            cfg.validate().unwrap();
            assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }

    #[test]
    fn paper_values() {
        let cv = TrainConfig::paper_cv_ebwm();
        assert_eq!((cv.batch_size, cv.effective_batch_size), (64, 192));
        assert!((cv.scaled_lr() - 1.5e-4).abs() < 1e-18);
        assert_eq!(cv.optim.warmup_steps, 10_000);
        assert_eq!(
            (cv.optim.warmup_divider, cv.optim.min_lr_scale),
            (20.0, 10.0)
        );
        assert_eq!((cv.optim.weight_decay, cv.optim.grad_clip), (0.01, 1.0));
        assert_eq!((cv.optim.beta1, cv.optim.beta2), (0.9, 0.999));
        assert_eq!(
            (
                cv.mcmc.steps,
                cv.mcmc.alpha_init,
                cv.mcmc.alpha_lr_multiplier
            ),
            (4, 3e4, 2e5)
        );
        assert_eq!(cv.loss.reconstruction, 60.0);
        assert_eq!(cv.seed, 33);
        let nlp = TrainConfig::paper_nlp_ebwm();
        assert_eq!((nlp.batch_size, nlp.effective_batch_size), (24, 72));
        assert_eq!(
            (
                nlp.mcmc.steps,
                nlp.mcmc.alpha_init,
                nlp.mcmc.alpha_lr_multiplier
            ),
            (2, 3e5, 2e6)
        );
        let base = TrainConfig::paper_nlp_baseline();
        assert!((base.scaled_lr() - 9e-4).abs() < 1e-18);
        assert_eq!(base.model.vocab(), 50277);
    }

    #[test]
    fn overrides_set_nested_keys() {
        let mut v =
            serde_json::to_value(TrainConfig::smoke(Family::Ebwm, Mode::Continuous)).unwrap();
        apply_override(&mut v, "mcmc.steps=3").unwrap();
        apply_override(&mut v, "optim.base_lr=0.01").unwrap();
        apply_override(&mut v, "mcmc.init=copy_most_recent").unwrap();
        let cfg = TrainConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.mcmc.steps, 3);
        assert_eq!(cfg.optim.base_lr, 0.01);
        assert!(apply_override(&mut v, "nokey").is_err());
        assert!(apply_override(&mut v, "seed.x=1").is_err());
    }

    #[test]
    fn malformed_config_names_the_key() {
        let mut v =
            serde_json::to_value(TrainConfig::smoke(Family::Ebwm, Mode::Continuous)).unwrap();
        apply_override(&mut v, "mcmc.steps=\"four\"").unwrap();
        match TrainConfig::from_json(&v.to_string()) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "mcmc.steps"),
            other => panic!("{other:?}"),
        }
        let mut v =
            serde_json::to_value(TrainConfig::smoke(Family::Ebwm, Mode::Continuous)).unwrap();
        apply_override(&mut v, "optim.learning_rate=1").unwrap();
        match TrainConfig::from_json(&v.to_string()) {
            Err(Error::Config { key, msg }) => {
                assert_eq!(key, "optim.learning_rate");
                assert!(msg.contains("learning_rate"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invariants_are_enforced() {
        let base = TrainConfig::smoke(Family::Baseline, Mode::Continuous);
        let mut c = base.clone();
        c.optim.base_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.optim.grad_clip = 0.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.optim.warmup_steps = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.effective_batch_size = 12;
        assert!(c.validate().is_err());
        let mut c = base;
        c.data = text();
        assert!(c.validate().is_err());
    }
}
