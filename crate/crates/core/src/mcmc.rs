//! Iterative refinement of candidate predictions by gradient descent on the
//! energy, with optional clamping of the candidate gradient and Langevin noise.

use std::io::Write;

use ebwm_autodiff::{grad, NdArray, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, ModelConfig};
use crate::data::SequenceBatch;
use crate::ebt::{energy_forward, ContextCache};
use crate::error::{Error, Result};
use crate::params::{normal, Bound};

pub const ALPHA_PARAM: &str = "mcmc.alpha_raw";
pub const NOISE_PARAM: &str = "mcmc.noise_raw";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    RandomNoise,
    Zeros,
    CopyMostRecent,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_noise" => Ok(Self::RandomNoise),
            "zeros" => Ok(Self::Zeros),
            "copy_most_recent" => Ok(Self::CopyMostRecent),
            other => Err(Error::InvalidStrategy(other.into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    pub steps: usize,
    pub alpha_init: f64,
    #[serde(default = "yes")]
    pub alpha_learnable: bool,
    pub alpha_lr_multiplier: f64,
    /// One learned step size per refinement step instead of a shared one.
    #[serde(default)]
    pub alpha_per_step: bool,
    /// Elementwise bound on the candidate gradient; `None` disables clamping.
    #[serde(default = "default_clamp")]
    pub clamp: Option<f64>,
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default)]
    pub noise_learnable: bool,
    #[serde(default = "default_init")]
    pub init: InitStrategy,
    #[serde(default = "one")]
    pub init_noise_scale: f64,
    /// Inference only: stop once the batch-mean energy is at most this value.
    #[serde(default)]
    pub energy_cutoff: Option<f64>,
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Keep the inner gradients differentiable so the loss trains through
    /// the whole chain. Off gives first-order (truncated) training.
    #[serde(default = "yes")]
    pub create_graph: bool,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

fn default_clamp() -> Option<f64> {
    Some(1.0)
}

fn default_init() -> InitStrategy {
    InitStrategy::RandomNoise
}

impl McmcConfig {
    /// Video setting: 4 steps, step size 3e4, step-size LR multiplier 2e5.
    pub fn paper_cv() -> Self {
        Self {
            steps: 4,
            alpha_init: 3e4,
            alpha_learnable: true,
            alpha_lr_multiplier: 2e5,
            alpha_per_step: false,
            clamp: default_clamp(),
            noise_scale: 0.0,
            noise_learnable: false,
            init: default_init(),
            init_noise_scale: 1.0,
            energy_cutoff: None,
            max_steps: None,
            create_graph: true,
        }
    }

    /// Language setting: 2 steps, step size 3e5, step-size LR multiplier 2e6.
    pub fn paper_nlp() -> Self {
        Self {
            steps: 2,
            alpha_init: 3e5,
            alpha_lr_multiplier: 2e6,
            ..Self::paper_cv()
        }
    }

    /// Four steps for the toy feature task.
    pub fn desk_continuous() -> Self {
        Self {
            steps: 4,
            alpha_init: 100.0,
            alpha_lr_multiplier: 1e4,
            ..Self::paper_cv()
        }
    }

    /// Two steps for the toy byte-level task.
    pub fn desk_text() -> Self {
        Self {
            steps: 2,
            alpha_init: 100.0,
            alpha_lr_multiplier: 1e4,
            ..Self::paper_cv()
        }
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: format!("mcmc.{key}"),
                msg,
            })
        };
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        // a frozen step size may be zero (refinement becomes the identity)
        if !(self.alpha_init > 0.0 || (!self.alpha_learnable && self.alpha_init == 0.0)) {
            return bad(
                "alpha_init",
                format!("must be > 0, got {}", self.alpha_init),
            );
        }
        if !(self.noise_scale >= 0.0) {
            return bad(
                "noise_scale",
                format!("must be >= 0, got {}", self.noise_scale),
            );
        }
        if self.noise_learnable && self.noise_scale == 0.0 {
            return bad(
                "noise_scale",
                "a learnable noise scale needs a positive initial value".into(),
            );
        }
        if let Some(c) = self.clamp {
            if !(c > 0.0) {
                return bad("clamp", format!("must be > 0, got {c}"));
            }
        }
        if !(self.alpha_lr_multiplier > 0.0) {
            return bad("alpha_lr_multiplier", "must be > 0".into());
        }
        match (self.energy_cutoff, self.max_steps) {
            (Some(_), None) => bad("max_steps", "required when energy_cutoff is set".into()),
            (Some(_), Some(m)) if m < self.steps => {
                bad("max_steps", format!("must be >= steps ({})", self.steps))
            }
            _ => Ok(()),
        }
    }

    /// Learnable refinement parameters with their initial raw values.
    pub fn init_params(&self) -> Vec<(String, NdArray)> {
        let mut out = Vec::new();
        if self.alpha_learnable {
            let n = if self.alpha_per_step { self.steps } else { 1 };
            out.push((
                ALPHA_PARAM.into(),
                NdArray::full(&[n], inverse_softplus(self.alpha_init)),
            ));
        }
        if self.noise_learnable {
            out.push((
                NOISE_PARAM.into(),
                NdArray::full(&[1], inverse_softplus(self.noise_scale)),
            ));
        }
        out
    }
}

/// `ln(exp(y) - 1)`, the raw value whose softplus is `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Step sizes resolved for one forward pass: tensors when learnable, exact
/// constants otherwise.
#[derive(Clone, Debug)]
pub struct StepSize {
    alpha: Tensor,
    noise: Tensor,
}

impl StepSize {
    pub fn from_bound(p: &Bound, cfg: &McmcConfig) -> Result<Self> {
        let alpha = if cfg.alpha_learnable {
            p.get(ALPHA_PARAM)?.softplus()?
        } else {
            Tensor::constant(NdArray::full(&[1], cfg.alpha_init))
        };
        let noise = if cfg.noise_learnable {
            p.get(NOISE_PARAM)?.softplus()?
        } else {
            Tensor::constant(NdArray::full(&[1], cfg.noise_scale))
        };
        Ok(Self { alpha, noise })
    }

    pub fn constant(alpha: f64, noise: f64) -> Self {
        Self {
            alpha: Tensor::constant(NdArray::full(&[1], alpha)),
            noise: Tensor::constant(NdArray::full(&[1], noise)),
        }
    }

    /// Step size used at refinement step `k`.
    pub fn alpha_at(&self, k: usize) -> Result<Tensor> {
        let n = self.alpha.numel();
        Ok(self.alpha.narrow(0, k.min(n - 1), 1)?)
    }

    /// Current value(s) of the step size.
    pub fn alpha_values(&self) -> Vec<f64> {
        self.alpha.value().to_vec()
    }

    pub fn noise_value(&self) -> f64 {
        self.noise.value().data()[0]
    }
}

/// Per-position energies `[B, T]` of a candidate `[B, T, d_in]`.
pub trait EnergyFn {
    fn energies(&self, candidate: &Tensor) -> Result<Tensor>;
}

/// The EBT energy of candidates against an encoded context.
pub struct EbtEnergy<'a> {
    pub params: &'a Bound,
    pub config: &'a ModelConfig,
    pub context: &'a ContextCache,
}

impl EnergyFn for EbtEnergy<'_> {
    fn energies(&self, candidate: &Tensor) -> Result<Tensor> {
        Ok(energy_forward(self.params, self.config, self.context, candidate)?.energies)
    }
}

/// Initial candidates `[B, T, d_in]` for `batch`. `embedding` is the token
/// table, needed for copy-most-recent in discrete mode.
pub fn init_candidate(
    strategy: InitStrategy,
    batch: &SequenceBatch,
    cfg: &ModelConfig,
    embedding: Option<&NdArray>,
    noise_scale: f64,
    seed: u64,
) -> Result<NdArray> {
    let shape = [batch.batch_size(), batch.context_len(), cfg.candidate_dim()];
    match strategy {
        InitStrategy::Zeros => Ok(NdArray::zeros(&shape)),
        InitStrategy::RandomNoise => Ok(normal(
            &shape,
            noise_scale,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )),
        InitStrategy::CopyMostRecent => match cfg.mode {
            Mode::Continuous => batch.context_features(),
            Mode::Discrete => {
                let table = embedding.ok_or_else(|| {
                    Error::InvalidStrategy(
                        "copy_most_recent needs the token embedding in discrete mode".into(),
                    )
                })?;
                let rows =
                    Tensor::constant(table.clone()).index_select(&batch.context_tokens()?)?;
                Ok(rows.value().reshape(&shape)?)
            }
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceStep {
    pub step: usize,
    /// Candidate at which `energies` were evaluated.
    #[serde(skip)]
    pub candidate: NdArray,
    #[serde(skip)]
    pub energies: NdArray,
    pub mean_energy: f64,
    pub alpha: f64,
    /// L2 norm of the (clamped) candidate gradient.
    pub grad_norm: f64,
    pub grad_max_abs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefinementTrace {
    pub steps: Vec<TraceStep>,
    /// Step at which the energy cutoff stopped refinement.
    pub converged_at: Option<usize>,
    /// Energies of the returned candidate, when requested.
    pub final_energies: Option<NdArray>,
}

impl RefinementTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn first_mean_energy(&self) -> Option<f64> {
        self.steps.first().map(|s| s.mean_energy)
    }

    /// Mean energy of the final candidate if it was evaluated, otherwise of
    /// the last refinement step.
    pub fn last_mean_energy(&self) -> Option<f64> {
        match &self.final_energies {
            Some(e) => Some(e.sum() / e.numel() as f64),
            None => self.steps.last().map(|s| s.mean_energy),
        }
    }

    /// One JSON object per step: step, mean_energy, grad_norm, grad_max_abs, alpha.
    pub fn write_ndjson(&self, mut out: impl Write) -> std::io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Exactly `steps` updates, recorded on the training tape.
    Train,
    /// Detached updates; honours the energy cutoff.
    Inference,
}

/// How [`refine`] runs.
#[derive(Clone, Debug)]
pub struct RefineOptions<'a> {
    pub phase: Phase,
    /// Training tape; a fresh one is used when absent.
    pub tape: Option<&'a Tape>,
    /// Seed of the Langevin noise.
    pub seed: u64,
    /// Also evaluate (without recording) the energies of the final candidate.
    pub evaluate_final: bool,
}

impl<'a> RefineOptions<'a> {
    pub fn inference(seed: u64) -> Self {
        Self {
            phase: Phase::Inference,
            tape: None,
            seed,
            evaluate_final: false,
        }
    }

    pub fn train(tape: &'a Tape, seed: u64) -> Self {
        Self {
            phase: Phase::Train,
            tape: Some(tape),
            seed,
            evaluate_final: false,
        }
    }

    pub fn with_final_energies(mut self, on: bool) -> Self {
        self.evaluate_final = on;
        self
    }
}

/// Result of [`refine`].
pub struct Refined {
    pub candidate: Tensor,
    /// Energy tensors per executed step (tracked in training).
    pub step_energies: Vec<Tensor>,
    /// Candidates at which those energies were evaluated.
    pub step_candidates: Vec<Tensor>,
    pub trace: RefinementTrace,
}

/// Refines `candidate0` by `cand <- cand - alpha * clamp(dE/dcand) + sigma * xi`.
///
/// In [`Phase::Train`] the chain is recorded on `tape` so a loss on the final
/// candidate reaches the weights and the step size. In [`Phase::Inference`]
/// each step uses a scratch tape and the result is detached.
pub fn refine(
    energy: &impl EnergyFn,
    candidate0: &Tensor,
    step: &StepSize,
    cfg: &McmcConfig,
    opts: &RefineOptions,
) -> Result<Refined> {
    let (phase, tape, seed) = (opts.phase, opts.tape, opts.seed);
    cfg.validate()?;
    if !candidate0.value().is_finite() {
        return Err(Error::NonFiniteRefinement {
            what: "initial candidate",
            step: 0,
        });
    }
    let limit = match (phase, cfg.energy_cutoff) {
        (Phase::Inference, Some(_)) => cfg.max_steps.unwrap_or(cfg.steps),
        _ => cfg.steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = cfg.noise_learnable || cfg.noise_scale > 0.0;
    let train_tape = match phase {
        Phase::Train => Some(tape.cloned().unwrap_or_default()),
        Phase::Inference => None,
    };
    let mut cand = match &train_tape {
        Some(t) if !candidate0.is_tracked() => t.leaf(candidate0.value().clone()),
        _ => candidate0.clone(),
    };
    let mut out = Refined {
        candidate: cand.clone(),
        step_energies: Vec::new(),
        step_candidates: Vec::new(),
        trace: RefinementTrace::default(),
    };

    for k in 0..limit {
        let scratch;
        let x = match &train_tape {
            Some(_) => cand.clone(),
            None => {
                scratch = Tape::new();
                scratch.leaf(cand.value().clone())
            }
        };
        let e = energy.energies(&x)?;
        if !e.value().is_finite() {
            return Err(Error::NonFiniteRefinement {
                what: "energy",
                step: k,
            });
        }
        let mean_energy = e.value().sum() / e.numel() as f64;
        if phase == Phase::Inference {
            if let Some(tau) = cfg.energy_cutoff {
                if mean_energy <= tau {
                    out.trace.converged_at = Some(k);
                    break;
                }
            }
        }
        let create = phase == Phase::Train && cfg.create_graph;
        let mut g = grad(&e.sum_all()?, &[&x], create)?.remove(0);
        if !g.value().is_finite() {
            return Err(Error::NonFiniteRefinement {
                what: "gradient",
                step: k,
            });
        }
        if let Some(c) = cfg.clamp {
            g = g.clamp(-c, c)?;
        }
        let alpha = step.alpha_at(k)?;
        let alpha_v = alpha.item()?;
        out.trace.steps.push(TraceStep {
            step: k,
            candidate: cand.value().clone(),
            energies: e.value().clone(),
            mean_energy,
            alpha: alpha_v,
            grad_norm: g.value().norm(),
            grad_max_abs: g.value().max_abs(),
        });
        // a frozen zero step size leaves the candidate bit-identical
        let mut next = if !alpha.is_tracked() && alpha_v == 0.0 {
            x.clone()
        } else {
            x.sub(&g.mul(&alpha)?)?
        };
        if noisy {
            let xi = Tensor::constant(normal(cand.shape(), 1.0, &mut rng));
            next = next.add(&xi.mul(&step.noise)?)?;
        }
        out.step_energies.push(e);
        out.step_candidates.push(x);
        cand = match phase {
            Phase::Train => next,
            Phase::Inference => Tensor::constant(next.value().clone()),
        };
        if !cand.value().is_finite() {
            return Err(Error::NonFiniteRefinement {
                what: "candidate",
                step: k,
            });
        }
    }
    if opts.evaluate_final {
        let _pause = train_tape.as_ref().map(Tape::pause);
        let e = energy.energies(&cand.detach())?;
        out.trace.final_energies = Some(e.value().clone());
    }
    out.candidate = cand;
    Ok(out)
}
