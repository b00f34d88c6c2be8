//! Training loop for both model families.

use std::path::PathBuf;
use std::time::Instant;

use ebwm_autodiff::{grad, NdArray, Tape};
use serde_json::json;

use super::config::TrainConfig;
use super::data::{derive_seed, DataSource, Prefetch};
use super::flops::{flops_estimate, FlopsPhase};
use super::metrics::{MetricsRow, MetricsWriter};
use super::optim::{lr_at_step, AdamW, ParamGroup};
use crate::checkpoint;
use crate::config::{Family, Mode};
use crate::data::synth::copy_baseline_score;
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::mcmc::{StepSize, ALPHA_PARAM, NOISE_PARAM};
use crate::model::{forward_loss, ForwardOptions, ModelSpec, StepOutput};
use crate::params::Params;

const STEP_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean unweighted reconstruction loss over the micro-batches.
    pub loss: f64,
    /// Mean weighted objective.
    pub objective: f64,
    /// `false` when the step was skipped because of a non-finite value.
    pub applied: bool,
    pub row: MetricsRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub perplexity_or_mse: f64,
    pub copy_baseline_score: f64,
    pub mean_first_step_energy: f64,
    pub mean_last_step_energy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub diverged: bool,
    /// Training loss of every step, in order (non-finite for the failing step).
    pub losses: Vec<f64>,
    pub final_eval: Option<EvalResult>,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub cumulative_flops: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn groups_for(spec: &ModelSpec, params: &Params) -> Vec<ParamGroup> {
    params
        .names()
        .iter()
        .map(|n| match n.as_str() {
            ALPHA_PARAM => ParamGroup {
                lr_scale: spec.mcmc.alpha_lr_multiplier,
                weight_decay: false,
            },
            NOISE_PARAM => ParamGroup {
                lr_scale: 1.0,
                weight_decay: false,
            },
            _ => ParamGroup::DEFAULT,
        })
        .collect()
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite(_) | Error::NonFiniteRefinement { .. } | Error::StepAborted
    )
}

/// Evaluate `params` on the held-out batches of `data`.
pub fn evaluate(
    spec: &ModelSpec,
    params: &Params,
    data: &DataSource,
    batches: usize,
    seed: u64,
) -> Result<EvalResult> {
    let bound = params.constants();
    let mut outs: Vec<(StepOutput, f64)> = Vec::with_capacity(batches);
    for i in 0..batches {
        let b = data.val_batch(i)?;
        let opts = ForwardOptions {
            tape: None,
            seed: derive_seed(seed, EVAL_STREAM, i as u64, 0),
            final_energies: true,
        };
        let copy = match spec.model.mode {
            Mode::Continuous => copy_baseline_score(&b)?,
            Mode::Discrete => f64::NAN,
        };
        outs.push((forward_loss(spec, &bound, &b, opts)?, copy));
    }
    let loss = mean(outs.iter().map(|(o, _)| o.reconstruction));
    let perplexity_or_mse = match spec.model.mode {
        Mode::Discrete => loss.exp(),
        Mode::Continuous => mean(outs.iter().map(|(o, _)| o.mse.unwrap_or(f64::NAN))),
    };
    let energies = |f: &dyn Fn(&StepOutput) -> Option<f64>| match spec.family {
        Family::Baseline => f64::NAN,
        Family::Ebwm => mean(outs.iter().map(|(o, _)| f(o).unwrap_or(f64::NAN))),
    };
    Ok(EvalResult {
        loss,
        perplexity_or_mse,
        copy_baseline_score: mean(outs.iter().map(|(_, c)| *c)),
        mean_first_step_energy: energies(&|o| o.trace.as_ref()?.first_mean_energy()),
        mean_last_step_energy: energies(&|o| o.trace.as_ref()?.last_mean_energy()),
    })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub spec: ModelSpec,
    pub params: Params,
    pub data: DataSource,
    opt: AdamW,
    groups: Vec<ParamGroup>,
    step: usize,
    flops: f64,
    flops_per_step: f64,
    start: Instant,
    writer: Option<MetricsWriter>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.spec();
        let params = spec.init_params(cfg.seed)?;
        let data = DataSource::new(&cfg)?;
        let opt = AdamW::new(cfg.optim.clone(), &params);
        let groups = groups_for(&spec, &params);
        let flops_per_step = flops_estimate(&spec, cfg.model.context_length, FlopsPhase::Train)
            * cfg.effective_batch_size as f64;
        Ok(Self {
            cfg,
            spec,
            params,
            data,
            opt,
            groups,
            step: 0,
            flops: 0.0,
            flops_per_step,
            start: Instant::now(),
            writer: None,
        })
    }

    /// Write rows to the metrics file (created fresh).
    pub fn with_metrics(mut self, path: &std::path::Path) -> Result<Self> {
        self.writer = Some(MetricsWriter::create(path)?);
        Ok(self)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn cumulative_flops(&self) -> f64 {
        self.flops
    }

    fn wall(&self) -> f64 {
        if self.cfg.wall_clock {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn alpha_value(&self) -> f64 {
        if self.spec.family != Family::Ebwm {
            return f64::NAN;
        }
        match StepSize::from_bound(&self.params.constants(), &self.spec.mcmc) {
            Ok(s) => mean(s.alpha_values()),
            Err(_) => f64::NAN,
        }
    }

    /// One optimizer step on the given micro-batches (their gradients are
    /// averaged). A non-finite loss or gradient skips the update and returns
    /// `applied = false`.
    pub fn train_step(&mut self, micro: &[SequenceBatch]) -> Result<StepOutcome> {
        let lr = lr_at_step(
            self.step,
            self.cfg.scaled_lr(),
            self.cfg.optim.warmup_steps,
            self.cfg.optim.warmup_divider,
            self.cfg.optim.min_lr_scale,
            self.cfg.max_steps,
        )?;
        let n = micro.len() as f64;
        let mut acc: Vec<Vec<f64>> = self
            .params
            .values()
            .iter()
            .map(|v| vec![0.0; v.numel()])
            .collect();
        let (mut losses, mut objectives, mut mses, mut copies) = (vec![], vec![], vec![], vec![]);
        let mut first_trace = None;
        let mut failure = None;
        for (m, batch) in micro.iter().enumerate() {
            let tape = Tape::new();
            let bound = self.params.bind(Some(&tape), |_| true);
            let opts = ForwardOptions {
                tape: Some(&tape),
                seed: derive_seed(self.cfg.seed, STEP_STREAM, self.step as u64, m as u64),
                final_energies: m == 0,
            };
            let out = match forward_loss(&self.spec, &bound, batch, opts) {
                Ok(o) => o,
                Err(e) if is_divergence(&e) => {
                    failure = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            };
            let objective = out.objective.item()?;
            losses.push(out.reconstruction);
            objectives.push(objective);
            if !objective.is_finite() {
                failure = Some(Error::NonFinite("loss"));
                break;
            }
            let wrt: Vec<_> = bound.tensors().iter().collect();
            let grads = grad(&out.objective, &wrt, false)?;
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, y) in a.iter_mut().zip(g.value().data()) {
                    *x += y / n;
                }
            }
            if let Some(mse) = out.mse {
                mses.push(mse);
            }
            if self.spec.model.mode == Mode::Continuous {
                copies.push(copy_baseline_score(batch)?);
            }
            if m == 0 {
                first_trace = out.trace;
            }
        }

        let mut row = MetricsRow::new(self.step + 1, "train");
        row.epoch = self
            .data
            .epoch((self.step + 1) * self.cfg.effective_batch_size);
        row.lr = lr;
        row.loss = if failure.is_some() && losses.iter().all(|l| l.is_finite()) {
            f64::NAN
        } else {
            mean(losses.iter().copied())
        };
        let objective = mean(objectives.iter().copied());

        let mut applied = false;
        if failure.is_none() {
            let grads = acc
                .into_iter()
                .zip(self.params.values())
                .map(|(g, p)| NdArray::new(p.shape(), g))
                .collect::<ebwm_autodiff::Result<Vec<_>>>()?;
            match self.opt.step(&mut self.params, &grads, lr, &self.groups) {
                Ok(report) => {
                    self.audit_alpha_lr(&report.lrs, lr)?;
                    row.grad_norm = report.grad_norm;
                    applied = true;
                }
                Err(Error::StepAborted) => failure = Some(Error::StepAborted),
                Err(e) => return Err(e),
            }
        }
        if let Some(e) = &failure {
            log::warn!("step {} aborted: {e}", self.step + 1);
        }

        self.step += 1;
        self.flops += self.flops_per_step;
        row.cumulative_flops = self.flops;
        row.perplexity_or_mse = match self.spec.model.mode {
            Mode::Discrete => row.loss.exp(),
            Mode::Continuous => mean(mses.iter().copied()),
        };
        row.copy_baseline_score = mean(copies.iter().copied());
        if let Some(t) = &first_trace {
            row.mean_first_step_energy = t.first_mean_energy().unwrap_or(f64::NAN);
            row.mean_last_step_energy = t.last_mean_energy().unwrap_or(f64::NAN);
        }
        row.alpha = self.alpha_value();
        row.wall_seconds = self.wall();
        if let Some(w) = &mut self.writer {
            if !applied
                || self.step.is_multiple_of(self.cfg.log_every)
                || self.step == self.cfg.max_steps
            {
                w.write(&row)?;
            }
        }
        Ok(StepOutcome {
            loss: row.loss,
            objective,
            applied,
            row,
        })
    }

    /// The step-size group must see exactly `lr * alpha_lr_multiplier`.
    fn audit_alpha_lr(&self, lrs: &[f64], lr: f64) -> Result<()> {
        if let Some(i) = self.params.names().iter().position(|n| n == ALPHA_PARAM) {
            let want = lr * self.spec.mcmc.alpha_lr_multiplier;
            log::debug!("step {}: alpha lr {} (base {lr})", self.step + 1, lrs[i]);
            if lrs[i] != want {
                return Err(Error::Config {
                    key: "mcmc.alpha_lr_multiplier".into(),
                    msg: format!("alpha group lr {} != {want}", lrs[i]),
                });
            }
        }
        Ok(())
    }

    pub fn evaluate(&mut self) -> Result<EvalResult> {
        let r = evaluate(
            &self.spec,
            &self.params,
            &self.data,
            self.cfg.eval_batches,
            self.cfg.seed,
        )?;
        let (alpha, wall) = (self.alpha_value(), self.wall());
        if let Some(w) = &mut self.writer {
            let mut row = MetricsRow::new(self.step, "val");
            row.epoch = self.data.epoch(self.step * self.cfg.effective_batch_size);
            row.loss = r.loss;
            row.perplexity_or_mse = r.perplexity_or_mse;
            row.copy_baseline_score = r.copy_baseline_score;
            row.mean_first_step_energy = r.mean_first_step_energy;
            row.mean_last_step_energy = r.mean_last_step_energy;
            row.alpha = alpha;
            row.cumulative_flops = self.flops;
            row.wall_seconds = wall;
            w.write(&row)?;
        }
        Ok(r)
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        json!({ "config": self.cfg, "step": self.step })
    }

    /// Train for the remaining budget, validating on schedule. Stops at the
    /// first non-finite step.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let micro = self.cfg.micro_batches();
        let prefetch = Prefetch::spawn(
            self.data.clone(),
            self.step..self.cfg.max_steps,
            micro,
            self.cfg.queue_depth,
        );
        let mut losses = Vec::new();
        let mut diverged = false;
        let mut final_eval = None;
        while self.step < self.cfg.max_steps {
            let batches = match prefetch.rx.recv() {
                Ok(b) => b?,
                Err(_) => return Err(Error::ProducerStopped),
            };
            let out = self.train_step(&batches)?;
            losses.push(out.loss);
            if !out.applied {
                diverged = true;
                break;
            }
            let every = self.cfg.eval_every;
            if self.step == self.cfg.max_steps || (every > 0 && self.step.is_multiple_of(every)) {
                final_eval = Some(self.evaluate()?);
            }
        }
        prefetch.finish();
        if diverged {
            final_eval = None;
        }
        Ok(TrainSummary {
            steps: self.step,
            diverged,
            losses,
            final_eval,
            metrics_path: self.writer.as_ref().map(|w| w.path().to_path_buf()),
            checkpoint_path: None,
            cumulative_flops: self.flops,
        })
    }
}

/// Train with metrics and a final checkpoint under the configured output
/// directory.
pub fn train(cfg: TrainConfig) -> Result<TrainSummary> {
    let metrics = cfg.metrics_path();
    let ckpt = cfg.checkpoint_path();
    let mut trainer = Trainer::new(cfg)?.with_metrics(&metrics)?;
    log::info!(
        "training {:?} for {} steps ({} params)",
        trainer.spec.family,
        trainer.cfg.max_steps,
        trainer.params.count()
    );
    let mut summary = trainer.run()?;
    checkpoint::save(&ckpt, &trainer.params, &trainer.checkpoint_meta())?;
    summary.checkpoint_path = Some(ckpt);
    Ok(summary)
}
