//! One forward pass plus loss for either model family.
//!
//! Baseline: predict every next state in one pass and score it.
//! EBWM: encode the context, initialize candidates, refine them on the
//! energy landscape, then score the refined candidates. During training the
//! refinement chain is on the tape so the loss reaches every weight and the
//! step size.

use ebwm_autodiff::{NdArray, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Family, Mode, ModelConfig};
use crate::data::SequenceBatch;
use crate::ebt::{decode, encode_context, energy_forward};
use crate::error::Result;
use crate::mcmc::{
    init_candidate, refine, EbtEnergy, McmcConfig, Phase, RefineOptions, RefinementTrace, StepSize,
};
use crate::nn::baseline::ar_forward;
use crate::nn::init_params;
use crate::objectives::{
    bounds_loss, cross_entropy, energy_label, energy_regression_loss, smooth_l1, total_loss,
    LossTerms, LossWeights,
};
use crate::params::{Bound, Params};

/// Everything that fixes the computation of a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub model: ModelConfig,
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub loss: LossWeights,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.family == Family::Ebwm {
            self.mcmc.validate()?;
        }
        Ok(())
    }

    /// Network weights plus, for the EBWM, the learnable refinement parameters.
    pub fn init_params(&self, seed: u64) -> Result<Params> {
        self.validate()?;
        let mut p = init_params(&self.model, self.family, seed)?;
        if self.family == Family::Ebwm {
            for (name, v) in self.mcmc.init_params() {
                p.insert(name, v);
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Weighted objective (what the optimizer minimizes).
    pub objective: Tensor,
    /// Unweighted reconstruction loss: cross-entropy or SmoothL1.
    pub reconstruction: f64,
    pub energy_loss: Option<f64>,
    pub bounds_loss: Option<f64>,
    /// Final prediction: logits/features (baseline) or refined candidates (EBWM).
    pub prediction: NdArray,
    /// Mean squared error of continuous predictions.
    pub mse: Option<f64>,
    pub trace: Option<RefinementTrace>,
}

/// Options for [`forward_loss`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    /// Training tape; `None` evaluates with constant weights.
    pub tape: Option<&'a Tape>,
    /// Seed for random-noise initialization and Langevin noise.
    pub seed: u64,
    /// Also evaluate the energies of the refined candidates.
    pub final_energies: bool,
}

fn reconstruction(
    spec: &ModelSpec,
    p: &Bound,
    batch: &SequenceBatch,
    prediction: &Tensor,
) -> Result<Tensor> {
    match spec.model.mode {
        Mode::Discrete => {
            let logits = match spec.family {
                Family::Baseline => prediction.clone(),
                Family::Ebwm => decode(p, &spec.model, prediction)?,
            };
            cross_entropy(&logits, &batch.target_tokens()?)
        }
        Mode::Continuous => smooth_l1(prediction, &Tensor::constant(batch.target_features()?), 1.0),
    }
}

fn mse_of(spec: &ModelSpec, batch: &SequenceBatch, prediction: &NdArray) -> Result<Option<f64>> {
    if spec.model.mode != Mode::Continuous {
        return Ok(None);
    }
    let t = batch.target_features()?;
    let n = t.numel() as f64;
    Ok(Some(
        prediction
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n,
    ))
}

/// True next-state representation `[B, T, d_in]` used for energy labels.
fn target_representation(spec: &ModelSpec, p: &Bound, batch: &SequenceBatch) -> Result<Tensor> {
    match spec.model.mode {
        Mode::Continuous => Ok(Tensor::constant(batch.target_features()?)),
        Mode::Discrete => {
            let (b, t) = (batch.batch_size(), batch.context_len());
            let rows = p
                .get("tok_emb")?
                .detach()
                .index_select(&batch.target_tokens()?)?;
            Ok(rows.reshape(&[b, t, spec.model.embed_dim])?)
        }
    }
}

pub fn forward_loss(
    spec: &ModelSpec,
    p: &Bound,
    batch: &SequenceBatch,
    opts: ForwardOptions,
) -> Result<StepOutput> {
    match spec.family {
        Family::Baseline => {
            let pred = ar_forward(p, &spec.model, batch)?;
            let recon = reconstruction(spec, p, batch, &pred)?;
            let mse = mse_of(spec, batch, pred.value())?;
            Ok(StepOutput {
                reconstruction: recon.item()?,
                objective: recon,
                energy_loss: None,
                bounds_loss: None,
                prediction: pred.value().clone(),
                mse,
                trace: None,
            })
        }
        Family::Ebwm => ebwm_forward(spec, p, batch, opts),
    }
}

fn ebwm_forward(
    spec: &ModelSpec,
    p: &Bound,
    batch: &SequenceBatch,
    opts: ForwardOptions,
) -> Result<StepOutput> {
    let cfg = &spec.model;
    let ctx = encode_context(p, cfg, batch)?;
    let table = match cfg.mode {
        Mode::Discrete => Some(p.get("tok_emb")?.value().clone()),
        Mode::Continuous => None,
    };
    let cand0 = init_candidate(
        spec.mcmc.init,
        batch,
        cfg,
        table.as_ref(),
        spec.mcmc.init_noise_scale,
        opts.seed,
    )?;
    let step = StepSize::from_bound(p, &spec.mcmc)?;
    let energy = EbtEnergy {
        params: p,
        config: cfg,
        context: &ctx,
    };
    let ropts = RefineOptions {
        phase: if opts.tape.is_some() {
            Phase::Train
        } else {
            Phase::Inference
        },
        tape: opts.tape,
        seed: opts.seed.wrapping_add(1),
        evaluate_final: opts.final_energies,
    };
    let refined = refine(&energy, &Tensor::constant(cand0), &step, &spec.mcmc, &ropts)?;
    let recon = reconstruction(spec, p, batch, &refined.candidate)?;

    let w = &spec.loss;
    let (mut e_loss, mut b_loss) = (None, None);
    if w.energy > 0.0 || w.bounds > 0.0 {
        let truth = target_representation(spec, p, batch)?;
        let (preds, labels) = if w.energy_per_step {
            let labels = refined
                .step_candidates
                .iter()
                .map(|c| energy_label(&truth, &c.detach()))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<&Tensor> = labels.iter().collect();
            let preds: Vec<&Tensor> = refined.step_energies.iter().collect();
            (Tensor::concat(&preds, 1)?, Tensor::concat(&labels, 1)?)
        } else {
            let e = energy_forward(p, cfg, &ctx, &refined.candidate)?.energies;
            (e, energy_label(&truth, &refined.candidate.detach())?)
        };
        if w.energy > 0.0 {
            e_loss = Some(energy_regression_loss(&preds, &labels, w.energy_distance)?);
        }
        if w.bounds > 0.0 {
            b_loss = Some(bounds_loss(&preds)?);
        }
    }
    let breakdown = total_loss(
        LossTerms {
            reconstruction: recon,
            energy: e_loss,
            bounds: b_loss,
        },
        w,
    )?;
    let prediction = refined.candidate.value().clone();
    Ok(StepOutput {
        objective: breakdown.total,
        reconstruction: breakdown.reconstruction,
        energy_loss: breakdown.energy,
        bounds_loss: breakdown.bounds,
        mse: mse_of(spec, batch, &prediction)?,
        prediction,
        trace: Some(refined.trace),
    })
}
