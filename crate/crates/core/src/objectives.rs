//! Training losses: reconstruction (SmoothL1 or next-token cross-entropy),
//! energy regression against cosine-derived labels, and the out-of-bounds
//! penalty on energies.

use ebwm_autodiff::functional::cosine_similarity;
use ebwm_autodiff::{Error as TensorError, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Mean over elements of `0.5 x^2 / beta` for `|x| < beta`, else `|x| - 0.5 beta`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    same_shape("smooth_l1", pred, target)?;
    Ok(pred.sub(target)?.smooth_l1_elem(beta)?.mean_all()?)
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape("mse", pred, target)?;
    Ok(pred.sub(target)?.square()?.mean_all()?)
}

/// Mean cross-entropy of `[N, V]` logits against `N` class ids.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let v = logits.shape()[logits.rank() - 1];
    if let Some(&id) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::TokenOutOfRange { id, vocab: v });
    }
    let flat = logits.reshape(&[targets.len(), v])?;
    Ok(flat.log_softmax_last()?.pick(targets)?.mean_all()?.neg()?)
}

/// Linear map from refined candidate embeddings `[.., d]` to vocabulary
/// logits `[.., V]`.
pub fn decode_candidate(candidate: &Tensor, decoder: &Tensor) -> Result<Tensor> {
    let d = decoder.shape()[0];
    let v = decoder.shape()[1];
    let lead: Vec<usize> = candidate.shape()[..candidate.rank() - 1].to_vec();
    let n: usize = lead.iter().product();
    let logits = candidate.reshape(&[n, d])?.matmul(decoder)?;
    let mut shape = lead;
    shape.push(v);
    Ok(logits.reshape(&shape)?)
}

/// Cross-entropy of decoded candidates `[B, T, d]` against flattened next-token ids.
pub fn cross_entropy_next_token(
    candidate: &Tensor,
    targets: &[usize],
    decoder: &Tensor,
) -> Result<Tensor> {
    cross_entropy(&decode_candidate(candidate, decoder)?, targets)
}

/// `(1 - cos(z, z_hat)) / 2` along the last axis: 0 for identical directions,
/// 1 for opposite ones.
pub fn energy_label(z: &Tensor, z_hat: &Tensor) -> Result<Tensor> {
    Ok(cosine_similarity(z, z_hat)?
        .neg()?
        .add_scalar(1.0)?
        .mul_scalar(0.5)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyDistance {
    #[default]
    Squared,
    Absolute,
}

pub fn energy_regression_loss(
    predicted: &Tensor,
    labels: &Tensor,
    distance: EnergyDistance,
) -> Result<Tensor> {
    same_shape("energy_regression", predicted, labels)?;
    let diff = predicted.sub(labels)?;
    let per = match distance {
        EnergyDistance::Squared => diff.square()?,
        // |x| as relu(x) + relu(-x)
        EnergyDistance::Absolute => diff.relu()?.add(&diff.neg()?.relu()?)?,
    };
    Ok(per.mean_all()?)
}

/// Mean of `max(0, e - 1) + max(0, -e)`.
pub fn bounds_loss(predicted: &Tensor) -> Result<Tensor> {
    let over = predicted.add_scalar(-1.0)?.relu()?;
    let under = predicted.neg()?.relu()?;
    Ok(over.add(&under)?.mean_all()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_recon")]
    pub reconstruction: f64,
    #[serde(default)]
    pub energy: f64,
    #[serde(default)]
    pub bounds: f64,
    #[serde(default)]
    pub energy_distance: EnergyDistance,
    /// Compute energy labels and predictions at every refinement step instead
    /// of only the final candidate.
    #[serde(default)]
    pub energy_per_step: bool,
}

fn default_recon() -> f64 {
    60.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: default_recon(),
            energy: 0.0,
            bounds: 0.0,
            energy_distance: EnergyDistance::Squared,
            energy_per_step: false,
        }
    }
}

impl LossWeights {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("reconstruction", self.reconstruction),
            ("energy", self.energy),
            ("bounds", self.bounds),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config {
                    key: format!("loss.{k}"),
                    msg: format!("coefficient must be >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Loss terms before weighting. Energy terms are optional since they need an
/// extra energy evaluation that is skipped when their coefficients are zero.
pub struct LossTerms {
    pub reconstruction: Tensor,
    pub energy: Option<Tensor>,
    pub bounds: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub reconstruction: f64,
    pub energy: Option<f64>,
    pub bounds: Option<f64>,
}

/// Weighted sum of the loss terms.
pub fn total_loss(terms: LossTerms, w: &LossWeights) -> Result<LossBreakdown> {
    if w.reconstruction == 0.0 && w.energy == 0.0 && w.bounds == 0.0 {
        log::warn!("all loss coefficients are zero; the objective is constant");
    }
    let mut total = terms.reconstruction.mul_scalar(w.reconstruction)?;
    if let Some(e) = &terms.energy {
        if w.energy != 0.0 {
            total = total.add(&e.mul_scalar(w.energy)?)?;
        }
    }
    if let Some(b) = &terms.bounds {
        if w.bounds != 0.0 {
            total = total.add(&b.mul_scalar(w.bounds)?)?;
        }
    }
    Ok(LossBreakdown {
        total,
        reconstruction: terms.reconstruction.item()?,
        energy: terms.energy.as_ref().map(Tensor::item).transpose()?,
        bounds: terms.bounds.as_ref().map(Tensor::item).transpose()?,
    })
}
