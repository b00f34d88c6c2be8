//! FLOPs accounting.
//!
//! `P` counts the parameters that cost compute at every position (all
//! network weights except the token-embedding lookup table; the refinement
//! step size is ignored). A forward pass costs `2 P T` per sequence and a
//! backward pass twice that. An EBWM refinement step is one forward plus one
//! input-gradient backward, and EBWM training adds the outer backward through
//! the chain, counted as twice the chain's forward and backward.

use crate::config::Family;
use crate::model::ModelSpec;
use crate::nn::compute_param_count;

pub const FLOPS_CONVENTION: &str = "P=non-embedding params; forward=2PT; backward=4PT; \
baseline train=6PT infer=2PT; ebwm infer=K(2PT+4PT) train=3K(2PT+4PT); per sequence of T positions";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopsPhase {
    Train,
    Inference,
}

/// Estimated FLOPs for one sequence of `context_len` positions.
pub fn flops_estimate(spec: &ModelSpec, context_len: usize, phase: FlopsPhase) -> f64 {
    let p = compute_param_count(&spec.model, spec.family) as f64;
    let t = context_len as f64;
    let forward = 2.0 * p * t;
    match (spec.family, phase) {
        (Family::Baseline, FlopsPhase::Inference) => forward,
        (Family::Baseline, FlopsPhase::Train) => 3.0 * forward,
        (Family::Ebwm, phase) => {
            let chain = spec.mcmc.steps as f64 * 3.0 * forward;
            match phase {
                FlopsPhase::Inference => chain,
                FlopsPhase::Train => 3.0 * chain,
            }
        }
    }
}
