//! Design-choice ablations: each row is a config delta on a base run,
//! trained for the base step budget and scored for stability.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{apply_override, TrainConfig};
use super::trainer::train;
use crate::error::{Error, Result};

/// Losses within this many previous steps form the running median.
pub const SPIKE_WINDOW: usize = 50;

/// Row name, config delta, and the published (stable, convergent) marks.
pub struct Ablation {
    pub name: &'static str,
    pub delta: Vec<(&'static str, Value)>,
    pub paper_stable: bool,
    pub paper_convergent: bool,
}

/// The eight rows that run without a pretrained encoder. Deltas are relative
/// to `base`, whose refinement settings are the "all specified" choices.
pub fn ablations(base: &TrainConfig) -> Vec<Ablation> {
    let noise = 0.05;
    let row = |name, delta, stable, convergent| Ablation {
        name,
        delta,
        paper_stable: stable,
        paper_convergent: convergent,
    };
    vec![
        row(
            "Energy Loss",
            vec![("loss.energy", json!(1.0))],
            false,
            true,
        ),
        row(
            "Bounds Loss",
            vec![("loss.bounds", json!(1.0))],
            false,
            true,
        ),
        row(
            "Unclamped MCMC Gradient",
            vec![("mcmc.clamp", Value::Null)],
            false,
            false,
        ),
        row(
            "Non-Learnable α (MCMC Step Size)",
            vec![("mcmc.alpha_learnable", json!(false))],
            false,
            true,
        ),
        row(
            "Lower Initial MCMC Step Size",
            vec![("mcmc.alpha_init", json!(base.mcmc.alpha_init / 10.0))],
            false,
            true,
        ),
        row(
            "Langevin Dynamics",
            vec![("mcmc.noise_scale", json!(noise))],
            true,
            true,
        ),
        row(
            "Learnable Langevin Dynamics",
            vec![
                ("mcmc.noise_scale", json!(noise)),
                ("mcmc.noise_learnable", json!(true)),
            ],
            true,
            true,
        ),
        row("All Specified Design Choices", vec![], true, true),
    ]
}

/// Apply a row's delta to the base config.
pub fn apply_delta(base: &TrainConfig, delta: &[(&str, Value)]) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    for (key, value) in delta {
        apply_override(&mut v, &format!("{key}={value}"))?;
    }
    TrainConfig::from_json(&v.to_string())
}

fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Steps whose loss exceeds twice the median of the preceding window.
pub fn count_spikes(losses: &[f64]) -> usize {
    (1..losses.len())
        .filter(|&i| {
            let window = &losses[i.saturating_sub(SPIKE_WINDOW)..i];
            losses[i].is_finite() && losses[i] > 2.0 * median(window)
        })
        .count()
}

/// Mean of the final tenth of the run is below the mean of the first tenth.
pub fn is_convergent(losses: &[f64]) -> bool {
    if losses.len() < 2 || losses.iter().any(|l| !l.is_finite()) {
        return false;
    }
    let w = (losses.len() / 10).max(1);
    let head: f64 = losses[..w].iter().sum::<f64>() / w as f64;
    let tail: f64 = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    tail < head
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationResult {
    pub name: String,
    pub delta: Value,
    pub steps: usize,
    pub spikes: usize,
    pub diverged: bool,
    pub final_loss: f64,
    pub val_loss: Option<f64>,
    pub stable: bool,
    pub convergent: bool,
    pub paper_stable: bool,
    pub paper_convergent: bool,
    pub error: Option<String>,
}

impl AblationResult {
    pub fn agrees_with_paper(&self) -> bool {
        self.error.is_none()
            && self.stable == self.paper_stable
            && self.convergent == self.paper_convergent
    }
}

pub const UNFROZEN_ENCODER_NOTE: &str =
    "Unfrozen Encoder: not applicable (needs a pretrained image encoder; inputs here are fixed features)";

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

fn run_one(base: &TrainConfig, ab: &Ablation, out: &Path) -> AblationResult {
    let delta = Value::Object(
        ab.delta
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    );
    let mut result = AblationResult {
        name: ab.name.into(),
        delta,
        steps: 0,
        spikes: 0,
        diverged: false,
        final_loss: f64::NAN,
        val_loss: None,
        stable: false,
        convergent: false,
        paper_stable: ab.paper_stable,
        paper_convergent: ab.paper_convergent,
        error: None,
    };
    let run = || -> Result<_> {
        let mut cfg = apply_delta(base, &ab.delta)?;
        cfg.out_dir = out.join(slug(ab.name));
        cfg.wall_clock = false;
        train(with_fixed_out_dir(cfg))
    };
    match run() {
        Ok(s) => {
            result.steps = s.steps;
            result.spikes = count_spikes(&s.losses);
            result.diverged = s.diverged || s.losses.iter().any(|l| !l.is_finite());
            result.final_loss = s.losses.last().copied().unwrap_or(f64::NAN);
            result.val_loss = s.final_eval.map(|e| e.loss);
            result.stable = !result.diverged && result.spikes == 0;
            result.convergent = !result.diverged && is_convergent(&s.losses);
        }
        Err(e) => {
            log::warn!("ablation `{}` failed: {e}", ab.name);
            result.error = Some(e.to_string());
            result.diverged = matches!(e, Error::NonFinite(_) | Error::NonFiniteRefinement { .. });
        }
    }
    result
}

/// The suite writes each run under its own directory; the environment
/// override must not collapse them into one.
fn with_fixed_out_dir(cfg: TrainConfig) -> TrainConfig {
    let mut cfg = cfg;
    cfg.metrics_file = cfg.out_dir.join(&cfg.metrics_file);
    cfg.checkpoint_file = cfg.out_dir.join(&cfg.checkpoint_file);
    cfg
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationResult>,
    pub notes: Vec<String>,
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let mut s = String::from(
            "| Design choice | Stable | Convergent | Paper stable | Paper convergent | Spikes | Diverged | Final loss | Agrees |\n\
             |---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let (stable, conv) = match &r.error {
                Some(_) => ("error".to_string(), "error".to_string()),
                None => (mark(r.stable).into(), mark(r.convergent).into()),
            };
            s += &format!(
                "| {} | {} | {} | {} | {} | {} | {} | {:.6} | {} |\n",
                r.name,
                stable,
                conv,
                mark(r.paper_stable),
                mark(r.paper_convergent),
                r.spikes,
                r.diverged,
                r.final_loss,
                if r.agrees_with_paper() { "yes" } else { "no" },
            );
        }
        for n in &self.notes {
            s += &format!("\n{n}\n");
        }
        s
    }
}

/// Run every row, continuing past individual failures, and write
/// `ablation.md` and `ablation.json` into `out`.
pub fn run_ablation_suite(base: &TrainConfig, out: &Path) -> Result<AblationReport> {
    base.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let out = &std::path::absolute(out).map_err(|e| Error::io(out, e))?;
    let rows: Vec<_> = ablations(base)
        .iter()
        .map(|ab| {
            log::info!("ablation: {}", ab.name);
            run_one(base, ab, out)
        })
        .collect();
    let report = AblationReport {
        rows,
        notes: vec![
            UNFROZEN_ENCODER_NOTE.into(),
            format!(
                "Stable = no non-finite loss and no step above 2x the running median of the previous {SPIKE_WINDOW} losses; \
                 Convergent = mean loss of the last tenth of steps below that of the first tenth. \
                 Agreement with the paper is reported, not required."
            ),
        ],
    };
    let md = out.join("ablation.md");
    std::fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    let js = out.join("ablation.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&js, text).map_err(|e| Error::io(&js, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Family, Mode};

    #[test]
    fn eight_rows_in_table_order() {
        let base = TrainConfig::smoke(Family::Ebwm, Mode::Continuous);
        let rows = ablations(&base);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[7].name, "All Specified Design Choices");
        assert!(rows[7].delta.is_empty());
    }

    #[test]
    fn non_learnable_alpha_changes_one_key() {
        let base = TrainConfig::smoke(Family::Ebwm, Mode::Continuous);
        let ab = ablations(&base)
            .into_iter()
            .find(|a| a.name.starts_with("Non-Learnable"))
            .unwrap();
        let cfg = apply_delta(&base, &ab.delta).unwrap();
        let mut expect = base.clone();
        expect.mcmc.alpha_learnable = false;
        assert_eq!(cfg, expect);
    }

    #[test]
    fn every_delta_applies() {
        let base = TrainConfig::smoke(Family::Ebwm, Mode::Continuous);
        for ab in ablations(&base) {
            let cfg = apply_delta(&base, &ab.delta).unwrap();
            assert_eq!(cfg == base, ab.delta.is_empty(), "{}", ab.name);
        }
    }

    #[test]
    fn spike_and_convergence_definitions() {
        assert_eq!(count_spikes(&[1.0, 1.0, 2.5, 1.0]), 1);
        assert_eq!(count_spikes(&[1.0, 0.9, 1.9, 0.8]), 0);
        assert_eq!(count_spikes(&[]), 0);
        let mut losses = vec![1.0; 60];
        losses.push(2.1);
        assert_eq!(count_spikes(&losses), 1);
        assert!(is_convergent(&[3.0, 2.0, 1.0]));
        assert!(!is_convergent(&[1.0, 2.0, 3.0]));
        assert!(!is_convergent(&[3.0, f64::NAN, 1.0]));
    }

    #[test]
    fn slugs() {
        assert_eq!(
            slug("Non-Learnable α (MCMC Step Size)"),
            "non_learnable_mcmc_step_size"
        );
    }
}
