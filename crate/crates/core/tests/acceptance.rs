//! Acceptance suite. Prints one `criterion N (...): PASS|FAIL (details)` line
//! per criterion and exits non-zero if any criterion fails.
//!
//! `EBWM_ACCEPTANCE=1,4,10` restricts the run to the listed criteria.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::{chain_gradient_check, energy_gradient_check, naive_prediction_attention, rand_arr};
use ebwm::data::corpus::generate_corpus;
use ebwm::ebt::{ebt_attention, ebt_block};
use ebwm::mcmc::{refine, EnergyFn, McmcConfig, RefineOptions, StepSize, ALPHA_PARAM};
use ebwm::model::ModelSpec;
use ebwm::nn::{causal_stack, init_params, BlockWeights};
use ebwm::objectives::{bounds_loss, energy_label, smooth_l1, LossWeights};
use ebwm::train::ablation::run_ablation_suite;
use ebwm::train::optim::{lr_at_step, scaled_lr};
use ebwm::train::{train, DataSpec, TrainConfig};
use ebwm::{Family, Mode, ModelConfig};
use ebwm_autodiff::{NdArray, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Point every output of `cfg` at `dir`, independent of the environment.
fn into_dir(mut cfg: TrainConfig, dir: &Path) -> TrainConfig {
    cfg.out_dir = dir.to_path_buf();
    cfg.metrics_file = dir.join("metrics.csv");
    cfg.checkpoint_file = dir.join("model.ckpt");
    cfg
}

fn attention_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut cases) = (0.0f64, 0usize);
    for t in 1..=8 {
        for h in [1, 2, 4] {
            for d in [8, 16] {
                for _ in 0..100 {
                    let mut c = ModelConfig {
                        embed_dim: d,
                        heads: h,
                        init_std: rng.gen_range(0.1..0.8),
                        ..ModelConfig::desk(Mode::Continuous, 4, 8)
                    };
                    c.separate_prediction_projections = rng.gen();
                    c.scale_self_score = rng.gen();
                    let seed = rng.gen::<u32>() as u64;
                    let p = init_params(&c, Family::Ebwm, seed).unwrap().constants();
                    let w = BlockWeights::from_bound(&p, 0).unwrap();
                    let x_o = rand_arr(&[2, t, d], seed + 1);
                    let x_p = rand_arr(&[2, t, d], seed + 2);
                    let a = ebt_attention(
                        &Tensor::constant(x_o.clone()),
                        &Tensor::constant(x_p.clone()),
                        &w,
                        &c,
                    )
                    .unwrap();
                    worst = worst.max(
                        a.z_p
                            .value()
                            .max_abs_diff(&naive_prediction_attention(&x_o, &x_p, &w, &c)),
                    );
                    cases += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && secs < 60.0,
        format!("{cases} cases, max abs err {worst:.3e} (< 1e-9), {secs:.1}s (< 60s)"),
    )
}

fn observed_stream() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut identical) = (0.0f64, 0usize);
    for case in 0..50u64 {
        let d = [8, 16][rng.gen_range(0..2)];
        let h = [1, 2, 4][rng.gen_range(0..3)];
        let (t, b) = (rng.gen_range(1..=8), rng.gen_range(1..=2));
        let mut c = ModelConfig {
            embed_dim: d,
            heads: h,
            init_std: 0.4,
            ..ModelConfig::desk(Mode::Continuous, 4, 8)
        };
        c.blocks = rng.gen_range(1..=3);
        c.separate_prediction_projections = rng.gen();
        let p = init_params(&c, Family::Ebwm, 100 + case)
            .unwrap()
            .constants();
        let blocks = BlockWeights::all(&p, &c).unwrap();
        let z = Tensor::constant(rand_arr(&[b, t, d], 200 + case));
        let (mut z_o, mut z_p) = (
            z.clone(),
            Tensor::constant(rand_arr(&[b, t, d], 300 + case)),
        );
        for w in &blocks {
            (z_o, z_p) = ebt_block(&z_o, &z_p, w, &c).unwrap();
        }
        let base = causal_stack(&z, &blocks, &c).unwrap();
        worst = worst.max(z_o.value().max_abs_diff(base.value()));
        identical += z_o.value().bit_eq(base.value()) as usize;
    }
    outcome(
        worst <= 1e-12,
        format!("50 cases, max abs err {worst:.3e} (<= 1e-12), {identical} bit-identical"),
    )
}

fn chain_spec(mode: Mode) -> ModelSpec {
    let mut model = ModelConfig::desk(mode, 6, 8);
    model.embed_dim = 32;
    model.heads = 4;
    model.blocks = 2;
    model.init_std = 0.3;
    ModelSpec {
        family: Family::Ebwm,
        model,
        mcmc: McmcConfig {
            steps: 2,
            alpha_init: 0.5,
            alpha_lr_multiplier: 1.0,
            ..McmcConfig::paper_cv()
        },
        loss: LossWeights::default(),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut energy_worst = 0.0f64;
    for seed in 1..=3 {
        let r = energy_gradient_check(seed);
        energy_worst = energy_worst.max(r.max_rel_error);
        pass &= r.max_rel_error < 1e-5;
    }
    let mut chain_worst = 0.0f64;
    let mut alpha_worst = 0.0f64;
    for mode in [Mode::Continuous, Mode::Discrete] {
        let spec = chain_spec(mode);
        let mut names = vec![
            (ALPHA_PARAM, 1),
            ("blocks.0.wq", 16),
            ("blocks.1.w2", 16),
            ("energy_head", 16),
        ];
        names.push(match mode {
            Mode::Continuous => ("in_proj", 16),
            Mode::Discrete => ("decoder", 16),
        });
        for (name, r) in chain_gradient_check(&spec, &names) {
            pass &= r.max_rel_error < 1e-4 && r.analytic.iter().any(|&x| x.abs() > 1e-8);
            if name == ALPHA_PARAM {
                alpha_worst = alpha_worst.max(r.max_rel_error);
            } else {
                chain_worst = chain_worst.max(r.max_rel_error);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    outcome(
        pass,
        format!(
            "energy/candidate rel err {energy_worst:.2e} (< 1e-5); K=2 chain: weights {chain_worst:.2e}, \
             alpha {alpha_worst:.2e} (< 1e-4); {secs:.1}s (< 300s)"
        ),
    )
}

/// `0.5 * ||x - c||^2` per position.
struct Quadratic {
    target: Tensor,
}

impl EnergyFn for Quadratic {
    fn energies(&self, x: &Tensor) -> ebwm::Result<Tensor> {
        Ok(x.sub(&self.target)?
            .square()?
            .sum_axis(2, false)?
            .mul_scalar(0.5)?)
    }
}

fn run_quadratic(x0: &NdArray, target: &NdArray, alpha: f64, steps: usize) -> (NdArray, Vec<f64>) {
    let cfg = McmcConfig {
        steps,
        clamp: None,
        alpha_learnable: false,
        noise_scale: 0.0,
        alpha_init: alpha,
        ..McmcConfig::paper_cv()
    };
    let e = Quadratic {
        target: Tensor::constant(target.clone()),
    };
    let out = refine(
        &e,
        &Tensor::constant(x0.clone()),
        &StepSize::constant(alpha, 0.0),
        &cfg,
        &RefineOptions::inference(0).with_final_energies(true),
    )
    .unwrap();
    let mut energies: Vec<f64> = out.trace.steps.iter().map(|s| s.mean_energy).collect();
    energies.push(out.trace.last_mean_energy().unwrap());
    (out.candidate.value().clone(), energies)
}

fn mcmc_analytics() -> Outcome {
    let x0 = rand_arr(&[3, 5, 7], 41);
    let target = rand_arr(&[3, 5, 7], 42);
    let mut notes = Vec::new();

    let (one, e1) = run_quadratic(&x0, &target, 1.0, 1);
    let err = one.max_abs_diff(&target);
    let one_step = err <= 4.0 * f64::EPSILON && e1[0] > 0.0;
    notes.push(format!("alpha=1: |x1 - c| = {err:.1e} after one step"));

    let mut decreasing = true;
    for alpha in [0.01, 0.5, 1.5, 1.99] {
        let (_, e) = run_quadratic(&x0, &target, alpha, 20);
        let ok = e.len() == 21 && e.windows(2).all(|w| w[1] < w[0]);
        decreasing &= ok;
        if !ok {
            notes.push(format!(
                "alpha={alpha}: energies not strictly decreasing {e:?}"
            ));
        }
    }
    notes.push("alpha in {0.01, 0.5, 1.5, 1.99}: 20 steps strictly decreasing".into());

    let (zero, _) = run_quadratic(&x0, &target, 0.0, 20);
    let identity = zero.bit_eq(&x0);
    notes.push(format!("alpha=0 bit-exact identity: {identity}"));
    outcome(one_step && decreasing && identity, notes.join("; "))
}

fn scalar(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::constant(NdArray::new(shape, v.to_vec()).unwrap())
}

fn loss_formulas() -> Outcome {
    let mut worst = 0.0f64;
    let mut exact = true;
    for (diff, want) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5)] {
        let v = smooth_l1(&scalar(&[diff], &[1]), &scalar(&[0.0], &[1]), 1.0)
            .unwrap()
            .item()
            .unwrap();
        exact &= v == want;
        worst = worst.max((v - want).abs());
    }
    for (e, want) in [(0.5, 0.0), (1.2, 0.2), (-0.3, 0.3)] {
        let v = bounds_loss(&scalar(&[e], &[1])).unwrap().item().unwrap();
        // max(0, e - 1) + max(0, -e) evaluated in f64
        let formula = (e - 1.0f64).max(0.0) + (-e).max(0.0);
        exact &= v == formula;
        worst = worst.max((v - want).abs());
    }
    for (other, want) in [([1.0, 0.0], 0.0), ([-1.0, 0.0], 1.0), ([0.0, 1.0], 0.5)] {
        let v = energy_label(&scalar(&[1.0, 0.0], &[1, 2]), &scalar(&other, &[1, 2]))
            .unwrap()
            .value()
            .data()[0];
        exact &= v == want;
        worst = worst.max((v - want).abs());
    }
    outcome(
        exact && worst <= 1e-15,
        format!("all nine values equal the formulas evaluated in f64; max deviation from decimal targets {worst:.1e}"),
    )
}

fn schedule() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for (base, eff, want) in [(2e-4, 192, 1.5e-4), (6e-4, 384, 9e-4)] {
        let s = scaled_lr(base, eff);
        let ulps = (s - want).abs() / (want * f64::EPSILON);
        pass &= ulps <= 1.0;
        notes.push(format!(
            "scaled({base:e}, {eff}) = {s:e} ({ulps:.0} ulp from {want:e})"
        ));
        let (warmup, total) = (10_000, 100_000);
        let at = |step| lr_at_step(step, s, warmup, 20.0, 10.0, total).unwrap();
        let ends = at(0) == s / 20.0 && at(warmup) == s && at(total) == s / 10.0;
        pass &= ends;
        notes.push(format!("endpoints exact: {ends}"));
    }
    outcome(pass, notes.join("; "))
}

/// E[SmoothL1(X)] for X ~ N(0, var), beta = 1, by composite Simpson.
fn expected_smooth_l1(var: f64) -> f64 {
    let s = var.sqrt();
    let (a, n) = (12.0 * s, 20_000);
    let h = 2.0 * a / n as f64;
    let f = |x: f64| {
        let l = if x.abs() < 1.0 {
            0.5 * x * x
        } else {
            x.abs() - 0.5
        };
        l * (-0.5 * x * x / var).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    };
    let mut acc = f(-a) + f(a);
    for i in 1..n {
        acc += f(-a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn toy_run(family: Family, mode: Mode) -> (f64, f64, usize, f64) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = into_dir(TrainConfig::toy(family, mode), dir.path());
    let start = Instant::now();
    let s = train(cfg).unwrap();
    let e = s.final_eval.expect("final evaluation");
    (
        e.loss,
        e.copy_baseline_score,
        s.steps,
        start.elapsed().as_secs_f64(),
    )
}

fn continuous_beats_copy() -> Outcome {
    let gamma = match TrainConfig::toy(Family::Ebwm, Mode::Continuous).data {
        DataSpec::Continuous { gamma, .. } => gamma,
        DataSpec::Text { .. } => unreachable!(),
    };
    let floor = expected_smooth_l1(1.0 - gamma * gamma) / expected_smooth_l1(2.0 * (1.0 - gamma));
    let mut pass = true;
    let mut notes = Vec::new();
    let mut total = 0.0;
    for family in [Family::Ebwm, Family::Baseline] {
        let (val, copy, steps, secs) = toy_run(family, Mode::Continuous);
        let ratio = val / copy;
        pass &= ratio < 0.9;
        total += secs;
        notes.push(format!(
            "{family:?}: val {val:.4} / copy {copy:.4} = {ratio:.3} after {steps} steps"
        ));
    }
    pass &= total < 1800.0;
    notes.push(format!(
        "required < 0.900; best achievable (Bayes-optimal predictor) ratio {floor:.3}; {total:.0}s"
    ));
    outcome(pass, notes.join("; "))
}

fn discrete_beats_unigram() -> Outcome {
    let cfg = TrainConfig::toy(Family::Ebwm, Mode::Discrete);
    let bytes = match &cfg.data {
        DataSpec::Text {
            corpus: None,
            generated_bytes,
            corpus_seed,
            ..
        } => generate_corpus(*generated_bytes, *corpus_seed),
        other => panic!("toy text preset uses a generated corpus, got {other:?}"),
    };
    let mut counts = [0usize; 256];
    for &b in &bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| -(c as f64 / n) * (c as f64 / n).ln())
        .sum();
    let mut pass = true;
    let mut notes = vec![format!(
        "{} byte corpus, unigram entropy {entropy:.4} nats",
        bytes.len()
    )];
    let mut total = 0.0;
    for family in [Family::Ebwm, Family::Baseline] {
        let (val, _, steps, secs) = toy_run(family, Mode::Discrete);
        pass &= val < entropy;
        total += secs;
        notes.push(format!("{family:?}: val CE {val:.4} after {steps} steps"));
    }
    pass &= total < 2700.0;
    notes.push(format!("{total:.0}s"));
    outcome(pass, notes.join("; "))
}

fn ablation_suite() -> Outcome {
    let base = TrainConfig::load(&configs_dir().join("smoke.json"), &[]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = run_ablation_suite(&base, dir.path()).unwrap();
    let report =
        dir.path().join("ablation.md").exists() && dir.path().join("ablation.json").exists();
    let all = r
        .rows
        .iter()
        .find(|x| x.name == "All Specified Design Choices")
        .unwrap();
    let completed = r.rows.iter().filter(|x| x.error.is_none()).count();
    let agree = r.rows.iter().filter(|x| x.agrees_with_paper()).count();
    outcome(
        r.rows.len() == 8 && completed == 8 && report && !all.diverged && all.error.is_none(),
        format!(
            "{completed}/8 rows completed, report written: {report}, all-defaults diverged: {}, \
             agreement with the paper's marks on {agree}/8 rows (reported only)",
            all.diverged
        ),
    )
}

fn determinism() -> Outcome {
    let config = configs_dir().join("smoke.json");
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_ebwm"))
            .arg("train")
            .arg(&config)
            .env("EBWM_OUT_DIR", dir.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::read(dir.path().join("metrics.csv")).unwrap()
    };
    let (a, b) = (run(), run());
    outcome(
        a == b && !a.is_empty(),
        format!(
            "two CLI runs of configs/smoke.json: {} and {} bytes, identical: {}",
            a.len(),
            b.len(),
            a == b
        ),
    )
}

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("EBWM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 10] = [
        ("EBT attention oracle equivalence", attention_oracle),
        ("z_o stream equivalence", observed_stream),
        ("gradient correctness", gradients),
        ("MCMC analytics", mcmc_analytics),
        ("loss formulas", loss_formulas),
        ("schedule and scaling rule", schedule),
        ("toy continuous task beats copy", continuous_beats_copy),
        ("toy discrete task beats unigram", discrete_beats_unigram),
        ("ablation suite executes", ablation_suite),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        eprintln!("running criterion {n} ({name})");
        let o = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += !o.pass as usize;
        println!(
            "criterion {n} ({name}): {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
