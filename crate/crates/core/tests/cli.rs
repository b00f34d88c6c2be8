use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ebwm(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebwm"))
        .args(args)
        .env("EBWM_OUT_DIR", out_dir)
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn stderr_json(o: &Output) -> Value {
    assert!(!o.status.success());
    serde_json::from_str(String::from_utf8_lossy(&o.stderr).trim()).unwrap()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_metrics_and_checkpoint_then_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.json");
    let v = stdout_json(&ebwm(
        &["train", path_arg(&cfg), "max_steps=6", "eval_every=3"],
        dir.path(),
    ));
    assert_eq!(v["steps"], 6);
    assert_eq!(v["diverged"], false);
    let metrics = dir.path().join("metrics.csv");
    assert!(metrics.exists() && dir.path().join("model.ckpt").exists());
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.starts_with("# flops_convention="));
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("step,epoch,split,loss,"));

    let o = ebwm(&["report", path_arg(&metrics)], dir.path());
    assert!(o.status.success());
    let line = String::from_utf8_lossy(&o.stdout);
    assert!(
        line.contains("rows=") && line.contains("min_val_loss="),
        "{line}"
    );
    for f in ["loss_vs_steps.svg", "loss_vs_flops.svg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let trace = dir.path().join("trace.ndjson");
    let ckpt = dir.path().join("model.ckpt");
    let v = stdout_json(&ebwm(
        &["refine-demo", path_arg(&ckpt), "--out", path_arg(&trace)],
        dir.path(),
    ));
    let lines: Vec<Value> = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len() as u64, v["steps"].as_u64().unwrap());
    assert!(lines
        .iter()
        .all(|l| l["mean_energy"].is_number() && l["alpha"].is_number()));
}

#[test]
fn untrained_text_model_scores_near_uniform_perplexity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke-text.json");
    for family in ["baseline", "ebwm"] {
        let fam = format!("family={family}");
        let v = stdout_json(&ebwm(&["init", path_arg(&cfg), &fam], dir.path()));
        assert_eq!(v["learnable_alpha"], family == "ebwm");
        let ckpt = dir.path().join("model.ckpt");
        let v = stdout_json(&ebwm(&["eval", path_arg(&ckpt)], dir.path()));
        let ppl = v["perplexity"].as_f64().unwrap();
        assert!((ppl - 256.0).abs() < 2.0, "{family}: {ppl}");
        assert!(dir.path().join("eval.csv").exists());
    }
}

#[test]
fn malformed_config_reports_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let mut v: Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("smoke.json")).unwrap())
            .unwrap();
    v["optim"]["learning_rate"] = 1.0.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let e = stderr_json(&ebwm(&["train", path_arg(&cfg)], dir.path()));
    assert_eq!(e["error"], "config");
    assert!(
        e["key"].as_str().unwrap().contains("optim.learning_rate"),
        "{e}"
    );

    let e = stderr_json(&ebwm(
        &[
            "train",
            path_arg(&configs().join("smoke.json")),
            "mcmc.steps=0",
        ],
        dir.path(),
    ));
    assert_eq!(e["key"], "mcmc.steps");
}

#[test]
fn missing_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let e = stderr_json(&ebwm(&["train", path_arg(&missing)], dir.path()));
    assert_eq!(e["error"], "io");
    let e = stderr_json(&ebwm(&["eval", path_arg(&missing)], dir.path()));
    assert_eq!(e["error"], "io");
}

#[test]
fn presets_print_loadable_configs() {
    let dir = tempfile::tempdir().unwrap();
    let o = ebwm(&["config", "toy-text-ebwm"], dir.path());
    assert!(o.status.success());
    let path = dir.path().join("toy.json");
    std::fs::write(&path, &o.stdout).unwrap();
    let cfg = ebwm::train::TrainConfig::load(&path, &[]).unwrap();
    assert_eq!(cfg.mcmc.steps, 2);
    assert_eq!(
        cfg,
        ebwm::train::TrainConfig::toy(ebwm::Family::Ebwm, ebwm::Mode::Discrete)
    );
}
