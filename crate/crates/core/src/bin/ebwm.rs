use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ebwm::checkpoint;
use ebwm::mcmc::{RefinementTrace, ALPHA_PARAM};
use ebwm::model::{forward_loss, ForwardOptions};
use ebwm::train::ablation::run_ablation_suite;
use ebwm::train::config::apply_override;
use ebwm::train::data::DataSource;
use ebwm::train::metrics::{MetricsRow, MetricsWriter};
use ebwm::train::report::report;
use ebwm::train::{evaluate, train, TrainConfig};
use ebwm::{Error, Family, Mode, Result};

#[derive(Parser)]
#[command(
    name = "ebwm",
    version,
    about = "Energy-based world models: train, evaluate, ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    PaperCvBaseline,
    PaperCvEbwm,
    PaperNlpBaseline,
    PaperNlpEbwm,
    ToyContinuousBaseline,
    ToyContinuousEbwm,
    ToyTextBaseline,
    ToyTextEbwm,
    SmokeContinuous,
    SmokeText,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; trailing key=value pairs override config keys.
    Train {
        config: PathBuf,
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the held-out split of its dataset.
    Eval {
        checkpoint: PathBuf,
        /// Override keys of the embedded config (for example data.corpus=path).
        overrides: Vec<String>,
        /// Metrics file for the evaluation row.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Refine one held-out batch and export the per-step trace as NDJSON.
    RefineDemo {
        checkpoint: PathBuf,
        #[arg(long, default_value = "trace.ndjson")]
        out: PathBuf,
        /// Index of the held-out batch.
        #[arg(long, default_value_t = 0)]
        batch: usize,
        overrides: Vec<String>,
    },
    /// Run the design-choice ablation suite on a base config.
    Ablate {
        config: PathBuf,
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot loss against steps and FLOPs from a metrics file.
    Report {
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an untrained checkpoint for a config.
    Init {
        config: PathBuf,
        overrides: Vec<String>,
    },
    /// Print a preset config as JSON.
    Config { preset: Preset },
}

fn preset(p: Preset) -> TrainConfig {
    use Family::*;
    match p {
        Preset::PaperCvBaseline => TrainConfig::paper_cv_baseline(),
        Preset::PaperCvEbwm => TrainConfig::paper_cv_ebwm(),
        Preset::PaperNlpBaseline => TrainConfig::paper_nlp_baseline(),
        Preset::PaperNlpEbwm => TrainConfig::paper_nlp_ebwm(),
        Preset::ToyContinuousBaseline => TrainConfig::toy(Baseline, Mode::Continuous),
        Preset::ToyContinuousEbwm => TrainConfig::toy(Ebwm, Mode::Continuous),
        Preset::ToyTextBaseline => TrainConfig::toy(Baseline, Mode::Discrete),
        Preset::ToyTextEbwm => TrainConfig::toy(Ebwm, Mode::Discrete),
        Preset::SmokeContinuous => TrainConfig::smoke(Ebwm, Mode::Continuous),
        Preset::SmokeText => TrainConfig::smoke(Ebwm, Mode::Discrete),
    }
}

/// Config embedded in a checkpoint, with overrides applied.
fn checkpoint_config(meta: &Value, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = meta
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("no embedded config".into()))?;
    for o in overrides {
        apply_override(&mut cfg, o)?;
    }
    TrainConfig::from_json(&cfg.to_string())
}

fn print(v: Value) {
    println!("{v}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = TrainConfig::load(&config, &overrides)?;
            let s = train(cfg)?;
            let eval = s.final_eval.as_ref();
            print(json!({
                "steps": s.steps,
                "diverged": s.diverged,
                "final_train_loss": s.losses.last(),
                "val_loss": eval.map(|e| e.loss),
                "val_perplexity_or_mse": eval.map(|e| e.perplexity_or_mse),
                "copy_baseline_score": eval.map(|e| e.copy_baseline_score),
                "cumulative_flops": s.cumulative_flops,
                "metrics": s.metrics_path,
                "checkpoint": s.checkpoint_path,
            }));
        }
        Command::Eval {
            checkpoint: path,
            overrides,
            metrics,
            batches,
        } => {
            let (params, meta) = checkpoint::load(&path)?;
            let cfg = checkpoint_config(&meta, &overrides)?;
            let data = DataSource::new(&cfg)?;
            let spec = cfg.spec();
            let r = evaluate(
                &spec,
                &params,
                &data,
                batches.unwrap_or(cfg.eval_batches),
                cfg.seed,
            )?;
            let step = meta.get("step").and_then(Value::as_u64).unwrap_or(0) as usize;
            let metrics = metrics.unwrap_or_else(|| cfg.resolved_out_dir().join("eval.csv"));
            let mut w = MetricsWriter::create(&metrics)?;
            let mut row = MetricsRow::new(step, "val");
            row.loss = r.loss;
            row.perplexity_or_mse = r.perplexity_or_mse;
            row.copy_baseline_score = r.copy_baseline_score;
            row.mean_first_step_energy = r.mean_first_step_energy;
            row.mean_last_step_energy = r.mean_last_step_energy;
            w.write(&row)?;
            let key = match cfg.model.mode {
                Mode::Discrete => "perplexity",
                Mode::Continuous => "mse",
            };
            print(json!({
                "step": step,
                "loss": r.loss,
                key: r.perplexity_or_mse,
                "copy_baseline_score": r.copy_baseline_score,
                "mean_first_step_energy": r.mean_first_step_energy,
                "mean_last_step_energy": r.mean_last_step_energy,
                "metrics": metrics,
            }));
        }
        Command::RefineDemo {
            checkpoint: path,
            out,
            batch,
            overrides,
        } => {
            let (params, meta) = checkpoint::load(&path)?;
            let cfg = checkpoint_config(&meta, &overrides)?;
            if cfg.family != Family::Ebwm {
                return Err(Error::Config {
                    key: "family".into(),
                    msg: "refine-demo needs an ebwm checkpoint".into(),
                });
            }
            let b = DataSource::new(&cfg)?.val_batch(batch)?;
            let opts = ForwardOptions {
                tape: None,
                seed: cfg.seed,
                final_energies: true,
            };
            let o = forward_loss(&cfg.spec(), &params.constants(), &b, opts)?;
            let trace: RefinementTrace = o.trace.expect("ebwm forward records a trace");
            let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
            trace
                .write_ndjson(std::io::BufWriter::new(file))
                .map_err(|e| Error::io(&out, e))?;
            print(json!({
                "steps": trace.len(),
                "first_mean_energy": trace.first_mean_energy(),
                "last_mean_energy": trace.last_mean_energy(),
                "reconstruction": o.reconstruction,
                "trace": out,
            }));
        }
        Command::Ablate {
            config,
            overrides,
            out,
        } => {
            let cfg = TrainConfig::load(&config, &overrides)?;
            let out = out.unwrap_or_else(|| cfg.resolved_out_dir().join("ablation"));
            let r = run_ablation_suite(&cfg, &out)?;
            print!("{}", r.to_markdown());
            print(json!({
                "rows": r.rows.len(),
                "diverged": r.rows.iter().filter(|x| x.diverged).count(),
                "report": out.join("ablation.md"),
            }));
        }
        Command::Report { metrics, out } => {
            let out =
                out.unwrap_or_else(|| metrics.parent().unwrap_or(Path::new(".")).to_path_buf());
            println!("{}", report(&metrics, &out)?.line());
        }
        Command::Init { config, overrides } => {
            let cfg = TrainConfig::load(&config, &overrides)?;
            let params = cfg.spec().init_params(cfg.seed)?;
            let path = cfg.checkpoint_path();
            checkpoint::save(&path, &params, &json!({ "config": cfg, "step": 0 }))?;
            print(json!({
                "checkpoint": path,
                "params": params.count(),
                "learnable_alpha": params.contains(ALPHA_PARAM),
            }));
        }
        Command::Config { preset: p } => println!("{}", preset(p).to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut line = json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::Config { key, .. } = &e {
                line["key"] = json!(key);
            }
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
