use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use hsarnn::harness::{self, gradsuite, AblationConfig, Controller, LoopConfig, DEFAULT_JITTER};
use hsarnn::modelcore::{ModelConfig, Variant};
use hsarnn::stacksim::{parse_positions, Position};
use hsarnn::trainer::{load_checkpoint, save_checkpoint, train_with, write_loss_log, TrainConfig};
use hsarnn::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "hsarnn", version, about = "Visuomotor RNN training and cup-stacking evaluation")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Steps per episode.
    #[arg(long, global = true, default_value_t = 400)]
    steps: usize,
    /// Teaching rate.
    #[arg(long, global = true, default_value_t = 10.0)]
    hz: f64,
    /// Execution speed relative to teaching.
    #[arg(long, global = true, default_value_t = 3.0)]
    speed: f64,
    /// Gaussian pixel noise standard deviation.
    #[arg(long, global = true, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, global = true, default_value_t = 10)]
    trials: usize,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Dataset directory (or trials.json for `plot`).
    #[arg(long, global = true, default_value = "dataset")]
    data: PathBuf,
    /// Checkpoint file or directory.
    #[arg(long, global = true, default_value = "checkpoints")]
    ckpt: PathBuf,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Record teacher demonstrations.
    GenData {
        #[arg(long, default_value = "A,C,E")]
        positions: String,
    },
    /// Train one variant on the taught-position episodes.
    Train {
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
    },
    /// Closed-loop evaluation of one checkpoint.
    Eval {
        #[arg(long, default_value = "A,B,C,D,E")]
        positions: String,
        /// Cup offset half-width in meters.
        #[arg(long, default_value_t = DEFAULT_JITTER)]
        jitter: f64,
        /// Replay the scripted teacher instead of a model.
        #[arg(long)]
        teacher: bool,
    },
    /// Every variant at every position; trains missing checkpoints.
    Ablate {
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = DEFAULT_JITTER)]
        jitter: f64,
        #[arg(long)]
        no_train: bool,
    },
    /// Finite-difference gradient suite.
    Gradcheck,
    /// Redraw trajectory SVGs from a trials.json.
    Plot,
}

/// A file path, or `<dir>/<variant>.hsck` when `path` is a directory.
fn checkpoint_file(path: &Path, variant: Variant) -> PathBuf {
    if path.extension().is_some_and(|e| e == "hsck") {
        path.to_path_buf()
    } else {
        harness::checkpoint_path(path, variant)
    }
}

fn run(cli: &Cli) -> Result<Value> {
    let started = Instant::now();
    let mut summary = match &cli.command {
        Cmd::GenData { positions } => {
            let positions = parse_positions(positions)?;
            let files = harness::generate_dataset(&positions, cli.steps, cli.hz, cli.seed, &cli.data)?;
            json!({ "command": "gen-data", "files": files, "steps": cli.steps, "hz": cli.hz })
        }
        Cmd::Train { epochs } => {
            let variant = cli.variant.unwrap_or(Variant::Hsarnnst);
            let episodes = harness::training_episodes(&cli.data)?;
            let cfg = TrainConfig { epochs: *epochs, seed: cli.seed, ..TrainConfig::default() };
            let (ck, log) = train_with(&episodes, &ModelConfig::new(variant), &cfg, |e| {
                if e.epoch == 1 || e.epoch % 50 == 0 {
                    eprintln!("epoch {} total {:.5}", e.epoch, e.total);
                }
            })?;
            let path = checkpoint_file(&cli.ckpt, variant);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            save_checkpoint(&ck, &path)?;
            let log_path = path.with_file_name(format!("{}_loss.csv", variant.name().to_lowercase()));
            write_loss_log(&log, &log_path)?;
            json!({
                "command": "train",
                "variant": variant,
                "episodes": episodes.len(),
                "epochs": epochs,
                "first_loss": log.first().map(|e| e.total),
                "final_loss": log.last().map(|e| e.total),
                "checkpoint": path,
                "loss_log": log_path,
            })
        }
        Cmd::Eval { positions, jitter, teacher } => {
            let positions = parse_positions(positions)?;
            let loop_cfg = |steps| LoopConfig {
                steps,
                hz: cli.hz,
                speed: cli.speed,
                noise: cli.noise,
                trials: cli.trials,
                seed: cli.seed,
                jitter: *jitter,
            };
            let ck;
            let (controller, cfg, label) = if *teacher {
                (Controller::Teacher, loop_cfg(cli.steps), "teacher".to_string())
            } else {
                let variant = cli.variant.unwrap_or(Variant::Hsarnnst);
                ck = load_checkpoint(&checkpoint_file(&cli.ckpt, variant))?;
                ck.expect_variant(variant)?;
                let steps = harness::training_episodes(&cli.data).map_or(cli.steps, |e| e[0].steps());
                (Controller::from_checkpoint(&ck)?, loop_cfg(steps), variant.to_string())
            };
            let mut results = serde_json::Map::new();
            let mut step_ms = Vec::new();
            for p in positions {
                let trials = harness::run_closed_loop(&controller, p, &cfg)?;
                step_ms.extend(trials.iter().flat_map(|t| t.step_ms.iter().copied()));
                let successes = trials.iter().filter(|t| t.success).count();
                results.insert(p.to_string(), json!({ "successes": successes, "trials": trials.len() }));
            }
            let mean_ms = (!step_ms.is_empty()).then(|| step_ms.iter().sum::<f64>() / step_ms.len() as f64);
            json!({
                "command": "eval",
                "controller": label,
                "speed": cli.speed,
                "noise": cli.noise,
                "results": results,
                "mean_step_ms": mean_ms,
            })
        }
        Cmd::Ablate { epochs, jitter, no_train } => {
            let cfg = AblationConfig {
                variants: cli.variant.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v]),
                positions: Position::ALL.to_vec(),
                speed: cli.speed,
                noise: cli.noise,
                trials: cli.trials,
                seed: cli.seed,
                jitter: *jitter,
                train: TrainConfig { epochs: *epochs, seed: cli.seed, ..TrainConfig::default() },
                allow_train: !no_train,
            };
            let (report, _) = harness::evaluate_ablation(&cli.data, &cli.ckpt, &cli.out, &cfg)?;
            let means: serde_json::Map<String, Value> =
                report.variants().into_iter().map(|v| (v.to_string(), json!(report.mean_rate(v)))).collect();
            json!({
                "command": "ablate",
                "report": cli.out.join("report.csv"),
                "mean_rate": means,
                "trends": report.trends,
            })
        }
        Cmd::Gradcheck => {
            let report = gradsuite::run_grad_suite()?;
            let errors: serde_json::Map<String, Value> =
                report.cases.iter().map(|c| (c.name.clone(), json!(c.max_rel_error))).collect();
            let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            let summary = json!({
                "command": "gradcheck",
                "passed": report.passed(),
                "tolerance": report.tolerance,
                "max_rel_error": errors,
                "failed": failed,
            });
            if !report.passed() {
                println!("{summary}");
                return Err(Error::Input(format!("gradient check failed for {}", failed.join(", "))));
            }
            summary
        }
        Cmd::Plot => {
            let path = if cli.data.is_dir() { cli.data.join("trials.json") } else { cli.data.clone() };
            let sets = harness::read_trial_sets(&path)?;
            let files = harness::report::write_trajectory_svgs(&sets, &cli.out)?;
            json!({ "command": "plot", "files": files })
        }
    };
    summary["seconds"] = json!(started.elapsed().as_secs_f64());
    Ok(summary)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string() }));
            ExitCode::from(1)
        }
    }
}
