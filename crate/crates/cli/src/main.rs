use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use l2d_cli::config::{parse_config, ConfigError, ExperimentConfig};
use l2d_cli::experiments::{
    fit_and_evaluate_conformal, generate_splits, run_experiment, train_system, RunError,
};
use l2d_cli::presets::{get_preset, preset_names};
use l2d_core::calibration::{per_expert_ece_reports, DEFAULT_NUM_BINS};
use l2d_core::dataset_io::save_datasets;
use l2d_core::ensemble::{system_accuracy, DeferralMode};
use l2d_core::loss::LossKind;
use l2d_core::model::{load_model, save_model};

/// Multi-expert learning-to-defer experiments: synthetic tasks, simulated
/// experts, surrogate training, calibration measurement, and conformal
/// expert ensembles. Set L2D_LOG=info for progress output.
#[derive(Parser)]
#[command(name = "l2d", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets (CSV + JSON sidecar) for the configured task and
    /// expert roster, one file pair per seed.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed override, e.g. `--seeds 1,2,3`.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Train one model per configured estimator and seed; writes checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint produced by `train` (or found under an experiment's
        /// checkpoints directory).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the conformal procedures on a checkpoint's deferred pool and
    /// report held-out coverage and set sizes.
    Conformal {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named preset (or a full config file) end to end.
    Repro {
        /// Preset name; see `l2d repro --list`.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Full experiment config instead of a preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
        /// Parallel worker slots for independent seeds.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// List available presets and exit.
        #[arg(long)]
        list: bool,
    },
    /// Parse and validate a config, echoing it canonically.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>, CliError> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| CliError::Config(format!("invalid --seeds entry {s:?}: {e}")))
        })
        .collect()
}

fn load_config(path: &Path, seeds: Option<&String>) -> Result<ExperimentConfig, CliError> {
    let mut config = parse_config(path)?;
    if let Some(raw) = seeds {
        config.seeds = parse_seeds(raw)?;
        if config.seeds.is_empty() {
            return Err(CliError::Config("--seeds override is empty".into()));
        }
    }
    Ok(config)
}

fn ensure_dir(path: &PathBuf) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &PathBuf, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serialize {}: {e}", path.display())))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

fn estimator_of(model: &l2d_core::model::MlpModel) -> l2d_core::deferral::EstimatorKind {
    match model.loss_kind {
        LossKind::Softmax => l2d_core::deferral::EstimatorKind::Softmax,
        LossKind::Ova => l2d_core::deferral::EstimatorKind::Ova,
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { config, out, seeds } => {
            let config = load_config(&config, seeds.as_ref())?;
            if config.experts.is_empty() {
                return Err(CliError::Config(
                    "`gen` needs an explicit expert roster in `experts`".into(),
                ));
            }
            ensure_dir(&out)?;
            for &seed in &config.seeds {
                let (train_set, val_set, test_set) = generate_splits(&config, seed)?;
                let csv = out.join(format!("data-seed{seed}.csv"));
                let sidecar = out.join(format!("data-seed{seed}.json"));
                save_datasets(&csv, &sidecar, &[train_set, val_set, test_set])
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                println!("wrote {} and sidecar", csv.display());
            }
            Ok(())
        }
        Command::Train { config, out, seeds } => {
            let config = load_config(&config, seeds.as_ref())?;
            if config.experts.is_empty() {
                return Err(CliError::Config(
                    "`train` needs an explicit expert roster in `experts`".into(),
                ));
            }
            ensure_dir(&out)?;
            for &seed in &config.seeds {
                for &est in &config.estimators {
                    let (model, test_set) = train_system(&config, est, seed)?;
                    let report =
                        system_accuracy(&model, est, &test_set, &DeferralMode::SingleExpert)
                            .map_err(|e| CliError::Runtime(e.to_string()))?;
                    let path = out.join(format!("model-{}-seed{seed}.ckpt", est.as_str()));
                    save_model(&model, &path).map_err(|e| CliError::Runtime(e.to_string()))?;
                    println!(
                        "wrote {} (test accuracy {:.4}, deferral rate {:.4})",
                        path.display(),
                        report.overall_accuracy,
                        report.deferral_rate
                    );
                }
            }
            Ok(())
        }
        Command::Eval { config, model, out } => {
            let config = load_config(&config, None)?;
            if config.experts.is_empty() {
                return Err(CliError::Config(
                    "`eval` needs an explicit expert roster in `experts`".into(),
                ));
            }
            let model = load_model(&model).map_err(|e| CliError::Runtime(e.to_string()))?;
            model
                .expect_shape(
                    config.task.dim,
                    config.task.num_classes,
                    config.experts.len(),
                )
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let est = estimator_of(&model);
            let seed = config.seeds[0];
            let (_, _, test_set) = generate_splits(&config, seed)?;
            let report = system_accuracy(&model, est, &test_set, &DeferralMode::SingleExpert)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let calibration = per_expert_ece_reports(&model, est, &test_set, DEFAULT_NUM_BINS)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let eces: Vec<f64> = calibration.iter().map(|r| r.ece).collect();
            let avg_ece = eces.iter().sum::<f64>() / eces.len() as f64;
            ensure_dir(&out)?;
            let path = out.join("eval-report.json");
            write_json(
                &path,
                &serde_json::json!({
                    "estimator": est.as_str(),
                    "seed": seed,
                    "system": report,
                    "per_expert_ece": eces,
                    "avg_ece": avg_ece,
                    "calibration": calibration,
                }),
            )?;
            println!(
                "wrote {} (accuracy {:.4}, deferral rate {:.4}, avg ECE {:.4})",
                path.display(),
                report.overall_accuracy,
                report.deferral_rate,
                avg_ece
            );
            Ok(())
        }
        Command::Conformal { config, model, out } => {
            let config = load_config(&config, None)?;
            if config.experts.is_empty() {
                return Err(CliError::Config(
                    "`conformal` needs an explicit expert roster in `experts`".into(),
                ));
            }
            let model = load_model(&model).map_err(|e| CliError::Runtime(e.to_string()))?;
            model
                .expect_shape(
                    config.task.dim,
                    config.task.num_classes,
                    config.experts.len(),
                )
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let est = estimator_of(&model);
            let seed = config.seeds[0];
            let fits = fit_and_evaluate_conformal(&config, &model, est, seed)?;
            ensure_dir(&out)?;
            for (stat, calib, metrics) in &fits {
                let path = out.join(format!("conformal-{stat}.json"));
                write_json(
                    &path,
                    &serde_json::json!({ "fit": calib, "heldout": metrics }),
                )?;
                println!(
                    "wrote {} (coverage {:.4}, mean set size {:.3})",
                    path.display(),
                    metrics.coverage_any_correct,
                    metrics.mean_size
                );
            }
            Ok(())
        }
        Command::Repro {
            preset,
            config,
            out,
            seeds,
            threads,
            list,
        } => {
            if list {
                for name in preset_names() {
                    let p = get_preset(name).expect("listed");
                    println!("{name}: {} (budget {}s)", p.description, p.budget_seconds);
                }
                return Ok(());
            }
            let (mut experiment_config, preset_meta) = match (&preset, &config) {
                (Some(name), None) => {
                    let p = get_preset(name).ok_or_else(|| {
                        CliError::Config(format!(
                            "unknown preset {name:?}; available: {}",
                            preset_names().join(", ")
                        ))
                    })?;
                    (p.config, Some((p.name, p.budget_seconds)))
                }
                (None, Some(path)) => (parse_config(path)?, None),
                _ => {
                    return Err(CliError::Config(
                        "`repro` needs exactly one of --preset or --config".into(),
                    ))
                }
            };
            if let Some(raw) = &seeds {
                experiment_config.seeds = parse_seeds(raw)?;
            }
            experiment_config.validate()?;
            let out_dir = out
                .or_else(|| experiment_config.out_dir.clone())
                .or_else(|| preset.as_ref().map(|p| PathBuf::from("runs").join(p)))
                .ok_or_else(|| {
                    CliError::Config("no output directory (--out or config out_dir)".into())
                })?;
            let summary = run_experiment(&experiment_config, &out_dir, threads, preset_meta)?;
            println!(
                "{}: {} metrics over {} seeds -> {}",
                summary.experiment,
                summary.metrics.len(),
                summary.seeds.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Validate { config } => {
            let config = parse_config(&config)?;
            let canonical = serde_json::to_string_pretty(&config)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{canonical}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("L2D_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(message)) => {
            eprintln!("config error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(3)
        }
    }
}
