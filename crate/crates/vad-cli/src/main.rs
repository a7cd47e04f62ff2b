//! Pipeline driver. Each subcommand runs one stage into the run directory;
//! `run-all` chains every stage. Exit codes: 0 ok, 2 config error, 3 missing
//! prerequisite, 4 numeric divergence, 1 anything else.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vad_core::config::{load_config, Precision, RunConfig};
use vad_core::error::VadError;
use vad_core::pipeline::{self, Run, Stage, STAGE_ORDER};

const RUN_ROOT_ENV: &str = "VAD_RUN_ROOT";

#[derive(Parser)]
#[command(
    name = "vad",
    about = "Ego-view driving video anomaly detection: flow reconstruction + future-frame prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Run configuration (JSON). Defaults are written by `init-config`.
    #[arg(long)]
    config: PathBuf,
    /// Run directory; relative paths resolve under $VAD_RUN_ROOT when set.
    #[arg(long)]
    run_dir: PathBuf,
    /// Worker threads for parallel stages (flow estimation, scoring).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config precision (f32 or f64).
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration to a file.
    InitConfig {
        path: PathBuf,
        /// Overwrite an existing file.
        #[arg(long, default_value_t = false)]
        force: bool,
    },
    /// Generate the synthetic dataset.
    Gen(StageArgs),
    /// Estimate (or derive) dense optical flow for every scenario.
    Flow(StageArgs),
    /// Stage 1: train the flow-reconstruction autoencoder.
    TrainFlowae(StageArgs),
    /// Stage 2: train the future-frame CVAE on reconstructed flows.
    TrainCvae(StageArgs),
    /// Stage 3: fine-tune both models jointly (or pass through when disabled).
    Finetune(StageArgs),
    /// Compute score-normalization statistics on normal training cubes.
    Calibrate(StageArgs),
    /// Score every test scenario under each box condition and weight variant.
    Score(StageArgs),
    /// Compute AUROC / FPR95 / IoU metrics.
    Eval(StageArgs),
    /// Render the report bundle (CSV tables, ROC points, heatmaps).
    Report(StageArgs),
    /// Run every stage in order.
    RunAll(StageArgs),
}

fn resolve_run_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

fn apply_overrides(mut config: RunConfig, args: &StageArgs) -> Result<RunConfig, VadError> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(precision) = &args.precision {
        config.precision = match precision.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                return Err(VadError::Config(format!(
                    "unknown precision {other} (expected f32 or f64)"
                )))
            }
        };
    }
    config.validate()?;
    Ok(config)
}

fn open_run(args: &StageArgs) -> Result<Run, VadError> {
    if args.jobs > 0 {
        // A failure here means a pool already exists; that is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build_global();
    }
    let config = apply_overrides(load_config(&args.config)?, args)?;
    Run::open(&resolve_run_dir(&args.run_dir), config)
}

fn run_one(args: &StageArgs, stage: Stage) -> Result<(), VadError> {
    let run = open_run(args)?;
    log::info!("running stage {}", stage.name());
    pipeline::run_stage(&run, stage)
}

fn execute(command: &Command) -> Result<(), VadError> {
    match command {
        Command::InitConfig { path, force } => {
            if path.exists() && !force {
                return Err(VadError::Config(format!(
                    "{} already exists (use --force to overwrite)",
                    path.display()
                )));
            }
            let bytes = serde_json::to_vec_pretty(&RunConfig::default())
                .map_err(|e| VadError::Other(format!("serialize default config: {e}")))?;
            std::fs::write(path, bytes).map_err(|e| VadError::io(path.display().to_string(), e))?;
            println!("wrote default config to {}", path.display());
            Ok(())
        }
        Command::Gen(args) => run_one(args, Stage::Gen),
        Command::Flow(args) => run_one(args, Stage::Flow),
        Command::TrainFlowae(args) => run_one(args, Stage::TrainFlowAe),
        Command::TrainCvae(args) => run_one(args, Stage::TrainCvae),
        Command::Finetune(args) => run_one(args, Stage::Finetune),
        Command::Calibrate(args) => run_one(args, Stage::Calibrate),
        Command::Score(args) => run_one(args, Stage::Score),
        Command::Eval(args) => run_one(args, Stage::Eval),
        Command::Report(args) => run_one(args, Stage::Report),
        Command::RunAll(args) => {
            let run = open_run(args)?;
            for stage in STAGE_ORDER {
                log::info!("running stage {}", stage.name());
                pipeline::run_stage(&run, stage)?;
            }
            println!("run complete: {}", run.dir.display());
            Ok(())
        }
    }
}

fn exit_code_for(err: &VadError) -> u8 {
    match err {
        VadError::Config(_) | VadError::Collision { .. } => 2,
        VadError::MissingPrerequisite(_) => 3,
        VadError::Divergence(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
