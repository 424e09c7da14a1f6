use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mm3d::cli::{
    cmd_eval, cmd_generate, cmd_param_check, cmd_sweep, cmd_train, cmd_transfer, sweep_csv,
    SweepAxis,
};
use mm3d::config::ExperimentConfig;
use mm3d::detector::{Fusion, Mode};
use mm3d::error::MmError;
use mm3d::phantom::Split;

#[derive(Parser)]
#[command(name = "mm3d", about = "Sparse-proposal cascade detection on synthetic slice stacks")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the pipeline mode (2d|3d|slicewise|mip).
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Override the fusion strategy
    /// (weighted|mean|max|timesform|querysummary|mlpregress).
    #[arg(long, global = true)]
    fusion: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with split assignments.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Load a checkpoint into the configured architecture by name.
    Transfer(TransferArgs),
    /// Compare the parameter manifests of two configurations.
    ParamCheck(ParamCheckArgs),
    /// Train every fusion method across data or annotation fractions.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from `generate`).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path; an epoch log lands next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train|val|test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for report.txt and curve CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    /// Source checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Save the transferred parameters here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamCheckArgs {
    /// Second configuration to compare against --config.
    #[arg(long)]
    other: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// data_fraction | annotation_fraction.
    #[arg(long)]
    axis: String,
    /// Comma-separated fractions in (0, 1].
    #[arg(long)]
    values: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, MmError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        cfg.model.mode = Mode::parse(mode)
            .ok_or_else(|| MmError::Config(format!("unknown mode {mode:?}")))?;
    }
    if let Some(fusion) = &cli.fusion {
        cfg.model.fusion = Fusion::parse(fusion)
            .ok_or_else(|| MmError::Config(format!("unknown fusion {fusion:?}")))?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<i32, MmError> {
    let cfg = load_config(cli)?;
    let gen_seed = cli.seed.unwrap_or(cfg.model.seed);
    match &cli.command {
        Command::Generate(a) => {
            let summary = cmd_generate(&cfg, &a.out, gen_seed, a.force)?;
            print!("{summary}");
            Ok(0)
        }
        Command::Train(a) => {
            let (_, summary) = cmd_train(&cfg, &a.data, &a.out, a.force)?;
            print!("{summary}");
            Ok(0)
        }
        Command::Eval(a) => {
            let split = match a.split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(MmError::Config(format!("unknown split {other:?}"))),
            };
            let (_, text) = cmd_eval(&cfg, &a.ckpt, &a.data, split, a.out.as_deref())?;
            print!("{text}");
            Ok(0)
        }
        Command::Transfer(a) => {
            let (report, text) = cmd_transfer(&cfg, &a.ckpt, a.out.as_deref())?;
            print!("{text}");
            Ok(if report.is_exact() { 0 } else { 1 })
        }
        Command::ParamCheck(a) => {
            let other = ExperimentConfig::load(&a.other)?;
            let (same, text) = cmd_param_check(&cfg, &other)?;
            print!("{text}");
            Ok(if same { 0 } else { 1 })
        }
        Command::Sweep(a) => {
            if a.out.exists() && !a.force {
                return Err(MmError::Config(format!(
                    "{} already exists (use --force to overwrite)",
                    a.out.display()
                )));
            }
            let axis = SweepAxis::parse(&a.axis)
                .ok_or_else(|| MmError::Config(format!("unknown sweep axis {:?}", a.axis)))?;
            let values: Vec<f64> = a
                .values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| MmError::Config(format!("bad sweep value {v:?}")))
                })
                .collect::<Result<_, _>>()?;
            let cells = cmd_sweep(&cfg, &a.data, axis, &values)?;
            let csv = sweep_csv(&cells);
            std::fs::write(&a.out, &csv).map_err(|e| MmError::io(&a.out, e))?;
            print!("{csv}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
