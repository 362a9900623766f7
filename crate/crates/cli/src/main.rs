//! `vuda` — synthetic-benchmark driver for VAE-shape-prior domain
//! adaptation: data generation, training, adaptation, prediction and the
//! experiment tables.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vuda_core::CoreError;

use commands::Ctx;
use config::Settings;

#[derive(Parser)]
#[command(name = "vuda", version, about = "VAE-guided domain adaptation for 3D segmentation")]
struct Cli {
    /// key = value config file (see README for the schema)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// experiment seed; every random stream derives from it
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// output directory for data, models, tables and manifests
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the four synthetic benchmark splits
    GenData,
    /// Train the source segmenter on labeled source data
    TrainSource,
    /// Train the shape VAE on source ground-truth masks
    TrainVae,
    /// Fine-tune a student on unlabeled target images
    Adapt,
    /// Predict a mask for one image volume
    Predict {
        /// input .vuda image
        #[arg(long)]
        image: PathBuf,
        /// output mask path (defaults under <out>/predictions/)
        #[arg(long)]
        output: Option<PathBuf>,
        /// model name under <out>/models (source or adapted)
        #[arg(long, default_value = "adapted")]
        model: String,
        /// one test-time training step before predicting
        #[arg(long)]
        ttt: bool,
    },
    /// Mean Dice of a model on a labeled split
    Eval {
        #[arg(long, default_value = "target-test")]
        split: String,
        #[arg(long, default_value = "adapted")]
        model: String,
    },
    /// Component ablation table
    Ablate,
    /// Reconstruction-weight sweep
    SweepLambda,
    /// Comparison against baselines and the supervised upper bound
    Compare,
    /// Loss-scatter analysis of pseudo/ground-truth/predicted masks
    AnalyzeLosses,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own message; map all parse failures to usage
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(ce) = cause.downcast_ref::<CoreError>() {
            return match ce {
                CoreError::NonFinite(_) => 3,
                CoreError::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let ctx = Ctx { settings, seed: cli.seed, out: cli.out };
    std::fs::create_dir_all(&ctx.out)?;
    match cli.cmd {
        Cmd::GenData => commands::gen_data(&ctx),
        Cmd::TrainSource => commands::train_source_cmd(&ctx),
        Cmd::TrainVae => commands::train_vae_cmd(&ctx),
        Cmd::Adapt => commands::adapt_cmd(&ctx),
        Cmd::Predict { image, output, model, ttt } => {
            commands::predict_cmd(&ctx, &image, output.as_deref(), &model, ttt)
        }
        Cmd::Eval { split, model } => commands::eval_cmd(&ctx, &split, &model),
        Cmd::Ablate => commands::ablate_cmd(&ctx),
        Cmd::SweepLambda => commands::sweep_lambda_cmd(&ctx),
        Cmd::Compare => commands::compare_cmd(&ctx),
        Cmd::AnalyzeLosses => commands::analyze_losses_cmd(&ctx),
    }
}
