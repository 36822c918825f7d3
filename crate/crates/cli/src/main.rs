//! `bapgan`: phantom generation, training, ablations, evaluation and the
//! Visual Turing Test service.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "bapgan", version, about = "Bone-age progression GAN workbench")]
pub struct Cli {
    /// JSON configuration file (must carry `format_version`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and batch order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; relative output paths resolve under it.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom bone dataset with known gap widths.
    Phantom(commands::PhantomArgs),
    /// Train one model on a dataset manifest.
    Train(commands::TrainArgs),
    /// Train the four ablation rows and write the FID table.
    Ablate(commands::AblateArgs),
    /// Fréchet distance between real images and reconstructions, noise or
    /// precomputed feature files.
    Fid(commands::FidArgs),
    /// t-SNE of real and synthetic images: CSV plus scatter PNG.
    Tsne(commands::TsneArgs),
    /// Serve the Visual Turing Test HTTP API.
    VttServe(commands::ServeArgs),
    /// Progress or regress images by a number of years.
    Progress(commands::ProgressArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::usage(e.render().to_string().trim_start_matches("error: ").trim_end());
            eprintln!("{f}");
            return ExitCode::from(f.exit_code());
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}
