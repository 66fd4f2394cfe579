//! `pxadapt`: generate fixtures, train adapters, localize or segment target
//! slices, score predictions and inspect artifacts.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 for unreadable or
//! invalid input data, 4 for failures inside the pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::error;

use commands::CliError;
use config::{read_config_file, resolve, PartialConfig, RunConfig, OUT_ENV};
use pxadapt::pipeline::Task;

#[derive(Debug, Parser)]
#[command(name = "pxadapt", version, about = "Few-shot region localization over pixel feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scenario (features, masks, intensity images).
    Synth(RunArgs),
    /// Train the classification or contrastive adapter.
    Train(RunArgs),
    /// Localize labelled regions and extract landmarks.
    Localize(RunArgs),
    /// Localize, prompt a refiner and produce segmentation masks.
    Segment(RunArgs),
    /// Score predicted masks against ground truth.
    Eval(RunArgs),
    /// Print the header fields of artifact files.
    Inspect {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML file of config keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    keys: PartialConfig,
}

const RUN_COMMANDS: [&str; 5] = ["synth", "train", "localize", "segment", "eval"];

fn effective_config(args: RunArgs, command: &str) -> Result<RunConfig, CliError> {
    let file = match &args.config {
        Some(path) => read_config_file(path)?,
        None => PartialConfig::default(),
    };
    let out_root = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let config = resolve(args.keys, file, out_root, command);
    config.validate(command)?;
    Ok(config)
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => commands::synth(&effective_config(args, "synth")?),
        Command::Train(args) => commands::train(&effective_config(args, "train")?),
        Command::Localize(args) => commands::run(&effective_config(args, "localize")?, Task::Localize),
        Command::Segment(args) => commands::run(&effective_config(args, "segment")?, Task::Segment),
        Command::Eval(args) => commands::eval(&effective_config(args, "eval")?),
        Command::Inspect { files } => commands::inspect(&files),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let help = config::defaults_help();
    let mut cmd = Cli::command();
    for name in RUN_COMMANDS {
        cmd = cmd.mut_subcommand(name, |sub| sub.after_help(help.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
