//! `emai`: train target teams and masking explainers, then explain, evaluate,
//! attack and patch them. Every command except `render` takes a TOML run
//! config and writes its outputs plus a `manifest.json` under
//! `<output>/<command>/`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emai_core::replay::RenderMode;

use emai_cli::commands::{self, Overrides, Run};
use emai_cli::config::load_config;
use emai_cli::error::CliError;

#[derive(Parser)]
#[command(name = "emai", version, about = "Agent-importance explanations for cooperative multi-agent teams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `workers`; 1 is bitwise deterministic.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a learned target team with value-decomposed Q-learning.
    TrainTarget(RunArgs),
    /// Estimate the team's baseline return and train masking agents for it.
    TrainEmai(RunArgs),
    /// Write importance-annotated replays of unperturbed episodes.
    Explain {
        #[command(flatten)]
        run: RunArgs,
        /// Override `eval.explain_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Fidelity of the explainer as a relative reward difference.
    EvalFidelity(RunArgs),
    /// Observation-noise attack on the most critical agent.
    Attack(RunArgs),
    /// Harvest a patch package and apply it to the most critical agent.
    Patch(RunArgs),
    /// Render a replay file as an ASCII grid or CSV.
    Render {
        replay: PathBuf,
        #[arg(long, default_value = "ascii")]
        mode: RenderMode,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn prepare(args: &RunArgs) -> Result<Run, CliError> {
    let loaded = load_config(&args.config)?;
    Run::new(
        loaded,
        &Overrides {
            seed: args.seed,
            workers: args.workers,
            out: args.out.clone(),
        },
    )
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    let manifest = match cmd {
        Command::TrainTarget(a) => commands::train_target_cmd(&prepare(&a)?)?,
        Command::TrainEmai(a) => commands::train_emai_cmd(&prepare(&a)?)?,
        Command::Explain { run, episodes } => commands::explain_cmd(&prepare(&run)?, episodes)?,
        Command::EvalFidelity(a) => commands::eval_fidelity_cmd(&prepare(&a)?)?,
        Command::Attack(a) => commands::attack_cmd(&prepare(&a)?)?,
        Command::Patch(a) => commands::patch_cmd(&prepare(&a)?)?,
        Command::Render { replay, mode, out } => return commands::render_cmd(&replay, mode, out.as_deref()),
    };
    log::info!("{}: {} artifacts", manifest.command, manifest.artifacts.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("emai: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
