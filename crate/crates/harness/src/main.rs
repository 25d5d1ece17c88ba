use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ringlab_harness::stages::{run_all, run_stage};
use ringlab_harness::{resolve_config, Result, Run, Stage};

#[derive(Parser)]
#[command(name = "ringlab", version, about = "Watermark removal experiments on a toy latent diffusion model")]
struct Cli {
    /// TOML experiment config; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config override such as `attack.steps=50`; repeatable.
    #[arg(long = "stage-override", global = true, value_name = "KEY=VALUE")]
    stage_override: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the corpus into disjoint seeded parts.
    Prepare,
    /// Train one model family.
    Train {
        #[arg(value_enum)]
        target: Target,
    },
    /// Generate watermarked and clean image sets.
    Generate,
    /// Run the attack grid.
    Attack,
    /// Score every attacked set.
    Evaluate,
    /// Write tables and figures.
    Report,
    /// Run every stage in order.
    All,
    /// Print the resolved config.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Diffusion,
    Codec,
    Surrogate,
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(cli.config.as_deref(), cli.seed, cli.out, &cli.stage_override)?;
    if matches!(cli.command, Command::ShowConfig) {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let run = Run::new(cfg)?;
    let stage = match cli.command {
        Command::Prepare => Stage::Prepare,
        Command::Train { target: Target::Codec } => Stage::TrainCodec,
        Command::Train { target: Target::Diffusion } => Stage::TrainDiffusion,
        Command::Train { target: Target::Surrogate } => Stage::TrainSurrogate,
        Command::Generate => Stage::Generate,
        Command::Attack => Stage::Attack,
        Command::Evaluate => Stage::Evaluate,
        Command::Report => Stage::Report,
        Command::All => {
            run_all(&run)?;
            return Ok(());
        }
        Command::ShowConfig => unreachable!(),
    };
    let m = run_stage(&run, stage)?;
    println!("{}: {} files under {}", m.stage, m.files.len(), run.root.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
