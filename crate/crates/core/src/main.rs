use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rosetta_lab::harness::commands::{
    ablate_command, adapt_command, audit_command, load_config, pretrain_command, sweep_command, RunOptions,
};
use rosetta_lab::Result;

#[derive(Parser)]
#[command(name = "rosetta-lab", version, about = "Open-set test-time adaptation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model on the clean stream and write model.ckpt.
    Pretrain(Common),
    /// Run one adaptation episode over every configured corruption.
    Adapt(Common),
    /// Loss-term ablation: none, csid, csid+ang, csid+ang+norm.
    Ablate(Common),
    /// gamma1 x gamma2 grid and tau line.
    Sweep(Common),
    /// Detector accuracy on source-model outputs.
    AuditDetectors(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `stream.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint instead of pretraining in-process.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Carry adaptation state across corruptions.
    #[arg(long)]
    continual: bool,
}

impl Common {
    fn options(&self) -> Result<RunOptions> {
        let mut config = load_config(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            config.stream.seed = seed;
        }
        if self.continual {
            config.episode.continual = true;
        }
        config.validate()?;
        let mut opts = RunOptions::new(config, &self.out);
        opts.checkpoint.clone_from(&self.checkpoint);
        Ok(opts)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(c) => pretrain_command(&c.options()?).map(drop),
        Command::Adapt(c) => adapt_command(&c.options()?).map(drop),
        Command::Ablate(c) => ablate_command(&c.options()?),
        Command::Sweep(c) => sweep_command(&c.options()?),
        Command::AuditDetectors(c) => audit_command(&c.options()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
