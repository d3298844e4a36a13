use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mal_lab::config::ExperimentConfig;
use mal_lab::pipeline::Lab;

/// Multi-attribution conversion modeling laboratory.
#[derive(Parser)]
#[command(name = "mal", version, about)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Max concurrent (variant, seed) jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Re-run stages even when their artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic journey log.
    Gen,
    /// Split, fit MTA, and materialize weighted samples.
    Attribute,
    /// Train every configured (variant, seed).
    Train,
    /// Evaluate checkpoints on the test split.
    Eval,
    /// Aggregate evaluations into the final report.
    Report,
    /// Run the ablation set (base, mal_no_cat, mal_no_multi_attr, mal)
    /// through the full pipeline.
    Ablate,
    /// Run gradient-fidelity and metric-oracle self-checks.
    Check,
}

fn run(cli: Cli) -> mal_lab::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seeds = vec![seed];
    }
    cfg.validate()?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let mut lab = Lab::new(cfg);
    lab.force = cli.force;
    lab.jobs = cli.jobs.max(1);
    match cli.command {
        None => {
            lab.run_all()?;
        }
        Some(Command::Gen) => lab.cmd_gen()?,
        Some(Command::Attribute) => lab.cmd_attribute()?,
        Some(Command::Train) => lab.cmd_train()?,
        Some(Command::Eval) => lab.cmd_eval()?,
        Some(Command::Report) => {
            let report = lab.cmd_report()?;
            print!("{}", report.render_text());
        }
        Some(Command::Ablate) => {
            let report = lab.run_ablate()?;
            print!("{}", report.render_text());
        }
        Some(Command::Check) => lab.cmd_check()?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
