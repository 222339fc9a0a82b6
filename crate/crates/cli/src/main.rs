use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowprox_cli::{run, Command, RunArgs, SUMMARY_FILE};

#[derive(Parser)]
#[command(name = "flowprox", version, about = "Proximal OT flow matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "flowprox-out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an MLP vector field with minibatch OT-CFM.
    Train(Common),
    /// Jacobian spectra of the rescaled field along trajectories.
    Spectrum(Common),
    /// Terminal Lyapunov exponents along given directions.
    Lyapunov(Common),
    /// Prox identity, denoiser, non-expansiveness and expansion checks.
    ProxCheck(Common),
    /// Minibatch prox and trajectory convergence tables.
    Converge(Common),
    /// Push noise through a field and compare with held-out data.
    Sample(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Spectrum(c) => (Command::Spectrum, c),
        Cmd::Lyapunov(c) => (Command::Lyapunov, c),
        Cmd::ProxCheck(c) => (Command::ProxCheck, c),
        Cmd::Converge(c) => (Command::Converge, c),
        Cmd::Sample(c) => (Command::Sample, c),
    };
    let args = RunArgs {
        config: common.config,
        out: common.out,
        seed: common.seed,
    };
    let summary = run(cmd, &args);
    for c in &summary.checks {
        println!("{} {}: {}", if c.ok { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(e) = &summary.error {
        eprintln!("error: {e}");
    }
    println!("summary written to {}", args.out.join(SUMMARY_FILE).display());
    ExitCode::from(summary.exit_code() as u8)
}
