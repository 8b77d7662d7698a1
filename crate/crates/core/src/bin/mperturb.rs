use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use mperturb::lab::config::ExperimentConfig;
use mperturb::lab::run::{exit_code, run, Command};
use mperturb::spectral::SplitKind;

#[derive(Parser)]
#[command(name = "mperturb", version, about = "Invariant manifolds of parabolic equations under domain perturbation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for run directories (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, 0 for all cores (overrides `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rightmost eigenvalues, classification and projector diagnostics.
    Spectrum,
    /// One local manifold on the limit domain.
    Manifold {
        #[arg(value_enum)]
        kind: Kind,
    },
    /// Manifolds along the domain family and their semidistances.
    Sweep,
    /// The invariant check suite.
    Validate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Unstable,
    Stable,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = load(&cli).and_then(|cfg| {
        let cmd = match cli.command {
            Cmd::Spectrum => Command::Spectrum,
            Cmd::Manifold { kind: Kind::Unstable } => Command::Manifold(SplitKind::Unstable),
            Cmd::Manifold { kind: Kind::Stable } => Command::Manifold(SplitKind::Stable),
            Cmd::Sweep => Command::Sweep,
            Cmd::Validate => Command::Validate,
        };
        run(cmd, &cfg)
    });
    match result {
        Ok(outcome) => {
            println!("{}", outcome.dir.display());
            if outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &outcome.failures {
                    eprintln!("validation failed: {f}");
                }
                ExitCode::from(4)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn load(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}
