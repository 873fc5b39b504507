use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use upstep::data::{Domain, SynthSpec};

mod commands;
mod config;
mod plot;
mod report;

use config::{RunConfig, SweepSpec};

/// Exit 1 for runtime failures, 2 for usage and config errors.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "config error: {m}"),
            Failure::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<upstep::Error> for Failure {
    fn from(e: upstep::Error) -> Self {
        match e {
            upstep::Error::Validation(_) | upstep::Error::Json(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Parser)]
#[command(name = "upstep", version, about = "Source-free parameter-efficient post-pretraining of a micro ViT")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, value_enum, default_value = "source")]
        domain: DomainArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a base model on the source domain.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Adapt a base checkpoint to the unlabeled target domain.
    Upstep {
        #[arg(long)]
        config: PathBuf,
    },
    /// k-NN / linear evaluation of a base or adapted checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// One run per value of a swept parameter, plus a summary.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Plots and correlation for a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Where to write the plots (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData { classes, per_class, domain, seed, image_size, out } => {
            let domain = match domain {
                DomainArg::Source => Domain::Source,
                DomainArg::Target => Domain::Target,
            };
            commands::gen_data(&SynthSpec { classes, per_class, domain, seed, image_size }, &out)
        }
        Cmd::Pretrain { config } => commands::pretrain(&RunConfig::load(&config)?),
        Cmd::Upstep { config } => commands::upstep(&RunConfig::load(&config)?).map(drop),
        Cmd::Eval { config } => commands::eval(&RunConfig::load(&config)?),
        Cmd::Sweep { spec, parallel } => commands::sweep(&SweepSpec::load(&spec)?, parallel).map(drop),
        Cmd::Report { run, out } => {
            let r = report::report(&run, out.as_ref().unwrap_or(&run))?;
            println!("steps {}, skip rate {:.3}", r.steps, r.skip_rate);
            for p in &r.plots {
                println!("wrote {}", p.display());
            }
            match r.pearson_cv_mag_knn {
                Some(p) => println!("pearson(cv_mag, knn_acc) = {p:.4}"),
                None => println!("pearson(cv_mag, knn_acc) unavailable (needs >= 2 checkpoint evals)"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("upstep: {e}");
            ExitCode::from(match e {
                Failure::Usage(_) => 2,
                Failure::Runtime(_) => 1,
            })
        }
    }
}
