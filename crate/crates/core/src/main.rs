use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gmmdet::experiment::config::{validate_config, ExperimentConfig};
use gmmdet::experiment::{cmd_attack, cmd_eval, cmd_train, read_report, run_experiment, RunOptions};
use gmmdet::Result;

#[derive(Parser)]
#[command(name = "gmmdet", version, about = "Train, attack and evaluate Gaussian-mixture adversarial detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model (and the transfer surrogate, if needed).
    Train(Common),
    /// Craft adversarial batches against a trained checkpoint.
    Attack(Common),
    /// Score stored adversarial batches and write report.{csv,txt,json}.
    Eval(Common),
    /// Print a previously written report.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// train + attack + eval in one go.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, RunOptions)> {
        let mut cfg = validate_config(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        let opts = RunOptions { workers: self.workers, verbose: !self.quiet, ..RunOptions::from_config(&cfg) };
        Ok((cfg, opts))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, opts) = c.load()?;
            cmd_train(&cfg, &opts)
        }
        Command::Attack(c) => {
            let (cfg, opts) = c.load()?;
            cmd_attack(&cfg, &opts)
        }
        Command::Eval(c) => {
            let (cfg, opts) = c.load()?;
            print!("{}", cmd_eval(&cfg, &opts)?.to_text());
            Ok(())
        }
        Command::Run(c) => {
            let (cfg, opts) = c.load()?;
            print!("{}", run_experiment(&cfg, &opts)?.to_text());
            Ok(())
        }
        Command::Report { common, format } => {
            let (_, opts) = common.load()?;
            let report = read_report(&opts.out_dir)?;
            match format {
                Format::Text => print!("{}", report.to_text()),
                Format::Csv => print!("{}", report.to_csv()),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gmmdet: {e}");
            ExitCode::FAILURE
        }
    }
}
