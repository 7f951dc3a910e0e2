//! Command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use panel_fraud_cnn::config::{parse_config, Overrides};
use panel_fraud_cnn::pipeline::{run, Command};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Synth,
    Prepare,
    Train,
    Tune,
    Eval,
    Explain,
    Baseline,
    Compare,
    All,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Prepare => Command::Prepare,
            Cmd::Train => Command::Train,
            Cmd::Tune => Command::Tune,
            Cmd::Eval => Command::Eval,
            Cmd::Explain => Command::Explain,
            Cmd::Baseline => Command::Baseline,
            Cmd::Compare => Command::Compare,
            Cmd::All => Command::All,
        }
    }
}

/// Panel-data fraud classification with a convolutional network.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    command: Cmd,
    /// JSON config file; absent keys take preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides paths.output).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run seed (overrides seed).
    #[arg(long)]
    seed: Option<u64>,
    /// exante-paper, expost-paper or initial-paper.
    #[arg(long)]
    preset: Option<String>,
    /// Company to explain; repeatable. Overrides explain.companies.
    #[arg(long)]
    company: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let ov = Overrides {
        preset: cli.preset,
        seed: cli.seed,
        output: cli.output,
    };
    let result = parse_config(cli.config.as_deref(), &ov).and_then(|mut cfg| {
        if !cli.company.is_empty() {
            cfg.explain.companies = cli.company;
        }
        run(cli.command.into(), &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
