use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msda_lab::commands::{dispatch, Command};
use msda_lab::config::{parse_config, parse_weights, Overrides, OUT_ENV};

/// Multimodal multi-source domain adaptation experiments.
#[derive(Debug, Parser)]
#[command(name = "msda-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON config file; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; defaults to $MSDA_LAB_OUT, then `msda-runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long = "tau-ss", global = true)]
    tau_ss: Option<f64>,
    #[arg(long = "tau-pl", global = true)]
    tau_pl: Option<f64>,
    /// Adaptation epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Adaptation loss weights as `γ,α,β`.
    #[arg(long, global = true, value_parser = parse_weights_arg)]
    weights: Option<[f64; 3]>,
    /// Comma-separated target subject ids.
    #[arg(long, global = true, value_delimiter = ',')]
    targets: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark into <out>/data.
    GenData,
    /// Train backbones, heads and estimators on the sources.
    TrainSource,
    /// Score sources against each target and write the selection.
    Select,
    /// Adapt to each target from its selected sources.
    Adapt,
    /// Test accuracy of each adapted model.
    Evaluate,
    /// Lower-bound, blended and fine-tuned baselines.
    Baseline,
    /// Threshold, weight or loss-component ablation.
    Ablate,
    /// Per-sample embeddings of sources and target training rows.
    ExportEmbeddings,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::TrainSource => Command::TrainSource,
            Cmd::Select => Command::Select,
            Cmd::Adapt => Command::Adapt,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Baseline => Command::Baseline,
            Cmd::Ablate => Command::Ablate,
            Cmd::ExportEmbeddings => Command::ExportEmbeddings,
        }
    }
}

fn parse_weights_arg(s: &str) -> Result<[f64; 3], String> {
    parse_weights(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let flags = Overrides {
        seed: cli.seed,
        out: cli.out,
        tau_ss: cli.tau_ss,
        tau_pl: cli.tau_pl,
        epochs: cli.epochs,
        weights: cli.weights,
        targets: cli.targets,
    };
    let env_out = std::env::var(OUT_ENV).ok();
    let cmd = Command::from(cli.command);
    let result = parse_config(cli.config.as_deref(), &flags, env_out.as_deref()).and_then(|cfg| dispatch(cmd, &cfg));
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("msda-lab {cmd}: {e}");
            ExitCode::FAILURE
        }
    }
}
