use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sarstream::config::RunConfig;
use sarstream::pipeline::{run_stage, Layout, Stage};

/// Streaming semi-autoregressive CTC recognition on synthetic speech.
#[derive(Parser)]
#[command(name = "sarstream", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
    /// Run config; defaults to DIR/run.conf when present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides corpus.seed and train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and external text.
    GenData(Common),
    /// Train the CTC model used for forced alignment.
    TrainNar(Common),
    /// Force-align the training set.
    Align(Common),
    /// Pretrain the LM subnetwork on transcripts plus external text.
    PretrainLm(Common),
    /// Train the SAR model and the CE-trained NAR baseline.
    TrainSar(Common),
    /// Decode the test set with every system and decoder.
    Decode(Common),
    /// Score decode outputs.
    Eval(Common),
    /// Join WER, latency and significance into report.csv and report.txt.
    Report {
        #[command(flatten)]
        common: Common,
        /// Print only the CSV.
        #[arg(long)]
        csv: bool,
    },
}

fn resolve_config(c: &Common) -> sarstream::Result<RunConfig> {
    let default_path = Layout::new(&c.out).config();
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None if Path::new(&default_path).exists() => RunConfig::load(&default_path)?,
        None => RunConfig::default(),
    };
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common, csv) = match &cli.command {
        Command::GenData(c) => (Stage::GenData, c, false),
        Command::TrainNar(c) => (Stage::TrainNar, c, false),
        Command::Align(c) => (Stage::Align, c, false),
        Command::PretrainLm(c) => (Stage::PretrainLm, c, false),
        Command::TrainSar(c) => (Stage::TrainSar, c, false),
        Command::Decode(c) => (Stage::Decode, c, false),
        Command::Eval(c) => (Stage::Eval, c, false),
        Command::Report { common, csv } => (Stage::Report, common, *csv),
    };
    let result = resolve_config(common).and_then(|cfg| run_stage(stage, &cfg, &common.out));
    match result {
        Ok(summary) => {
            if csv {
                match std::fs::read_to_string(Layout::new(&common.out).report_csv()) {
                    Ok(s) => print!("{s}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(1);
                    }
                }
            } else {
                println!("{}: {summary}", stage.name());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
