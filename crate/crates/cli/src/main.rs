mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Day-ahead multi-site wind/solar forecasting with spatio-temporal attention.
#[derive(Parser, Debug)]
#[command(name = "mkst", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write the best checkpoint, training log and manifest.
    Train(TrainArgs),
    /// Score a checkpoint on the test split: metrics and trace CSVs.
    Evaluate(EvalArgs),
    /// Write test-split forecasts in physical units.
    Predict(EvalArgs),
    /// Write the learned spatial relation matrix as CSV.
    ExportAttention(ExportArgs),
    /// Render a trace CSV as an SVG plot, one panel per site.
    Plot(PlotArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic spatial-mapping dataset and matching config.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset_config: PathBuf,
    /// Architecture TOML; built-in defaults when omitted.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Optimization TOML; built-in defaults when omitted.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Overrides the seed of the train config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset_config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Restrict the trace to `START..END` (end exclusive).
    #[arg(long)]
    pub span: Option<String>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Trace CSV written by `evaluate`.
    #[arg(long)]
    pub trace: PathBuf,
    /// `START..END`, end exclusive; dates or timestamps.
    #[arg(long)]
    pub span: Option<String>,
    /// Comma-separated site ids; all sites in the trace when omitted.
    #[arg(long, value_delimiter = ',')]
    pub sites: Vec<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Architecture TOML; a tiny built-in one when omitted.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Fraction of parameter entries to probe.
    #[arg(long, default_value_t = 0.05)]
    pub fraction: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub days: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::ExportAttention(a) => commands::export_attention(&a),
        Command::Plot(a) => commands::plot(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 validation, 3 numerical failure, 4 I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mkst_core::Error>() {
            return if e.is_numerical() {
                3
            } else if e.is_io() {
                4
            } else {
                2
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
        if cause.is::<commands::Numerical>() {
            return 3;
        }
    }
    2
}
