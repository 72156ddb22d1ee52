//! `hcim`: batch experiments on the hybrid CIM simulator.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 1 runtime failure.
//! Failures also print one JSON object `{"error": {"kind", "message", "exit_code"}}`
//! as the last line on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "hcim", version, about = "Hybrid digital/analog CIM macro simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one random MAC job and write its full trace as JSON.
    Mac(MacArgs),
    /// SNR, energy and makespan per boundary (CSV).
    SnrSweep(SnrArgs),
    /// Search the boundary thresholds against the configured loss targets.
    Calibrate(ConfigArgs),
    /// Run the test set through the simulator and write an inference report.
    Infer(InferArgs),
    /// Per-pixel boundary map of one convolutional layer (PGM and CSV).
    SaliencyMap(SaliencyArgs),
    /// Accuracy versus energy for fixed boundaries and the saliency-aware mode (CSV).
    Report(ReportArgs),
    /// Re-run the fits behind the shipped noise level and energy costs.
    FitDefaults(FitArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Fixed,
    Osa,
}

#[derive(Args)]
struct MacArgs {
    /// Macro settings from an experiment config; built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    boundary: Option<usize>,
    /// Columns in use (at most the macro width).
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SnrArgs {
    #[arg(long, default_value_t = 8)]
    w: u8,
    #[arg(long, default_value_t = 8)]
    a: u8,
    #[arg(long, default_value_t = 2)]
    s: usize,
    /// Inclusive range `lo..hi` or a comma list.
    #[arg(long, default_value = "5..10")]
    boundaries: String,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    adc_bits: Option<u8>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Overrides the config mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Boundary for `--mode fixed`.
    #[arg(long)]
    boundary: Option<usize>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Test image index.
    #[arg(long, default_value_t = 0)]
    image: usize,
    /// Layer index in the network (must be a conv layer).
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Use a synthetic bright square on a dark background instead of a test image.
    #[arg(long)]
    synthetic_square: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Fixed boundaries to include, `lo..hi` or a comma list.
    #[arg(long, default_value = "0..11")]
    boundaries: String,
}

#[derive(Args)]
struct FitArgs {
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let msg = e.kind().to_string();
            commands::report_failure("usage", &msg, 2);
            return ExitCode::from(2);
        }
    };
    if let Err(e) = commands::init_threads() {
        commands::report_failure("usage", &format!("{e:#}"), 2);
        return ExitCode::from(2);
    }
    let res = match cli.cmd {
        Cmd::Mac(a) => commands::mac(a),
        Cmd::SnrSweep(a) => commands::snr_sweep(a),
        Cmd::Calibrate(a) => commands::calibrate(a),
        Cmd::Infer(a) => commands::infer(a),
        Cmd::SaliencyMap(a) => commands::saliency(a),
        Cmd::Report(a) => commands::report(a),
        Cmd::FitDefaults(a) => commands::fit_defaults(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = commands::classify(&e);
            commands::report_failure(kind, &format!("{e:#}"), code);
            ExitCode::from(code)
        }
    }
}
