//! `layerprobe` command line.
//!
//! Every command validates its inputs, records a manifest (with input
//! hashes) before computing, writes its reports and exits 0. Failures print
//! one JSON line on stderr, `{"error":<kind>,"code":<n>,"message":...}`, and
//! exit with the code of that kind.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use layerprobe::Error;

pub use commands::selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INVALID: i32 = 4;
pub const EXIT_MANIFEST: i32 = 5;
pub const EXIT_COMPUTE: i32 = 6;
pub const EXIT_SELFTEST: i32 = 7;

#[derive(Debug, Parser)]
#[command(name = "layerprobe", version, about = "Edge probing and MDL probing over layer-wise span activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Balance and split a record file (or the labels of an activation file).
    Prep(PrepArgs),
    /// Seed-averaged edge-probing accuracy on the test split.
    Edge(RunArgs),
    /// Online-coding MDL on the train split.
    Mdl(RunArgs),
    /// Layer-wise MDL compression curve.
    MdlLayers(RunArgs),
    /// Source x target transfer matrix, pretrained and randomized.
    Transfer(TransferArgs),
    /// Merge result directories and re-emit reports.
    Report(ReportArgs),
    /// Gradient check and small-instance MDL oracle.
    Selftest(SelftestArgs),
    /// Write a synthetic activation file.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct PrepArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    #[arg(long = "train-size")]
    train_size: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `mix`, one layer index, or (for mdl-layers) a comma list of layers.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long = "train-size")]
    train_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long = "weights-mode")]
    weights_mode: Option<String>,
}

#[derive(Debug, Args)]
struct TransferArgs {
    /// Run manifest: `{"inputs": [{dataset, lang, encoder, weights_mode, activations, splits}, ...]}`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long = "train-size")]
    train_size: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Result directories (each holding results.json).
    #[arg(long = "in", value_delimiter = ',', required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    examples: usize,
    #[arg(long = "num-layers", default_value_t = 13)]
    num_layers: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long = "signal-layer")]
    signal_layer: Option<usize>,
    #[arg(long = "signal-strength", default_value_t = 0.0)]
    signal_strength: f64,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    #[arg(long = "weights-mode", default_value = "pretrained")]
    weights_mode: String,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long, default_value = "xx")]
    lang: String,
}

/// Error kind and exit code.
fn classify(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Io { .. } => ("io", EXIT_IO),
        Error::ManifestMismatch(_) => ("manifest", EXIT_MANIFEST),
        Error::NonFiniteLoss { .. } | Error::Portion { .. } | Error::Layer { .. } => ("compute", EXIT_COMPUTE),
        Error::Format(_) | Error::Corrupt { .. } => ("format", EXIT_INVALID),
        _ => ("invalid", EXIT_INVALID),
    }
}

fn report_error(kind: &str, code: i32, message: &str) -> i32 {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message });
    eprintln!("{line}");
    code
}

/// Parses `argv` (program name first), runs the command, returns the exit
/// code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return report_error("usage", EXIT_USAGE, first);
        }
    };
    let outcome = match cli.command {
        Command::Prep(a) => commands::prep(&a),
        Command::Edge(a) => commands::edge(&a),
        Command::Mdl(a) => commands::mdl(&a),
        Command::MdlLayers(a) => commands::mdl_layers(&a),
        Command::Transfer(a) => commands::transfer(&a),
        Command::Report(a) => commands::report(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Selftest(a) => {
            return match commands::selftest(&a.seeds) {
                Ok(summary) if summary.passed() => {
                    println!("{}", summary.render());
                    EXIT_OK
                }
                Ok(summary) => {
                    println!("{}", summary.render());
                    report_error("selftest", EXIT_SELFTEST, "self-test failed")
                }
                Err(e) => {
                    let (kind, code) = classify(&e);
                    report_error(kind, code, &e.to_string())
                }
            }
        }
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (kind, code) = classify(&e);
            report_error(kind, code, &e.to_string())
        }
    }
}
