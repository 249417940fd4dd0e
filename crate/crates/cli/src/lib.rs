//! The `hypersurf` command line.
//!
//! Every command prints its results to stdout. Failures print one line
//! `error: <code>: <message>` to stderr and exit with status 1.

/// `println!` that ignores a closed stdout (e.g. output piped into `head`).
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

mod commands;
mod selftest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hypersurf::verify::LayerTarget;
use hypersurf::{DType, Error, Mode};

pub use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "hypersurf", version, about = "Effective-hypersurface reconstruction for piecewise-linear CNNs")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw model (biases, batch norm, multipliers) to the equivalent form.
    Fold(FoldArgs),
    /// Run the forward pass and print the predicted class of each input.
    Forward(ForwardArgs),
    /// Write the effective hypersurfaces of a layer.
    Reconstruct(ReconstructArgs),
    /// Compare reconstructed unit values with the forward pass.
    Verify(VerifyArgs),
    /// Re-render a saved verification report.
    Report(ReportArgs),
    /// Generate a random model from an architecture template.
    GenModel(GenModelArgs),
    /// Generate random images in [0, 1).
    GenInput(GenInputArgs),
    /// Run the built-in oracle checks on small random models.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    /// Raw model manifest.
    #[arg(value_name = "MODEL", required_unless_present = "model")]
    pub positional: Option<PathBuf>,
    #[arg(long, conflicts_with = "positional")]
    pub model: Option<PathBuf>,
    /// Output manifest (default: `<stem>.eq.json` next to the input).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Image file: `.ppm`, or a tensor `[H,W,C]` / `[N,H,W,C]`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
    /// Write the logits as an `[N, classes]` tensor.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Index of the image when the input holds a batch.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Mode,
    /// Conv layer index (`3` or `conv3`) or `fc`.
    #[arg(long, value_parser = parse_layer)]
    pub layer: LayerTarget,
    #[arg(long)]
    pub out_ch: Option<usize>,
    #[arg(long)]
    pub stride_idx: Option<usize>,
    #[arg(long)]
    pub in_ch: Option<usize>,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = hypersurf::adjoint::DEFAULT_K)]
    pub k: f64,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
    /// Stacked `[d_in, axes…]` tensor; the image and bias parts go to
    /// `<stem>.image.abm` and `<stem>.bias.abm` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Images to verify on; random images are drawn when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of random images (ignored with `--input`).
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = hypersurf::adjoint::DEFAULT_K)]
    pub k: f64,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
    /// Restrict to these layers (repeatable).
    #[arg(long, value_parser = parse_layer)]
    pub layer: Vec<LayerTarget>,
    #[arg(long)]
    pub hist_dir: Option<PathBuf>,
    /// Directory for report.json and report.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report.json written by `verify`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub hist_dir: Option<PathBuf>,
    /// Also write report.json/report.csv into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// Template name or path to an architecture JSON file.
    #[arg(long)]
    pub template: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_dtype, default_value = "f64")]
    pub dtype: DType,
    /// Write the equivalent form (plus bias vector) instead of the raw model.
    #[arg(long)]
    pub fold: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenInputArgs {
    /// Take the image shape from this model.
    #[arg(long, required_unless_present = "shape")]
    pub model: Option<PathBuf>,
    /// Image shape `H,W,C`.
    #[arg(long, value_parser = parse_shape, conflicts_with = "model")]
    pub shape: Option<[usize; 3]>,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_dtype, default_value = "f64")]
    pub dtype: DType,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_layer(s: &str) -> Result<LayerTarget, String> {
    if let Ok(l) = s.parse::<usize>() {
        return Ok(LayerTarget::Conv(l));
    }
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|v| format!("expected H,W,C, found {} values", v.len()))
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return 1;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e.message().replace('\n', " "));
            1
        }
    }
}
