//! `metainv` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use metainv_core::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  invalid command line
  3  file missing or unreadable/unwritable
  4  malformed or inconsistent configuration
  5  malformed data file
  6  image/sinogram/geometry mismatch
  7  numerical failure (non-finite values, divergence)
  8  invalid argument value

Environment:
  METAINV_THREADS  cap on worker threads (default: all cores)";

#[derive(Parser)]
#[command(name = "metainv", version, about = "Sparse-view CT: phantoms, projection, FBP, HQS-CG and the unrolled network", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PhantomKind {
    SheppLogan,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Hqscg,
    Metainv,
}

#[derive(Subcommand)]
pub enum Command {
    /// Render a phantom image.
    Phantom {
        #[arg(long, value_enum)]
        kind: PhantomKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a 16-bit PGM preview.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Simulate a (noisy) sinogram from an image.
    Project {
        #[arg(long)]
        img: PathBuf,
        #[arg(long)]
        geom: PathBuf,
        /// `I0[,sigma_e[,seed]]`; omit for noiseless data.
        #[arg(long)]
        noise: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` overrides applied after the config file.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Filtered backprojection.
    Fbp {
        #[arg(long)]
        sino: PathBuf,
        #[arg(long)]
        geom: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Iterative reconstruction with HQS-CG or the unrolled network.
    Reconstruct {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        sino: PathBuf,
        #[arg(long)]
        geom: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Weight checkpoint (metainv only; zero weights when omitted).
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write every layer/outer iterate as `layer_NN.tns`.
        #[arg(long)]
        dump_layers: Option<PathBuf>,
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Train the network on generated phantoms.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        /// Per-epoch loss log (`epoch,loss`).
        #[arg(long)]
        log: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Write a fresh weight checkpoint (seeded init or all zeros).
    InitWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        zero: bool,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// PSNR, SSIM and MS-SSIM of a reconstruction against ground truth.
    Eval {
        #[arg(long)]
        rec: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Peak for PSNR/SSIM (default: ground-truth dynamic range).
        #[arg(long)]
        peak: Option<f64>,
    },
    /// Views × noise grid; writes a CSV of per-cell statistics.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write 0 in the `seconds` column so the file is reproducible.
        #[arg(long)]
        no_timing: bool,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 3,
        Error::Config(_) => 4,
        Error::Format(_) => 5,
        Error::Shape(_) | Error::Geometry(_) => 6,
        Error::NonFinite(_) | Error::Divergence(_) => 7,
        Error::InvalidArgument(_) => 8,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("METAINV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("METAINV_THREADS='{}' is not a positive integer", v)))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("cannot size thread pool: {}", e)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metainv: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
