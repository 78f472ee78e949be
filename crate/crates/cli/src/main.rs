mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ckn", version, about = "Exact convolutional kernels: Gram matrices, KRR and theory checks")]
pub struct Cli {
    /// Worker threads for kernel evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for reports, CSV files and run artifacts.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Dataset preparation and synthetic generation.
    #[command(subcommand)]
    Data(DataCmd),
    /// Gram matrix computation and inspection.
    #[command(subcommand)]
    Gram(GramCmd),
    /// Kernel ridge regression.
    #[command(subcommand)]
    Krr(KrrCmd),
    /// Closed-form spectra, bounds and learning curves.
    #[command(subcommand)]
    Theory(TheoryCmd),
    /// Run a property suite; exits nonzero when it fails.
    Verify(VerifyArgs),
    /// Plot-ready CSV files.
    #[command(subcommand)]
    Figures(FigureCmd),
    /// Data preparation, Gram, fit and evaluation in one run.
    Pipeline(RunSource),
}

/// Where the run configuration comes from.
#[derive(Args, Clone)]
pub struct RunSource {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named architecture preset on a CIFAR subset.
    #[arg(long)]
    pub preset: Option<String>,
    /// Training images for `--preset`.
    #[arg(long, default_value_t = 500)]
    pub train: usize,
    /// Test images for `--preset`.
    #[arg(long, default_value_t = 500)]
    pub test: usize,
}

#[derive(Subcommand)]
pub enum DataCmd {
    /// Load, crop and whiten the train/test splits of a run; writes
    /// `train.ckd` and `test.ckd` into `--out`.
    Prep(RunSource),
    /// Product-of-spheres signals labelled by the sign of an invariant target.
    Gen {
        #[arg(long)]
        omega: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long)]
        n: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum GramCmd {
    /// Tiled, resumable Gram matrix of a dataset.
    Compute {
        #[command(flatten)]
        source: RunSource,
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        tile: Option<usize>,
        /// Stop after writing this many tiles (for testing resume).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Eigenvalue decay as CSV.
    Eig {
        #[arg(long)]
        gram: PathBuf,
        #[arg(long, default_value_t = 1000)]
        top: usize,
    },
    /// Checks the tile ledger and checksums of a Gram file.
    Verify {
        #[arg(long)]
        gram: PathBuf,
    },
}

#[derive(Subcommand)]
pub enum KrrCmd {
    /// One-vs-all fit on a Gram file and its labelled dataset.
    Fit {
        #[arg(long)]
        gram: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        lambda: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Scores and predicted classes for a test set as CSV.
    Predict(PredictArgs),
    /// Accuracy of a model on a labelled test set as JSON.
    Eval(PredictArgs),
}

#[derive(Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub source: RunSource,
    #[arg(long)]
    pub model: PathBuf,
    /// Training set the model was fitted on.
    #[arg(long)]
    pub train_data: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FilterArg {
    Dirac,
    Average,
    Gaussian,
}

#[derive(Subcommand)]
pub enum TheoryCmd {
    /// Predicted Mercer spectrum of a one-layer exponential kernel.
    Spectrum {
        #[arg(long, default_value_t = 4)]
        omega: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 0.6)]
        sigma: f64,
        #[arg(long, value_enum, default_value = "gaussian")]
        filter: FilterArg,
        /// Gaussian radius.
        #[arg(long, default_value_t = 1)]
        s: usize,
        #[arg(long, default_value_t = 14)]
        kmax: usize,
        #[arg(long, default_value_t = 40)]
        top: usize,
    },
    /// Two-layer trace bounds with Monte-Carlo estimates; writes bounds.csv.
    Bounds {
        #[arg(long, value_delimiter = ',', default_value = "4,8")]
        omega: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Off-diagonal moment; defaults to the largest of the kernel's moments.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Learning curves for global vs no pooling; writes curves.csv.
    Curves(CurveArgs),
}

#[derive(Args, Clone)]
pub struct CurveArgs {
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    pub omega: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200,400,800")]
    pub n_grid: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 500)]
    pub test: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Suite {
    Oracle,
    Norms,
    Spectrum,
    Bounds,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(value_enum)]
    pub suite: Suite,
    /// Random architectures for `oracle`.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Samples for `spectrum` and `bounds`.
    #[arg(long)]
    pub n: Option<usize>,
    /// Add this to one engine value (`oracle` only) to check detection.
    #[arg(long)]
    pub inject_fault: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EpqInput {
    Dirac,
    Constant,
}

#[derive(Subcommand)]
pub enum FigureCmd {
    /// `E_pq` applied to a Dirac or constant signal; writes epq.csv.
    Epq {
        #[arg(long, default_value_t = 4, allow_hyphen_values = true)]
        p: isize,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        q: isize,
        #[arg(long, default_value_t = 20)]
        omega: usize,
        /// Gaussian radius of the first-layer filter.
        #[arg(long, default_value_t = 1)]
        s: usize,
        #[arg(long, value_enum, default_value = "dirac")]
        input: EpqInput,
        /// Position of the Dirac input.
        #[arg(long, default_value_t = 0)]
        at: usize,
    },
    /// Normalized eigenvalue decay of a Gram file; writes decay.csv.
    Decay {
        #[arg(long)]
        gram: PathBuf,
        #[arg(long, default_value_t = 1000)]
        top: usize,
    },
    /// Same as `theory curves`.
    Curves(CurveArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
