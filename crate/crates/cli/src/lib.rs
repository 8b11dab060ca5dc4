//! The `qspace` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors. Every run
//! writes a JSON manifest next to its primary output recording the effective
//! parameters and the tool version.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub mod bvec;
mod commands;
pub mod manifest;
pub mod svg;

pub use bvec::{export_bvec, parse_bvecs};
pub use svg::{plot_dirs_svg, PlotSet};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "QSPACE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] qspace::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "qspace", version, about = "Diffusion-MRI direction design, training, tracking and scoring")]
pub struct Cli {
    /// Worker threads, 0 for all cores. Results do not depend on this.
    #[arg(long, global = true, env = THREADS_ENV, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)] // parsed once per process
pub enum Command {
    /// Electrostatic-repulsion direction set
    Design(DesignArgs),
    /// Synthetic multi-tensor phantom volume and its ground truth
    Phantom(PhantomArgs),
    /// Joint training of acquisition directions and reconstruction
    Train(TrainArgs),
    /// Resample a volume onto new directions, optionally reconstructing back
    Resample(ResampleArgs),
    /// CSA ODF peaks and deterministic streamline tracking
    Track(TrackArgs),
    /// PSNR between a reconstruction and a reference volume
    ScorePsnr(ScorePsnrArgs),
    /// Mean per-bundle Bhattacharyya distance between two tractograms
    ScoreBd(ScoreBdArgs),
    /// Connection scores of a tractogram against the phantom truth
    ScoreConnections(ScoreConnectionsArgs),
    /// FSL-style bvecs/bvals gradient table
    ExportBvec(ExportBvecArgs),
    /// SVG top view of one or two direction sets
    PlotDirs(PlotDirsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Design(_) => "design",
            Command::Phantom(_) => "phantom",
            Command::Train(_) => "train",
            Command::Resample(_) => "resample",
            Command::Track(_) => "track",
            Command::ScorePsnr(_) => "score-psnr",
            Command::ScoreBd(_) => "score-bd",
            Command::ScoreConnections(_) => "score-connections",
            Command::ExportBvec(_) => "export-bvec",
            Command::PlotDirs(_) => "plot-dirs",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DesignArgs {
    /// Number of directions
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    /// Relative energy decrease counted as a stall
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Output direction CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PhantomArgs {
    /// straight, arc, crossing or crossing:<degrees>
    #[arg(long, default_value = "crossing:60")]
    pub preset: String,
    /// Grid size as X,Y,Z
    #[arg(long, default_value = "32,32,32")]
    pub dims: String,
    /// Number of encoding directions (electrostatic design)
    #[arg(long, default_value_t = 60)]
    pub n_dirs: usize,
    /// Use these directions instead of a design
    #[arg(long, conflicts_with = "n_dirs")]
    pub dirs: Option<PathBuf>,
    /// Seed of the direction design
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000.0)]
    pub b_value: f64,
    /// Bundle radius in voxels
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    /// Isotropic voxel size in mm
    #[arg(long, default_value_t = 2.0)]
    pub voxel_size: f64,
    /// Rician noise level relative to b0; omit for a noiseless volume
    #[arg(long)]
    pub snr: Option<f64>,
    /// Noise seed, defaults to --seed
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// Output volume header (.qvol)
    #[arg(long)]
    pub out: PathBuf,
    /// Output ground truth (JSON)
    #[arg(long)]
    pub truth: PathBuf,
}

/// Training keys; each overrides the same key of `--config`.
#[derive(Debug, Default, Args, Serialize)]
pub struct TrainKeys {
    /// Acceleration factor N/n
    #[arg(long)]
    pub af: Option<String>,
    /// fixed or learned
    #[arg(long)]
    pub mode: Option<String>,
    /// identity, sh-interp or linear
    #[arg(long)]
    pub recon: Option<String>,
    #[arg(long)]
    pub lr_recon: Option<String>,
    #[arg(long)]
    pub lr_dirs: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub min_delta: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// SH order of the sub-sampling fit, 0 for automatic
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    /// SH order of sh-interp reconstruction, 0 for automatic
    #[arg(long)]
    pub recon_order: Option<String>,
    #[arg(long)]
    pub recon_lambda: Option<String>,
    /// l2 or mse
    #[arg(long)]
    pub loss: Option<String>,
}

impl TrainKeys {
    pub fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("af", &self.af),
            ("mode", &self.mode),
            ("recon", &self.recon),
            ("lr_recon", &self.lr_recon),
            ("lr_dirs", &self.lr_dirs),
            ("epochs", &self.epochs),
            ("patience", &self.patience),
            ("min_delta", &self.min_delta),
            ("seed", &self.seed),
            ("order", &self.order),
            ("lambda", &self.lambda),
            ("recon_order", &self.recon_order),
            ("recon_lambda", &self.recon_lambda),
            ("loss", &self.loss),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// key = value training config; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: TrainKeys,
    /// Training volumes (full sampling)
    #[arg(long = "train", required = true, num_args = 1..)]
    pub train: Vec<PathBuf>,
    /// Validation volumes; the training set is used when absent
    #[arg(long = "val", num_args = 1..)]
    pub val: Vec<PathBuf>,
    /// Starting directions instead of the mode's default initialization
    #[arg(long)]
    pub init_dirs: Option<PathBuf>,
    /// Directory for directions, parameters, histories and the manifest
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ResampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Directions to resample onto
    #[arg(long)]
    pub dirs: PathBuf,
    /// SH order of the fit, 0 for automatic
    #[arg(long, default_value_t = 0)]
    pub order: usize,
    #[arg(long, default_value_t = qspace::sphere::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Reconstruction parameters (JSON from `train`) applied after resampling
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Reconstruction target directions, defaults to the input's
    #[arg(long, requires = "params")]
    pub target: Option<PathBuf>,
    /// SH order of sh-interp reconstruction, 0 for automatic
    #[arg(long, default_value_t = 0, requires = "params")]
    pub recon_order: usize,
    #[arg(long, default_value_t = qspace::sphere::DEFAULT_LAMBDA, requires = "params")]
    pub recon_lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrackArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// ODF SH order, 0 for the largest the directions support (at most 8)
    #[arg(long, default_value_t = 0)]
    pub order: usize,
    #[arg(long, default_value_t = qspace::sphere::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Step length in voxels
    #[arg(long, default_value_t = 0.5)]
    pub step: f64,
    /// Largest turn per step in degrees
    #[arg(long, default_value_t = 60.0)]
    pub max_angle: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gfa: f64,
    /// Steps per half-track
    #[arg(long, default_value_t = 1000)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub rel_threshold: f64,
    #[arg(long, default_value_t = 25.0)]
    pub min_separation: f64,
    #[arg(long, default_value_t = 3)]
    pub max_peaks: usize,
    /// Phantom truth: seeds in fiber voxels and labels streamlines by bundle.
    /// Without it every voxel above the GFA threshold is a seed.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output tractogram (.qtrk)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScorePsnrArgs {
    /// Reconstructed volume
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference volume; its brain mask is used
    #[arg(long)]
    pub reference: PathBuf,
    /// Report file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreBdArgs {
    #[arg(long)]
    pub candidate: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Phantom truth used to assign both tractograms to bundles
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = qspace::score::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreConnectionsArgs {
    #[arg(long)]
    pub tractogram: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Report file (key/value text)
    #[arg(long)]
    pub out: PathBuf,
    /// Single-row CSV report
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportBvecArgs {
    #[arg(long)]
    pub dirs: PathBuf,
    /// b-value in s/mm²
    #[arg(long, default_value_t = 1000.0)]
    pub b: f64,
    /// Leading b0 columns
    #[arg(long, default_value_t = 1)]
    pub n_b0: usize,
    /// Directory receiving `bvecs` and `bvals`
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotDirsArgs {
    /// One or two direction CSVs
    #[arg(long = "dirs", required = true, num_args = 1..=2)]
    pub dirs: Vec<PathBuf>,
    /// Marker colors, one per set
    #[arg(long = "color", num_args = 1..=2)]
    pub colors: Vec<String>,
    /// Legend labels, one per set
    #[arg(long = "label", num_args = 1..=2)]
    pub labels: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match qspace::par::with_threads(cli.threads, || commands::dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("qspace {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
