//! Flag definitions for every subcommand.

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cxr", version, about = "Chest X-ray screening: training, compression, serving and link simulation")]
pub struct Cli {
    /// Seed for every random choice the command makes
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print one JSON document instead of human-readable text
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier on a labeled directory or synthetic scans
    Train(TrainArgs),
    /// Prune, quantize and entropy-code a model artifact
    Compress(CompressArgs),
    /// Start the central inference server on TCP
    Serve(ServeArgs),
    /// Start the edge daemon and its localhost HTTP API
    Client(ClientArgs),
    /// Replay a scenario script over the simulated dial-up link
    Simulate(SimulateArgs),
    /// Classification report and ROC AUC from a predictions file
    Report(ReportArgs),
    /// Occlusion saliency overlay for one scan
    Heatmap(HeatmapArgs),
    /// Inspect and change the server's model registry
    Registry(RegistryArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    /// Four conv/pool stages and a dense head
    Reference,
    /// Max-pool, flatten and a two-way dense layer
    Small,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["data", "synthetic"])))]
pub struct TrainArgs {
    /// Labeled directory: normal/ and pneumonia/ folders of PGM files, or a scan store
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic disc scans instead of reading --data
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Where to write the model artifact; the report and loss history go next to it
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Network to train from scratch
    #[arg(long, value_enum, default_value_t = Arch::Reference)]
    pub arch: Arch,
    /// Continue from an artifact (.cxrm) or compressed model (.cxrc)
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Version of the new artifact [default: 1, or one above the resumed model]
    #[arg(long = "model-version", value_name = "N")]
    pub model_version: Option<u64>,
    /// Maximum number of epochs
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Epochs without validation improvement before stopping [default: --epochs]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Stop once validation accuracy reaches this fraction
    #[arg(long, value_name = "FRACTION")]
    pub target_accuracy: Option<f64>,
    /// Mini-batch size
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Optimizer step size
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f64,
    /// Optimizer
    #[arg(long, value_enum, default_value_t = Optimizer::Adam)]
    pub optimizer: Optimizer,
    /// Share of the data held out for validation and the final report
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Oversample the training split to this minority/majority ratio
    #[arg(long, value_name = "RATIO")]
    pub rebalance: Option<f64>,
    /// Augmented copies added per training scan
    #[arg(long, value_name = "COPIES", default_value_t = 0)]
    pub augment: usize,
    /// Use --data images as they are instead of gamma-correcting them first
    #[arg(long)]
    pub no_preprocess: bool,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    /// Model artifact (.cxrm)
    pub model: PathBuf,
    /// Output file [default: the input with a .cxrc extension]
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Fraction of dense weights pruned
    #[arg(long, default_value_t = 0.9)]
    pub sparsity: f64,
    /// Fraction of convolution weights pruned
    #[arg(long, default_value_t = 0.0)]
    pub conv_sparsity: f64,
    /// Codebook bits for dense layers
    #[arg(long, default_value_t = 5)]
    pub dense_bits: u8,
    /// Codebook bits for convolution layers
    #[arg(long, default_value_t = 8)]
    pub conv_bits: u8,
    /// Store every weight raw: no pruning, no quantization
    #[arg(long)]
    pub passthrough: bool,
    /// Compare original and decompressed models on this many synthetic scans
    #[arg(long, value_name = "N")]
    pub eval_synthetic: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Server state directory: registry, scan store, held-out set
    #[arg(long, env = "CXR_ROOT", value_name = "DIR")]
    pub root: PathBuf,
    /// Address to listen on
    #[arg(long, env = "CXR_ADDR", default_value = "127.0.0.1:7878")]
    pub addr: String,
    /// Labeled directory frozen as the held-out set on first start
    #[arg(long, value_name = "DIR")]
    pub held_out: Option<PathBuf>,
    /// Publish this artifact before accepting connections
    #[arg(long, value_name = "FILE")]
    pub publish: Option<PathBuf>,
    /// Ship models uncompressed
    #[arg(long)]
    pub passthrough: bool,
    /// Labeled update-batch size that triggers a retrain
    #[arg(long, default_value_t = 100)]
    pub retrain_threshold: usize,
    /// Seconds between checks of the update batch against the threshold
    #[arg(long, value_name = "SECS", default_value_t = 3600)]
    pub retrain_every: u64,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    /// Config file of key = value lines
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Local state directory (overrides the config file)
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Server address host:port (overrides the config file)
    #[arg(long, value_name = "ADDR")]
    pub server: Option<String>,
    /// Address of the localhost HTTP API (overrides the config file)
    #[arg(long, value_name = "ADDR")]
    pub http: Option<String>,
    /// Deployment name prefixed to scan ids (overrides the config file)
    #[arg(long)]
    pub client_id: Option<String>,
    /// Directory of static UI files served at / (overrides the config file)
    #[arg(long, value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("scenario").required(true).args(["script", "reference_week"])))]
pub struct SimulateArgs {
    /// Scenario script
    pub script: Option<PathBuf>,
    /// Run the built-in reference week instead of a script
    #[arg(long)]
    pub reference_week: bool,
    /// Scans per day in the reference week
    #[arg(long, default_value_t = 100)]
    pub scans_per_day: u64,
    /// Artifact handed to each `publish` in order [default: generated small models]
    #[arg(long = "model", value_name = "FILE")]
    pub models: Vec<PathBuf>,
    /// Write the event log here instead of stdout
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Keep server and client state here [default: a temporary directory]
    #[arg(long, value_name = "DIR")]
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Predictions file: one "label score" pair per line, score = P(pneumonia)
    pub predictions: PathBuf,
    /// Scores at or above this are called pneumonia
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Model artifact (.cxrm) or compressed model (.cxrc)
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Scan as a binary PGM
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Overlay PGM to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Class to explain [default: the predicted class]
    #[arg(long)]
    pub class: Option<String>,
    /// Occluding patch side in pixels
    #[arg(long, default_value_t = cxr_core::saliency::DEFAULT_PATCH)]
    pub patch: usize,
    /// Step between patches in pixels
    #[arg(long, default_value_t = cxr_core::saliency::DEFAULT_STRIDE)]
    pub stride: usize,
    /// The image is already 128x128 and gamma-corrected
    #[arg(long)]
    pub no_preprocess: bool,
}

#[derive(Debug, Args)]
pub struct RegistryArgs {
    /// Server state directory
    #[arg(long, env = "CXR_ROOT", value_name = "DIR")]
    pub root: PathBuf,
    /// Ship published models uncompressed
    #[arg(long)]
    pub passthrough: bool,
    #[command(subcommand)]
    pub action: RegistryAction,
}

#[derive(Debug, Subcommand)]
pub enum RegistryAction {
    /// List registered versions and the activation history
    List,
    /// Register an artifact and make it active
    Publish {
        /// Model artifact (.cxrm)
        model: PathBuf,
    },
    /// Make a registered version active
    Activate {
        /// Version number
        version: u64,
    },
    /// Reactivate the previously active version
    Rollback,
    /// Copy public-section scans and a manifest to a directory
    Export {
        /// Destination directory
        dir: PathBuf,
    },
}
