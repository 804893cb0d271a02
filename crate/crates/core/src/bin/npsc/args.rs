use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "npsc",
    version,
    about = "On-Off pattern and path-count analysis for ReLU CNNs"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat key=value file supplying defaults for any flag (flags win).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Train a model with plain SGD.
    Train(TrainArgs),
    /// Report the accuracy of a model.
    Eval(Common),
    /// Export per-neuron active-path counts for one image.
    Pathcount(PathcountArgs),
    /// Replace layer activations and measure accuracy.
    ReplaceSweep(SweepArgs),
    /// Kendall tau between representations and path counts.
    Correlate(Common),
    /// Saliency map for one image.
    Cam(CamArgs),
    /// MoRF/LeRF degradation curves.
    Degrade(DegradeArgs),
    /// Target-matching accuracy on 2x2 tiled composites.
    Tilematch(TilematchArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ClipModeArg {
    Absolute,
    MeanAbs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 3 conv layers x 8 channels, 10 epochs.
    Desk,
    /// 5 conv layers x 32 channels (64 for 3-channel input), lr 0.001, 100 epochs.
    Reference,
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// IDX image file to analyze (or train on).
    #[arg(long)]
    pub data_images: Option<PathBuf>,
    /// IDX label file matching --data-images.
    #[arg(long)]
    pub data_labels: Option<PathBuf>,
    /// Use generated Gaussian-blob images instead of IDX files.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, default_value_t = 1000)]
    pub synthetic_n: usize,
    #[arg(long, default_value_t = 10)]
    pub synthetic_classes: usize,
    #[arg(long, default_value_t = 28)]
    pub synthetic_size: usize,
    /// Class count for IDX data (labels must be below it).
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Model file; comma-separated list for `correlate` to aggregate across seeds.
    #[arg(long)]
    pub model: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of images drawn (seeded, without replacement) from the data.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, value_enum, default_value_t = ClipModeArg::Absolute)]
    pub clip_mode: ClipModeArg,
    /// FC clip threshold: absolute value, or multiple of mean |w| for mean-abs.
    #[arg(long, default_value_t = 0.0)]
    pub clip_threshold: f64,
    /// Analysis worker threads (results do not depend on this).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// IDX test images for the reported test accuracy.
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub conv_layers: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub no_dropout: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PathcountArgs {
    #[command(flatten)]
    pub common: Common,
    /// Layers to export (comma-separated names or indices); default all.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub image_index: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated replacement kinds.
    #[arg(
        long,
        default_value = "identity,scaled_onoff,scaled_pathcount,signed_scaled_pathcount"
    )]
    pub kinds: String,
    /// Layers to replace (comma-separated); default every ReLU layer.
    #[arg(long)]
    pub layer: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct CamArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "act")]
    pub variant: String,
    #[arg(long, default_value_t = 0)]
    pub image_index: usize,
    /// Target class; defaults to the image label.
    #[arg(long)]
    pub target: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct DegradeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "act")]
    pub variant: String,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Perturbation fill value; defaults to the mean pixel of the data.
    #[arg(long)]
    pub fill: Option<f32>,
}

#[derive(Debug, Args, Serialize)]
pub struct TilematchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "act")]
    pub variant: String,
    /// Number of tiled composites.
    #[arg(long, default_value_t = 500)]
    pub tiles: usize,
    /// Target a randomly permuted tile label (chance-level control).
    #[arg(long)]
    pub shuffle_labels: bool,
}

/// Splices `key=value` pairs from `--config FILE` in front of the explicit
/// flags so that explicit flags override them.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = if let Some(p) = argv[pos].strip_prefix("--config=") {
        p.to_string()
    } else {
        argv.get(pos + 1).cloned().ok_or("--config needs a file")?
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected key=value", n + 1))?;
        let key = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => injected.push(key),
            "false" => {}
            v => {
                injected.push(key);
                injected.push(v.to_string());
            }
        }
    }
    // Insert right after the subcommand so the values bind to its flags.
    let sub = argv
        .iter()
        .enumerate()
        .skip(1)
        .find(|(i, a)| !a.starts_with('-') && !(*i == pos + 1 && !argv[pos].contains('=')))
        .map(|(i, _)| i)
        .ok_or("missing subcommand")?;
    let mut out = argv[..=sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[sub + 1..]);
    Ok(out)
}
