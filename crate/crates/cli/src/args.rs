use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

/// Object removal by redirecting self-attention in a diffusion denoiser.
///
/// Exit codes: 0 success, 2 usage error, 3 invalid input or configuration,
/// 4 runtime failure (I/O, corrupt files, divergence).
#[derive(Debug, Parser)]
#[command(name = "attn-removal", version)]
pub struct Cli {
    /// Flat `key=value` file with defaults for the subcommand's flags
    /// (keys are flag names without dashes; flags on the command line win).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic scene corpus.
    GenData(GenData),
    /// Train a denoiser on a corpus.
    Train(Train),
    /// Remove the masked object from an image.
    Remove(Remove),
    /// Invert an image with DDIM and sample it back.
    Invert(Invert),
    /// Export attention heatmaps and cluster panels for one removal run.
    Analyze(Analyze),
    /// Score removal settings on a corpus.
    Eval(Eval),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    Sip,
    Dip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Default,
    Small,
    Micro,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenData {
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Paint an identical copy of the object into the background.
    #[arg(long)]
    pub twin: bool,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long)]
    pub min_coverage: Option<f64>,
    #[arg(long)]
    pub max_coverage: Option<f64>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct Train {
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Default)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Cosine-anneal the learning rate to `lr·ratio`.
    #[arg(long)]
    pub cosine_to: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Use only the first N scenes.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Debug, Args, Clone)]
pub struct RemovalArgs {
    #[arg(long, value_enum, default_value_t = PipelineArg::Sip)]
    pub pipeline: PipelineArg,
    /// Inference steps (default 40 for sip, 50 for dip).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Similarity suppression runs for step counters ≥ this (default 30 / 40).
    #[arg(long)]
    pub ss_cutoff: Option<usize>,
    /// Removal guidance scale.
    #[arg(long, default_value_t = 9.0)]
    pub s: f64,
    /// Similarity suppression factor.
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 123)]
    pub seed: u64,
    /// Fixed-point refinements per inversion step (dip).
    #[arg(long, default_value_t = 2)]
    pub refine: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct Remove {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub removal: RemovalArgs,
    /// Also save every attention map and latent to `trace.bin`.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct Invert {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 2)]
    pub refine: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct Analyze {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub removal: RemovalArgs,
    /// Token clusters per panel.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Pixels per token in exported figures.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct Eval {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub removal: RemovalArgs,
    /// Vary one setting, e.g. `s=0,3,6,9` or `lambda=0.3,1`.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Evaluate only the first N scenes.
    #[arg(long)]
    pub limit: Option<usize>,
}

pub const SUBCOMMANDS: [&str; 6] = ["gen-data", "train", "remove", "invert", "analyze", "eval"];

/// Config-file problems are input errors, not usage errors.
#[derive(Debug)]
pub struct ConfigFileError(pub String);

/// Inserts the `--config` file's entries as flags right after the
/// subcommand name, so that flags given on the command line (which come
/// later and override earlier occurrences) take precedence.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, ConfigFileError> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let Some(pos) = strs.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let manifest = attn_removal::io::Manifest::load(&path).map_err(|e| ConfigFileError(e.to_string()))?;
    let root = Cli::command();
    let sub = root
        .find_subcommand(&strs[pos])
        .expect("known subcommand")
        .clone();
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in &manifest.entries {
        let long = key.replace('_', "-");
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(long.as_str()))
            .ok_or_else(|| ConfigFileError(format!("{path}: unknown key `{key}` for {}", strs[pos])))?;
        if long == "config" {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(format!("--{long}").into());
            extra.push(value.into());
        } else {
            match value.as_str() {
                "true" => extra.push(format!("--{long}").into()),
                "false" => {}
                _ => return Err(ConfigFileError(format!("{path}: `{key}` must be true or false"))),
            }
        }
    }
    let mut out = argv;
    out.splice(pos + 1..pos + 1, extra);
    Ok(out)
}
