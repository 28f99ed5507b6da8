//! `sidnet` command-line interface.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sidnet::dataset::GenParams;
use sidnet::nn::Arch;
use sidnet::saliency::Method;

#[derive(Parser, Debug)]
#[command(name = "sidnet", version, about = "Synthetic intensity dataset, small convnets and their interpretation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalArgs {
    /// Directory for all outputs.
    #[arg(long, global = true, env = "SIDNET_OUT_DIR", default_value = "out")]
    #[serde(skip)]
    pub out_dir: PathBuf,
    /// Seed for data, initialization, shuffling and sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Single worker thread unless --threads says otherwise.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON object of flag values; flags given on the command line win.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset file.
    Gen(GenCmd),
    /// Train a network and write a checkpoint.
    Train(TrainCmd),
    /// Evaluate a checkpoint on held-out images.
    Eval(EvalCmd),
    /// Random hyperparameter search.
    Search(SearchCmd),
    /// Intensity-activation profiles.
    Profile(ProfileCmd),
    /// Saliency maps.
    Saliency(SaliencyCmd),
    /// Checkpoint summary and kernel dominance.
    Inspect(InspectCmd),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Search(_) => "search",
            Command::Profile(_) => "profile",
            Command::Saliency(_) => "saliency",
            Command::Inspect(_) => "inspect",
        }
    }
}

const SUBCOMMANDS: [&str; 7] = ["gen", "train", "eval", "search", "profile", "saliency", "inspect"];

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenArgs {
    /// Defaults to 128, or to the checkpoint's input size.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub r_min: usize,
    #[arg(long, default_value_t = 42)]
    pub r_max: usize,
    /// Fewest noise squares per image.
    #[arg(long, default_value_t = 50)]
    pub noise_min: usize,
    #[arg(long, default_value_t = 70)]
    pub noise_max: usize,
    #[arg(long, default_value_t = 1)]
    pub noise_side_min: usize,
    #[arg(long, default_value_t = 9)]
    pub noise_side_max: usize,
}

impl GenArgs {
    pub fn params(&self, seed: u64) -> GenParams {
        GenParams {
            image_size: self.image_size.unwrap_or(128),
            r_min: self.r_min,
            r_max: self.r_max,
            n_min: self.noise_min,
            n_max: self.noise_max,
            w_min: self.noise_side_min,
            w_max: self.noise_side_max,
            seed,
            ..GenParams::default()
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct GenCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    /// Apply the fixed pixel permutation derived from the seed.
    #[arg(long)]
    pub permute: bool,
    /// Also write the first K images as PGM files.
    #[arg(long, value_name = "K", default_value_t = 0)]
    pub export_pgm: usize,
    #[arg(long, default_value = "dataset.sids")]
    pub output: String,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct HyperArgs {
    #[arg(long, default_value = "small")]
    pub arch: Arch,
    /// Training images.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub heldout: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub variance_scale: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Train on pixel-permuted images.
    #[arg(long)]
    pub permuted: bool,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct TrainCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Train on the images of a dataset file instead of generating them.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "model.sidm")]
    pub output: String,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct EvalCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    /// Defaults to model.sidm in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Fail unless the checkpoint has this architecture.
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Generated held-out images when no dataset is given.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long)]
    pub permuted: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct SearchCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct ProfileCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// 1-based; the last index is the output layer.
    #[arg(long, default_value_t = 4)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long)]
    pub all_channels: bool,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..))]
    pub step: u8,
    #[arg(long, default_value_t = 16)]
    pub samples_per_point: usize,
    #[arg(long)]
    pub permuted: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct SaliencyCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "patch_pca")]
    pub method: Method,
    /// Fit a new patch basis and save it before computing maps.
    #[arg(long)]
    pub fit_basis: bool,
    /// Defaults to basis.sidb in the output directory.
    #[arg(long)]
    pub basis: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = sidnet::saliency::DEFAULT_SCALES)]
    pub scales: Vec<usize>,
    #[arg(long, default_value_t = sidnet::saliency::DEFAULT_COMPONENTS)]
    pub components: usize,
    #[arg(long, default_value_t = sidnet::saliency::DEFAULT_MAX_PATCHES)]
    pub max_patches: usize,
    /// Training images the patches are drawn from.
    #[arg(long, default_value_t = 200)]
    pub basis_images: usize,
    /// Test images to explain.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// Explain this class instead of the predicted one.
    #[arg(long)]
    pub class: Option<usize>,
    /// Use plain instead of guided gradients for patch_pca.
    #[arg(long)]
    pub plain: bool,
    #[arg(long)]
    pub permuted: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
#[command(args_override_self = true)]
pub struct InspectCmd {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write kernel dominance statistics.
    #[arg(long)]
    pub kernels: bool,
}

/// Error caused by bad user input; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Turns a JSON object into flag tokens.
fn config_tokens(path: &std::path::Path) -> anyhow::Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let serde_json::Value::Object(map) = value else {
        return Err(UsageError(format!("config {} must be a JSON object", path.display())).into());
    };
    let mut out = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            serde_json::Value::Bool(true) => out.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Number(n) => out.extend([flag.into(), n.to_string().into()]),
            serde_json::Value::String(s) => out.extend([flag.into(), s.into()]),
            serde_json::Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|i| match i {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                out.extend([flag.into(), parts.join(",").into()]);
            }
            serde_json::Value::Object(_) => {
                return Err(UsageError(format!("config key {key:?} must not be an object")).into());
            }
        }
    }
    Ok(out)
}

const VALUE_FLAGS: [&str; 4] = ["--out-dir", "--seed", "--threads", "--config"];

/// Reorders argv to `prog sub <config> <globals before sub> <rest>` so that
/// every explicit flag comes after, and therefore overrides, the config.
fn expand_config(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < strs.len() {
        let a = strs[i].as_str();
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if a == "--config" {
            config = strs.get(i + 1).map(PathBuf::from);
        }
        if sub.is_none() && SUBCOMMANDS.contains(&a) {
            sub = Some(i);
        }
        i += if VALUE_FLAGS.contains(&a) { 2 } else { 1 };
    }
    let (Some(config), Some(sub)) = (config, sub) else {
        return Ok(args);
    };
    let mut out = vec![args[0].clone(), args[sub].clone()];
    out.extend(config_tokens(&config)?);
    out.extend(args[1..sub].iter().cloned());
    out.extend(args[sub + 1..].iter().cloned());
    Ok(out)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<sidnet::Error>() {
        Some(sidnet::Error::Param(_) | sidnet::Error::InvalidLayer { .. } | sidnet::Error::InvalidChannel { .. }) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let threads = g.threads.or(g.deterministic.then_some(1));
    if let Some(n) = threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    std::fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
    let name = cli.command.name();
    let (args, outcome) = match &cli.command {
        Command::Gen(a) => (serde_json::to_value(a)?, commands::gen(g, a)?),
        Command::Train(a) => (serde_json::to_value(a)?, commands::train(g, a)?),
        Command::Eval(a) => (serde_json::to_value(a)?, commands::eval(g, a)?),
        Command::Search(a) => (serde_json::to_value(a)?, commands::search(g, a)?),
        Command::Profile(a) => (serde_json::to_value(a)?, commands::profile(g, a)?),
        Command::Saliency(a) => (serde_json::to_value(a)?, commands::saliency(g, a)?),
        Command::Inspect(a) => (serde_json::to_value(a)?, commands::inspect(g, a)?),
    };
    let path = manifest::write_manifest(g, name, args, outcome)?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
