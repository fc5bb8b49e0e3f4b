use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pilot_core::denoiser::autoencoder::{Autoencoder, AutoencoderConfig};
use pilot_core::denoiser::dataset::{generate_dataset, load_dataset, save_dataset, validation_dataset, ToyImage};
use pilot_core::denoiser::train::{train_autoencoder, train_denoiser, AutoencoderTrainConfig, DenoiserTrainConfig};
use pilot_core::denoiser::unet::{DenoiserModel, UNetConfig};
use pilot_core::schedule::{Schedule, ScheduleSpec};

use crate::config::{Config, GlobalArgs};

#[derive(Debug, Parser)]
#[command(name = "pilot", version, about = "Latent-optimization inpainting on a toy diffusion model")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural dataset to disk.
    GenData(GenDataArgs),
    /// Train the autoencoder.
    TrainAe(TrainAeArgs),
    /// Train the conditional denoiser on autoencoder latents.
    TrainDenoiser(TrainDenoiserArgs),
    /// Train the shape and colour classifier used for scoring.
    TrainOracle(TrainOracleArgs),
    /// Inpaint one image.
    Inpaint(crate::run::InpaintArgs),
    /// Run a parameter sweep over the evaluation cases.
    Sweep(crate::run::SweepArgs),
    /// Serve the HTTP job API.
    Serve(crate::api::ServeArgs),
    /// Print a persisted run.
    ShowRun(crate::run::ShowRunArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    #[default]
    Standard,
    /// Small networks for smoke tests.
    Tiny,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where training images come from: a `gen-data` directory, or generated
/// in memory.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 12_000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 500)]
    pub val_size: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

impl DataArgs {
    pub fn load(&self) -> anyhow::Result<(Vec<ToyImage>, Vec<ToyImage>)> {
        let train = match &self.data {
            Some(dir) => load_dataset(dir)?,
            None => generate_dataset(self.train_size, self.data_seed)?,
        };
        let val = if self.val_size == 0 {
            Vec::new()
        } else {
            validation_dataset(self.val_size, self.data_seed)?
        };
        Ok((train, val))
    }
}

#[derive(Debug, Args)]
pub struct TrainAeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t)]
    pub preset: Preset,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output checkpoint; defaults to the configured autoencoder path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDenoiserArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t)]
    pub preset: Preset,
    /// Continue training this checkpoint instead of starting from scratch;
    /// `--preset` is then ignored.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainOracleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let config = Config::resolve(&cli.global)?;
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainAe(a) => train_ae(&config, &a),
        Command::TrainDenoiser(a) => train_dn(&config, &a),
        Command::TrainOracle(a) => crate::run::train_oracle(&config, &a),
        Command::Inpaint(a) => crate::run::inpaint(&config, &a),
        Command::Sweep(a) => crate::run::sweep(&config, &a),
        Command::Serve(a) => crate::api::serve(config, &a),
        Command::ShowRun(a) => crate::run::show_run(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    let images = generate_dataset(a.n, a.seed)?;
    save_dataset(&a.out, &images)?;
    tracing::info!(n = a.n, out = %a.out.display(), "dataset written");
    Ok(())
}

pub fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn train_ae(config: &Config, a: &TrainAeArgs) -> anyhow::Result<()> {
    let (train, val) = a.data.load()?;
    let mut cfg = AutoencoderTrainConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let ae_cfg = match a.preset {
        Preset::Standard => AutoencoderConfig::default(),
        Preset::Tiny => AutoencoderConfig::tiny(),
    };
    let mut ae = Autoencoder::<f32>::new(ae_cfg, a.seed)?;
    tracing::info!(train = train.len(), val = val.len(), epochs = cfg.epochs, "training autoencoder");
    train_autoencoder(&mut ae, &train, &val, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| config.autoencoder.clone());
    ensure_parent(&out)?;
    let sha = ae.save(&out)?;
    let info = ae.info();
    tracing::info!(out = %out.display(), sha = %sha, metrics = ?info.metrics, seconds = info.seconds, "autoencoder saved");
    println!("{}", serde_json::to_string(&serde_json::json!({ "checkpoint": out, "sha256": sha, "info": info }))?);
    Ok(())
}

fn train_dn(config: &Config, a: &TrainDenoiserArgs) -> anyhow::Result<()> {
    let ae = Autoencoder::<f32>::load(&config.autoencoder)
        .with_context(|| format!("loading autoencoder {}", config.autoencoder.display()))?;
    if !ae.info().trained {
        bail!("autoencoder checkpoint {} is untrained", config.autoencoder.display());
    }
    let (train, val) = a.data.load()?;
    let mut cfg = DenoiserTrainConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let unet_cfg = match a.preset {
        Preset::Standard => UNetConfig::standard(),
        Preset::Tiny => UNetConfig::tiny(),
    };
    let schedule = Schedule::<f32>::new(ScheduleSpec::default())?;
    let mut model = match &a.init {
        Some(p) => DenoiserModel::<f32>::load_trainable(p).with_context(|| format!("loading {}", p.display()))?,
        None => DenoiserModel::<f32>::new(unet_cfg, a.seed)?,
    };
    let prior = model.info().clone();
    tracing::info!(
        train = train.len(),
        epochs = cfg.epochs,
        params = model.parameter_count(),
        "training denoiser"
    );
    train_denoiser(&mut model, &ae, &train, &val, &cfg, &schedule)?;
    if prior.trained {
        let mut info = model.info().clone();
        info.epochs += prior.epochs;
        info.steps += prior.steps;
        info.seconds += prior.seconds;
        model.set_info(info);
    }
    let out = a.out.clone().unwrap_or_else(|| config.denoiser.clone());
    ensure_parent(&out)?;
    let sha = model.save(&out)?;
    let info = model.info();
    tracing::info!(out = %out.display(), sha = %sha, metrics = ?info.metrics, seconds = info.seconds, "denoiser saved");
    println!("{}", serde_json::to_string(&serde_json::json!({ "checkpoint": out, "sha256": sha, "info": info }))?);
    Ok(())
}
