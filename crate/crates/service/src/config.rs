//! Resolved configuration. Each setting comes from the first of: command
//! line flag, environment variable, JSON config file, built-in default.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use pilot_core::pilot::PilotParams;
use serde::{Deserialize, Serialize};

/// Shape of the JSON config file. Every key is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub output_root: Option<PathBuf>,
    pub denoiser: Option<PathBuf>,
    pub autoencoder: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub workers: Option<usize>,
    pub port: Option<u16>,
    /// Sampler defaults; missing fields keep the built-in values.
    pub defaults: Option<PilotParams>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flags shared by every subcommand. Clap fills them from the environment
/// when the flag is absent.
#[derive(Clone, Debug, Default, Args)]
pub struct GlobalArgs {
    /// JSON config file.
    #[arg(long, global = true, env = "PILOT_CONFIG")]
    pub config: Option<PathBuf>,

    /// Directory that receives runs, sweeps and trained models.
    #[arg(long, global = true, env = "PILOT_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,

    /// Denoiser checkpoint.
    #[arg(long, visible_alias = "model", global = true, env = "PILOT_DENOISER")]
    pub denoiser: Option<PathBuf>,

    /// Autoencoder checkpoint.
    #[arg(long, global = true, env = "PILOT_AUTOENCODER")]
    pub autoencoder: Option<PathBuf>,

    /// Oracle classifier checkpoint.
    #[arg(long, global = true, env = "PILOT_ORACLE")]
    pub oracle: Option<PathBuf>,

    /// Concurrent jobs in the server, and threads in a sweep.
    #[arg(long, global = true, env = "PILOT_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub output_root: PathBuf,
    pub denoiser: PathBuf,
    pub autoencoder: PathBuf,
    pub oracle: PathBuf,
    pub workers: usize,
    pub port: u16,
    pub defaults: PilotParams,
}

pub const DEFAULT_OUTPUT_ROOT: &str = "pilot-out";
pub const DEFAULT_PORT: u16 = 8080;

impl Config {
    pub fn resolve(args: &GlobalArgs) -> anyhow::Result<Self> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        Ok(Self::merge(args, file))
    }

    pub fn merge(args: &GlobalArgs, file: FileConfig) -> Self {
        let output_root = args
            .output_root
            .clone()
            .or(file.output_root)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        let models = output_root.join("models");
        Self {
            denoiser: args
                .denoiser
                .clone()
                .or(file.denoiser)
                .unwrap_or_else(|| models.join("denoiser.safetensors")),
            autoencoder: args
                .autoencoder
                .clone()
                .or(file.autoencoder)
                .unwrap_or_else(|| models.join("autoencoder.safetensors")),
            oracle: args
                .oracle
                .clone()
                .or(file.oracle)
                .unwrap_or_else(|| models.join("oracle.safetensors")),
            workers: args.workers.or(file.workers).unwrap_or(1).max(1),
            port: file.port.unwrap_or(DEFAULT_PORT),
            defaults: file.defaults.unwrap_or_default(),
            output_root,
        }
    }
}
