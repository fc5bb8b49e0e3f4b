//! One-shot commands: oracle training, inpainting, sweeps, run inspection.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use pilot_core::denoiser::PromptTokens;
use pilot_core::eval::cases::generate_cases;
use pilot_core::eval::oracle::{train_oracle as fit_oracle, Oracle, OracleConfig, OracleTrainConfig};
use pilot_core::eval::score;
use pilot_core::eval::sweep::{run_sweep, SweepAxis, SweepSpec};
use pilot_core::io::{load_mask_png, ImageRgb};
use pilot_core::pilot::pipeline::{NoObserver, Pipeline};
use pilot_core::pilot::PilotParams;
use pilot_core::record::{load_run, persist_run, RunArtifacts};

use crate::cli::{ensure_parent, TrainOracleArgs};
use crate::config::Config;
use crate::models::{Engine, Models, Precision};

/// Per-flag overrides of the sampler parameters.
#[derive(Clone, Debug, Default, Args)]
pub struct ParamArgs {
    /// JSON file with (a subset of) the sampler parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub lambda_anchor: Option<f64>,
    #[arg(long)]
    pub lr_anchor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Decode reconstructions at each optimization event.
    #[arg(long)]
    pub snapshots: bool,
}

impl ParamArgs {
    /// Config defaults, then the params file, then individual flags.
    pub fn resolve(&self, defaults: &PilotParams) -> anyhow::Result<PilotParams> {
        let mut p = match &self.params {
            Some(path) => {
                let mut base = serde_json::to_value(defaults)?;
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let over: serde_json::Value = serde_json::from_str(&text)?;
                merge_json(&mut base, over);
                serde_json::from_value(base).with_context(|| format!("parsing {}", path.display()))?
            }
            None => defaults.clone(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { p.$f = v; } )* };
        }
        set!(gamma, omega, tau, inner_steps, n_steps, lambda_anchor, lr_anchor, seed);
        p.snapshots |= self.snapshots;
        p.validate()?;
        Ok(p)
    }
}

/// Overlay `over` onto `base`, recursing into objects.
pub fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge_json(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Binary PNG; white marks the region to fill.
    #[arg(long)]
    pub mask: PathBuf,
    /// `<color> <shape>`, or empty for the unconditional model.
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub sampler: ParamArgs,
    #[arg(long, value_enum, default_value_t)]
    pub precision: Precision,
    /// Run directory; defaults to a fresh directory under `<output-root>/runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub axis: String,
    /// Comma separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Number of seeds per cell, starting at 0.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Number of generated test cases.
    #[arg(long, default_value_t = 4)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub case_seed: u64,
    #[command(flatten)]
    pub sampler: ParamArgs,
    /// Parent directory of the sweep directory; defaults to `<output-root>/sweeps`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShowRunArgs {
    /// Run directory containing manifest.json.
    pub dir: PathBuf,
}

pub fn train_oracle(config: &Config, a: &TrainOracleArgs) -> anyhow::Result<()> {
    let (train, val) = a.data.load()?;
    let mut cfg = OracleTrainConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let mut oracle = Oracle::<f32>::new(OracleConfig::default(), a.seed)?;
    tracing::info!(train = train.len(), val = val.len(), epochs = cfg.epochs, "training oracle");
    fit_oracle(&mut oracle, &train, &val, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| config.oracle.clone());
    ensure_parent(&out)?;
    let sha = oracle.save(&out)?;
    tracing::info!(out = %out.display(), accuracy = ?oracle.validation_accuracy(), "oracle saved");
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({ "checkpoint": out, "sha256": sha, "info": oracle.info() }))?
    );
    Ok(())
}

fn timestamp() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string()
}

pub fn inpaint(config: &Config, a: &InpaintArgs) -> anyhow::Result<()> {
    let params = a.sampler.resolve(&config.defaults)?;
    let prompt = PromptTokens::parse(&a.prompt)?;
    let image = ImageRgb::load_png(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let mask = load_mask_png(&a.mask).with_context(|| format!("reading {}", a.mask.display()))?;
    let models = Models::load(config, a.precision)?;
    let mut result = models.inpaint(&image, &mask, &prompt, &params, &mut NoObserver)?;
    if let (Some(oracle), Some(label)) = (&models.oracle, prompt.label()) {
        result.record.metrics = Some(score(&result, &image, &mask, label, oracle)?);
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| config.output_root.join("runs").join(timestamp()));
    let sheet = result.contact_sheet();
    persist_run(
        &out,
        &result.record,
        &RunArtifacts {
            input: &image,
            mask: &mask,
            output: &result.output,
            raw: Some(&result.raw),
            contact_sheet: sheet.as_ref(),
        },
    )?;
    tracing::info!(out = %out.display(), seconds = result.record.timings.total_s, "run written");
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({
            "run": out,
            "output_sha256": result.record.output_sha256,
            "metrics": result.record.metrics,
        }))?
    );
    Ok(())
}

pub fn sweep(config: &Config, a: &SweepArgs) -> anyhow::Result<()> {
    let axis = SweepAxis::parse(&a.axis)?;
    if a.seeds == 0 || a.cases == 0 {
        bail!("--seeds and --cases must be at least 1");
    }
    let base = a.sampler.resolve(&config.defaults)?;
    let spec = SweepSpec {
        axis,
        values: a.values.clone(),
        seeds: (0..a.seeds).collect(),
        base,
    };
    let models = Models::load(config, Precision::F32)?;
    let Some(oracle) = &models.oracle else {
        bail!("sweeps need an oracle checkpoint at {}", config.oracle.display());
    };
    let cases = generate_cases(a.cases, a.case_seed)?;
    let out = a.out.clone().unwrap_or_else(|| config.output_root.join("sweeps"));
    let pipeline = Pipeline::new(&models.denoiser, &models.autoencoder, &models.schedule);
    let (report, dir) = run_sweep(&pipeline, oracle, &cases, &spec, Some(&out), config.workers)?;
    for row in &report.summary {
        tracing::info!(
            value = row.value,
            background_mse = row.background_mse,
            seam = row.seam_score,
            semantic = row.semantic_score,
            seconds = row.wall_time_s,
            "sweep row"
        );
    }
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({ "sweep": dir, "cells": report.cells.len(), "summary": report.summary }))?
    );
    Ok(())
}

pub fn show_run(a: &ShowRunArgs) -> anyhow::Result<()> {
    let record = load_run(&a.dir)?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}
