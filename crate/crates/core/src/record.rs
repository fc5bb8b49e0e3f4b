//! Persisted artifact of one inpainting job.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json          RunRecord, schema-versioned
//! output.png             composited result
//! raw.png                decoded result before compositing
//! inputs/<sha256>.png    input image and mask, content addressed
//! trace.json             StageTrace
//! contact_sheet.png      decoded reconstructions per event, if recorded
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::metrics::MetricReport;
use crate::io::{mask_to_png_bytes, write_atomic, ImageRgb};
use crate::nn::params::sha256_hex;
use crate::pilot::mask::BinaryMask;
use crate::pilot::optimize::StageTrace;
use crate::pilot::params::PilotParams;
use crate::schedule::ScheduleSpec;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRefs {
    pub denoiser: Option<String>,
    pub autoencoder: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InputRefs {
    pub image_sha256: String,
    pub mask_sha256: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub masked_fraction: f64,
    pub latent_masked_fraction: f64,
    /// No latent cell is masked; the job reduces to reconstruction.
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    pub optimization_s: f64,
    pub sampling_s: f64,
    pub decode_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub created_at: String,
    pub prompt: String,
    pub prompt_ids: [u32; 4],
    pub params: PilotParams,
    pub schedule: ScheduleSpec,
    pub precision: String,
    pub models: ModelRefs,
    pub inputs: InputRefs,
    pub mask: MaskSummary,
    pub output_sha256: String,
    pub trace: StageTrace,
    pub metrics: Option<MetricReport>,
    pub timings: Timings,
}

impl RunRecord {
    /// Copy with wall-clock fields cleared, for reproducibility comparisons.
    pub fn without_timings(&self) -> RunRecord {
        let mut r = self.clone();
        r.created_at.clear();
        r.timings = Timings::default();
        if let Some(m) = r.metrics.as_mut() {
            m.wall_time_s = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }
}

/// Pixel data that goes next to the manifest.
pub struct RunArtifacts<'a> {
    pub input: &'a ImageRgb,
    pub mask: &'a BinaryMask,
    pub output: &'a ImageRgb,
    pub raw: Option<&'a ImageRgb>,
    pub contact_sheet: Option<&'a ImageRgb>,
}

pub fn image_sha(img: &ImageRgb) -> Result<String> {
    Ok(sha256_hex(&img.to_png_bytes()?))
}

pub fn mask_sha(m: &BinaryMask) -> Result<String> {
    Ok(sha256_hex(&mask_to_png_bytes(m)?))
}

/// Write a run directory. The manifest is written last, so a directory
/// with a manifest is complete.
pub fn persist_run(dir: &Path, record: &RunRecord, art: &RunArtifacts<'_>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("inputs"))?;
    let input_png = art.input.to_png_bytes()?;
    let mask_png = mask_to_png_bytes(art.mask)?;
    write_atomic(&dir.join("inputs").join(format!("{}.png", sha256_hex(&input_png))), &input_png)?;
    write_atomic(&dir.join("inputs").join(format!("{}.png", sha256_hex(&mask_png))), &mask_png)?;
    art.output.save_png(&dir.join("output.png"))?;
    if let Some(raw) = art.raw {
        raw.save_png(&dir.join("raw.png"))?;
    }
    if let Some(sheet) = art.contact_sheet {
        sheet.save_png(&dir.join("contact_sheet.png"))?;
    }
    write_atomic(&dir.join("trace.json"), &serde_json::to_vec_pretty(&record.trace)?)?;
    write_atomic(&dir.join(MANIFEST), &record.to_json()?)?;
    Ok(dir.to_path_buf())
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let bytes = std::fs::read(dir.join(MANIFEST))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "manifest schema_version {other:?}, expected {SCHEMA_VERSION}"
            )))
        }
    }
    Ok(serde_json::from_value(value)?)
}
