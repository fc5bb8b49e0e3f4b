//! Grid evaluation of one sampler parameter over cases and seeds.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::cases::EvalCase;
use super::metrics::MetricReport;
use super::oracle::Oracle;
use super::score;
use crate::denoiser::PromptTokens;
use crate::io::{contact_sheet, write_atomic, ImageRgb};
use crate::pilot::params::PilotParams;
use crate::pilot::pipeline::{NoObserver, Pipeline};
use crate::record::{persist_run, RunArtifacts};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma,
    Tau,
    Omega,
    InnerSteps,
    NSteps,
    LambdaAnchor,
    LrAnchor,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::Gamma,
        SweepAxis::Tau,
        SweepAxis::Omega,
        SweepAxis::InnerSteps,
        SweepAxis::NSteps,
        SweepAxis::LambdaAnchor,
        SweepAxis::LrAnchor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Gamma => "gamma",
            SweepAxis::Tau => "tau",
            SweepAxis::Omega => "omega",
            SweepAxis::InnerSteps => "inner_steps",
            SweepAxis::NSteps => "n_steps",
            SweepAxis::LambdaAnchor => "lambda_anchor",
            SweepAxis::LrAnchor => "lr_anchor",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sweep axis {s:?}")))
    }

    fn integer(self) -> bool {
        matches!(self, SweepAxis::Tau | SweepAxis::InnerSteps | SweepAxis::NSteps)
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &PilotParams, value: f64) -> Result<PilotParams> {
        if self.integer() && (value < 0.0 || value.fract() != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{} takes non-negative integers, got {value}",
                self.name()
            )));
        }
        let mut p = base.clone();
        match self {
            SweepAxis::Gamma => p.gamma = value,
            SweepAxis::Tau => p.tau = value as usize,
            SweepAxis::Omega => p.omega = value,
            SweepAxis::InnerSteps => p.inner_steps = value as usize,
            SweepAxis::NSteps => p.n_steps = value as usize,
            SweepAxis::LambdaAnchor => p.lambda_anchor = value,
            SweepAxis::LrAnchor => p.lr_anchor = value,
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: PilotParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub case_id: usize,
    pub value: f64,
    pub seed: u64,
    pub target: String,
    pub metrics: MetricReport,
    pub output_sha256: String,
    /// Run directory relative to the sweep directory.
    pub run: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub value: f64,
    pub cells: usize,
    pub background_mse: f64,
    pub seam_score: f64,
    pub semantic_score: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub spec: SweepSpec,
    pub cases: usize,
    /// Sorted by value, then case, then seed.
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
}

impl SweepReport {
    pub fn all_finite(&self) -> bool {
        self.cells.iter().all(|c| c.metrics.is_finite())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "case_id",
            self.spec.axis.name(),
            "seed",
            "target",
            "background_mse",
            "seam_score",
            "semantic_score",
            "wall_time_s",
            "output_sha256",
        ])
        .map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                c.case_id.to_string(),
                c.value.to_string(),
                c.seed.to_string(),
                c.target.clone(),
                c.metrics.background_mse.to_string(),
                c.metrics.seam_score.to_string(),
                c.metrics.semantic_score.to_string(),
                c.metrics.wall_time_s.to_string(),
                c.output_sha256.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

fn summarize(values: &[f64], cells: &[SweepCell]) -> Vec<SweepSummary> {
    values
        .iter()
        .map(|&v| {
            let sel: Vec<&SweepCell> = cells.iter().filter(|c| c.value == v).collect();
            let m = |f: fn(&MetricReport) -> f64| super::stats::mean(&sel.iter().map(|c| f(&c.metrics)).collect::<Vec<_>>());
            SweepSummary {
                value: v,
                cells: sel.len(),
                background_mse: m(|r| r.background_mse),
                seam_score: m(|r| r.seam_score),
                semantic_score: m(|r| r.semantic_score),
                wall_time_s: m(|r| r.wall_time_s),
            }
        })
        .collect()
}

struct Job {
    case: usize,
    value_idx: usize,
    seed: u64,
}

/// Runs every (case, value, seed) cell on `threads` worker threads. With
/// `out`, each run and the report files are written into a fresh
/// `sweep_<axis>_<timestamp>` directory below it.
pub fn run_sweep<T: Real>(
    pipeline: &Pipeline<'_, T>,
    oracle: &Oracle<T>,
    cases: &[EvalCase],
    spec: &SweepSpec,
    out: Option<&Path>,
    threads: usize,
) -> Result<(SweepReport, Option<PathBuf>)> {
    if spec.values.is_empty() || spec.seeds.is_empty() || cases.is_empty() {
        return Err(Error::InvalidArgument("sweep needs values, seeds and cases".into()));
    }
    let params: Vec<PilotParams> = spec
        .values
        .iter()
        .map(|&v| spec.axis.apply(&spec.base, v))
        .collect::<Result<_>>()?;
    let dir = match out {
        Some(root) => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
            let d = root.join(format!("sweep_{}_{stamp}", spec.axis.name()));
            std::fs::create_dir_all(&d)?;
            Some(d)
        }
        None => None,
    };
    let mut jobs = Vec::new();
    for value_idx in 0..spec.values.len() {
        for case in 0..cases.len() {
            for &seed in &spec.seeds {
                jobs.push(Job { case, value_idx, seed });
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, SweepCell, ImageRgb)>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let worker = || loop {
        if failure.lock().map(|f| f.is_some()).unwrap_or(true) {
            return;
        }
        let k = next.fetch_add(1, Ordering::SeqCst);
        let Some(job) = jobs.get(k) else { return };
        match run_cell(pipeline, oracle, &cases[job.case], spec, &params[job.value_idx], job, dir.as_deref()) {
            Ok((cell, output)) => results.lock().expect("poisoned").push((k, cell, output)),
            Err(e) => {
                let mut f = failure.lock().expect("poisoned");
                f.get_or_insert(e);
                return;
            }
        }
    };
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(worker);
        }
    });
    if let Some(e) = failure.into_inner().expect("poisoned") {
        return Err(e);
    }
    let mut results = results.into_inner().expect("poisoned");
    results.sort_by_key(|r| r.0);
    let cells: Vec<SweepCell> = results.iter().map(|r| r.1.clone()).collect();
    let report = SweepReport {
        spec: spec.clone(),
        cases: cases.len(),
        summary: summarize(&spec.values, &cells),
        cells,
    };
    if let Some(d) = &dir {
        write_atomic(&d.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
        write_atomic(&d.join("report.csv"), &report.to_csv()?)?;
        let first_seed = spec.seeds[0];
        let rows: Vec<Vec<ImageRgb>> = cases
            .iter()
            .take(8)
            .enumerate()
            .map(|(ci, case)| {
                let mut row = vec![case.image.clone(), mask_image(&case.image, &case.mask)];
                for vi in 0..spec.values.len() {
                    if let Some(r) = results
                        .iter()
                        .find(|r| jobs[r.0].case == ci && jobs[r.0].value_idx == vi && jobs[r.0].seed == first_seed)
                    {
                        row.push(r.2.clone());
                    }
                }
                row
            })
            .collect();
        contact_sheet(&rows)?.save_png(&d.join("contact_sheet.png"))?;
    }
    Ok((report, dir))
}

/// The input with the masked region tinted, for contact sheets.
pub fn mask_image(image: &ImageRgb, m: &crate::pilot::mask::BinaryMask) -> ImageRgb {
    let mut out = image.clone();
    let n = out.pixel_count();
    for i in 0..n {
        if m.data[i] {
            for c in 0..3 {
                let v = &mut out.data[c * n + i];
                *v = 0.5 * *v + if c == 0 { 0.5 } else { -0.25 };
            }
        }
    }
    out
}

fn run_cell<T: Real>(
    pipeline: &Pipeline<'_, T>,
    oracle: &Oracle<T>,
    case: &EvalCase,
    spec: &SweepSpec,
    params: &PilotParams,
    job: &Job,
    dir: Option<&Path>,
) -> Result<(SweepCell, ImageRgb)> {
    let params = PilotParams {
        seed: job.seed,
        ..params.clone()
    };
    let prompt = PromptTokens::for_label(case.target);
    let mut result = pipeline.inpaint(&case.image, &case.mask, &prompt, &params, &mut NoObserver)?;
    let metrics = score(&result, &case.image, &case.mask, case.target, oracle)?;
    result.record.metrics = Some(metrics.clone());
    let value = spec.values[job.value_idx];
    let run = match dir {
        Some(d) => {
            let name = format!("runs/case{:03}_{}{}_seed{}", case.id, spec.axis.name(), value, job.seed);
            persist_run(
                &d.join(&name),
                &result.record,
                &RunArtifacts {
                    input: &case.image,
                    mask: &case.mask,
                    output: &result.output,
                    raw: Some(&result.raw),
                    contact_sheet: result.contact_sheet().as_ref(),
                },
            )?;
            Some(name)
        }
        None => None,
    };
    Ok((
        SweepCell {
            case_id: case.id,
            value,
            seed: job.seed,
            target: case.target.caption(),
            metrics,
            output_sha256: result.record.output_sha256.clone(),
            run,
        },
        result.output,
    ))
}
