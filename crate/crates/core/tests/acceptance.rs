//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 8 to 11 use the trained models in `artifacts/models` (or
//! `$PILOT_ARTIFACTS`). With `PILOT_ACCEPTANCE_TRAIN=1` missing checkpoints
//! are trained first with the standard recipe, which takes a few hours on a
//! CPU; otherwise those criteria fail and the model-level checks fall back
//! to seeded weights. Set `PILOT_ACCEPTANCE_STRICT=1` to turn any FAIL into
//! a non-zero exit.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::Outcome;
use pilot_core::denoiser::autoencoder::AutoencoderConfig;
use pilot_core::denoiser::dataset::{generate_dataset, validation_dataset};
use pilot_core::denoiser::train::{train_autoencoder, train_denoiser, AutoencoderTrainConfig, DenoiserTrainConfig};
use pilot_core::denoiser::unet::UNetConfig;
use pilot_core::denoiser::{LatentCodec, PromptTokens, TrainInfo};
use pilot_core::eval::cases::{generate_cases, EvalCase};
use pilot_core::eval::metrics::{background_mse, MetricReport};
use pilot_core::eval::oracle::{train_oracle, OracleConfig, OracleTrainConfig};
use pilot_core::eval::score;
use pilot_core::eval::stats::{mean, paired_t_test_less};
use pilot_core::eval::sweep::{run_sweep, SweepAxis, SweepSpec};
use pilot_core::pilot::pipeline::{NoObserver, Pipeline};
use pilot_core::pilot::PilotParams;
use pilot_core::record::{persist_run, RunArtifacts};
use pilot_core::schedule::ScheduleSpec;
use pilot_core::{Autoencoder32, Denoiser32, Oracle32, Schedule32};

const TRAIN_SIZE: usize = 12_000;
const AE_EPOCHS: usize = 5;
const DENOISER_EPOCHS: usize = 30;
const AE_TARGET_MAE: f64 = 0.05;
const ORACLE_TARGET: f64 = 0.99;

fn artifacts() -> PathBuf {
    std::env::var_os("PILOT_ARTIFACTS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../artifacts"))
}

struct Models {
    denoiser: Denoiser32,
    autoencoder: Autoencoder32,
    oracle: Oracle32,
    schedule: Schedule32,
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

/// Seeded weights marked as trained, enough for the structural checks.
fn seeded() -> Models {
    let info = TrainInfo { trained: true, ..Default::default() };
    let mut denoiser = Denoiser32::new_frozen(UNetConfig::standard(), 5).unwrap();
    denoiser.set_info(info.clone());
    let mut autoencoder = Autoencoder32::new_frozen(AutoencoderConfig::default(), 5).unwrap();
    autoencoder.set_info(info);
    Models {
        denoiser,
        autoencoder,
        oracle: Oracle32::new(OracleConfig::default(), 5).unwrap(),
        schedule: Schedule32::new(ScheduleSpec::default()).unwrap(),
    }
}

/// `None` when a checkpoint is missing and training was not requested.
fn load_or_train(dir: &Path) -> Option<Models> {
    let models = dir.join("models");
    let (ae_path, dn_path, or_path) = (
        models.join("autoencoder.safetensors"),
        models.join("denoiser.safetensors"),
        models.join("oracle.safetensors"),
    );
    let needs_data = !(ae_path.exists() && dn_path.exists() && or_path.exists());
    if needs_data && !flag("PILOT_ACCEPTANCE_TRAIN") {
        return None;
    }
    std::fs::create_dir_all(&models).unwrap();
    let (train, val) = if needs_data {
        (generate_dataset(TRAIN_SIZE, 0).unwrap(), validation_dataset(500, 0).unwrap())
    } else {
        (Vec::new(), Vec::new())
    };
    let autoencoder = if ae_path.exists() {
        Autoencoder32::load(&ae_path).unwrap()
    } else {
        eprintln!("training autoencoder into {}", ae_path.display());
        let mut ae = Autoencoder32::new(AutoencoderConfig::default(), 0).unwrap();
        let cfg = AutoencoderTrainConfig { epochs: AE_EPOCHS, ..Default::default() };
        train_autoencoder(&mut ae, &train, &val[..300], &cfg).unwrap();
        ae.save(&ae_path).unwrap();
        Autoencoder32::load(&ae_path).unwrap()
    };
    let schedule = Schedule32::new(ScheduleSpec::default()).unwrap();
    let denoiser = if dn_path.exists() {
        Denoiser32::load(&dn_path).unwrap()
    } else {
        eprintln!("training denoiser into {}", dn_path.display());
        let mut dn = Denoiser32::new(UNetConfig::standard(), 0).unwrap();
        let cfg = DenoiserTrainConfig { epochs: DENOISER_EPOCHS, ..Default::default() };
        train_denoiser(&mut dn, &autoencoder, &train, &val, &cfg, &schedule).unwrap();
        dn.save(&dn_path).unwrap();
        Denoiser32::load(&dn_path).unwrap()
    };
    let oracle = if or_path.exists() {
        Oracle32::load(&or_path).unwrap()
    } else {
        eprintln!("training oracle into {}", or_path.display());
        let mut o = Oracle32::new(OracleConfig::default(), 0).unwrap();
        train_oracle(&mut o, &train, &val, &OracleTrainConfig::default()).unwrap();
        o.save(&or_path).unwrap();
        Oracle32::load(&or_path).unwrap()
    };
    Some(Models { denoiser, autoencoder, oracle, schedule })
}

fn job_params() -> PilotParams {
    PilotParams { gamma: 1.0, n_steps: 200, tau: 10, inner_steps: 10, omega: 7.5, ..Default::default() }
}

fn run_job(m: &Models, case: &EvalCase, p: &PilotParams) -> (MetricReport, pilot_core::pilot::InpaintResult) {
    let pipeline = Pipeline::new(&m.denoiser, &m.autoencoder, &m.schedule);
    let prompt = PromptTokens::for_label(case.target);
    let result = pipeline.inpaint(&case.image, &case.mask, &prompt, p, &mut NoObserver).unwrap();
    let metrics = score(&result, &case.image, &case.mask, case.target, &m.oracle).unwrap();
    (metrics, result)
}

/// Background error of the autoencoder alone, on the same pixels the
/// background metric looks at.
fn codec_background_mse(ae: &Autoencoder32, case: &EvalCase) -> f64 {
    let recon = ae.decode(&ae.encode(&case.image).unwrap()).unwrap();
    background_mse(&recon, &case.image, &case.mask).unwrap()
}

fn end_to_end(m: &Models) -> Outcome {
    let ae_mae = m.autoencoder.info().metrics.get("val_mae").copied().unwrap_or(f64::NAN);
    let dn_size = m.denoiser.info().dataset_size;
    let oracle_acc = m.oracle.validation_accuracy().unwrap_or(f64::NAN);
    let cases = generate_cases(50, 8).unwrap();
    let p = job_params();
    let (mut sem, mut bg, mut codec) = (Vec::new(), Vec::new(), Vec::new());
    for case in &cases {
        let (metrics, _) = run_job(m, case, &p);
        sem.push(metrics.semantic_score);
        bg.push(metrics.background_mse);
        codec.push(codec_background_mse(&m.autoencoder, case));
    }
    let (sem, bg, codec) = (mean(&sem), mean(&bg), mean(&codec));
    let recipe = ae_mae < AE_TARGET_MAE && dn_size >= TRAIN_SIZE && oracle_acc >= ORACLE_TARGET;
    Outcome::new(
        recipe && sem >= 0.8 && bg <= 2.0 * codec,
        format!(
            "autoencoder val MAE {ae_mae:.4}, denoiser trained on {dn_size} images, oracle val accuracy {oracle_acc:.4}; \
             50 jobs: mean semantic {sem:.3} (need >= 0.8), mean background MSE {bg:.5} vs 2 x codec {:.5}",
            2.0 * codec
        ),
    )
}

fn gamma_trend(m: &Models) -> Outcome {
    let cases = generate_cases(20, 9).unwrap();
    let gammas = [0.0, 0.5, 1.0];
    let mut bg = vec![Vec::new(); gammas.len()];
    let mut wall = vec![Vec::new(); gammas.len()];
    for (k, case) in cases.iter().enumerate() {
        for (g, &gamma) in gammas.iter().enumerate() {
            let p = PilotParams { gamma, seed: 100 + k as u64, ..job_params() };
            let (metrics, _) = run_job(m, case, &p);
            bg[g].push(metrics.background_mse);
            wall[g].push(metrics.wall_time_s);
        }
    }
    let test = paired_t_test_less(&bg[2], &bg[0]).unwrap();
    let walls: Vec<f64> = wall.iter().map(|w| mean(w)).collect();
    let monotone = walls.windows(2).all(|w| w[1] >= w[0]);
    let bgs: Vec<f64> = bg.iter().map(|b| mean(b)).collect();
    Outcome::new(
        test.p_value < 0.05 && test.mean_diff < 0.0 && monotone,
        format!(
            "{} paired seeds; background MSE at gamma 0/0.5/1: {:.5}/{:.5}/{:.5}; paired t = {:.3}, p = {:.2e}; \
             mean wall time {:.1}/{:.1}/{:.1} s",
            test.n, bgs[0], bgs[1], bgs[2], test.t, test.p_value, walls[0], walls[1], walls[2]
        ),
    )
}

fn tau_sweep(m: &Models, out: &Path) -> Outcome {
    let cases = generate_cases(3, 10).unwrap();
    let spec = SweepSpec { axis: SweepAxis::Tau, values: vec![1.0, 3.0, 10.0, 40.0], seeds: vec![0], base: job_params() };
    let pipeline = Pipeline::new(&m.denoiser, &m.autoencoder, &m.schedule);
    let (report, dir) = run_sweep(&pipeline, &m.oracle, &cases, &spec, Some(out), 1).unwrap();
    let complete = report.cells.len() == spec.values.len() * cases.len();
    let rows: Vec<String> = report
        .summary
        .iter()
        .map(|r| format!("tau {}: bg {:.5}, semantic {:.3}, seam {:.3}, {:.1} s", r.value, r.background_mse, r.semantic_score, r.seam_score, r.wall_time_s))
        .collect();
    Outcome::new(
        complete && report.all_finite(),
        format!("{} cells, report at {}; {}", report.cells.len(), dir.unwrap().display(), rows.join("; ")),
    )
}

fn determinism(m: &Models, out: &Path) -> Outcome {
    let case = &generate_cases(1, 11).unwrap()[0];
    let p = PilotParams { n_steps: 30, seed: 5, snapshots: true, ..job_params() };
    let persisted: Vec<(Vec<u8>, serde_json::Value)> = (0..2)
        .map(|k| {
            let (metrics, mut result) = run_job(m, case, &p);
            result.record.metrics = Some(metrics);
            let dir = out.join(format!("run{k}"));
            let sheet = result.contact_sheet();
            persist_run(
                &dir,
                &result.record,
                &RunArtifacts {
                    input: &case.image,
                    mask: &case.mask,
                    output: &result.output,
                    raw: Some(&result.raw),
                    contact_sheet: sheet.as_ref(),
                },
            )
            .unwrap();
            let mut manifest: serde_json::Value =
                serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
            let obj = manifest.as_object_mut().unwrap();
            obj.remove("created_at");
            obj.remove("timings");
            if let Some(metrics) = obj.get_mut("metrics").and_then(|v| v.as_object_mut()) {
                metrics.remove("wall_time_s");
            }
            (std::fs::read(dir.join("output.png")).unwrap(), manifest)
        })
        .collect();
    let png = persisted[0].0 == persisted[1].0;
    let manifest = persisted[0].1 == persisted[1].1;
    Outcome::new(png && manifest, format!("output.png identical: {png}; manifest identical modulo timestamps/timings: {manifest}"))
}

fn main() {
    let strict = flag("PILOT_ACCEPTANCE_STRICT");
    let dir = artifacts();
    let reports = dir.join("acceptance");
    let _ = std::fs::remove_dir_all(&reports);
    std::fs::create_dir_all(&reports).unwrap();

    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {id:>2} {} {name} ({secs:.1} s): {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail
        );
        results.push((id, name, outcome, secs));
    };

    run(1, "algebraic round trip, standard precision", &mut || common::round_trip::<f32>(1000, 1000, 1e-6));
    run(2, "semantic loss dual forms and bounds", &mut || common::semantic_loss_forms(1000));

    let loaded = load_or_train(&dir);
    let trained = loaded.is_some();
    let models = loaded.unwrap_or_else(seeded);
    let untrained = || {
        Outcome::new(
            false,
            format!("no trained checkpoints in {}; train them or set PILOT_ACCEPTANCE_TRAIN=1", dir.join("models").display()),
        )
    };
    run(3, "gradient correctness", &mut || {
        let standard = common::gradient_check(&models.denoiser, &models.denoiser.to_dtype::<f64>().unwrap(), 20, 1e-4, 1e-3);
        let reduced = pilot_core::Denoiser64::new_frozen(UNetConfig::tiny(), 6).unwrap();
        let extended = common::gradient_check(&reduced, &reduced, 20, 1e-4, 1e-5);
        Outcome::new(
            standard.pass && extended.pass,
            format!("standard: {}; extended, reduced model: {}", standard.detail, extended.detail),
        )
    });
    let case = &generate_cases(1, 12).unwrap()[0];
    let prompt = PromptTokens::for_label(case.target);
    let short = PilotParams { n_steps: 50, tau: 10, inner_steps: 2, seed: 3, ..job_params() };
    run(4, "gamma = 0 equals blended latent diffusion", &mut || {
        common::gamma_zero_matches_blending(&models.denoiser, &models.autoencoder, &models.schedule, &case.image, &case.mask, &prompt, &short)
    });
    run(5, "zero cross-attention leakage", &mut || common::cross_attention_leakage(&models.denoiser));
    run(6, "blending background identity", &mut || {
        let p = PilotParams { gamma: 0.5, ..short.clone() };
        common::blending_identity(&models.denoiser, &models.autoencoder, &models.schedule, &case.image, &case.mask, &prompt, &p)
    });
    run(7, "scheduler anchors", &mut common::scheduler_anchors);
    run(8, "end-to-end toy quality", &mut || if trained { end_to_end(&models) } else { untrained() });
    run(9, "gamma trend", &mut || if trained { gamma_trend(&models) } else { untrained() });
    run(10, "tau sweep report", &mut || if trained { tau_sweep(&models, &reports) } else { untrained() });
    run(11, "determinism", &mut || if trained { determinism(&models, &reports.join("determinism")) } else { untrained() });

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria pass{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
    );
    let summary: Vec<serde_json::Value> = results
        .iter()
        .map(|(id, name, o, s)| serde_json::json!({ "criterion": id, "name": name, "pass": o.pass, "detail": o.detail, "seconds": s }))
        .collect();
    std::fs::write(reports.join("summary.json"), serde_json::to_vec_pretty(&summary).unwrap()).unwrap();
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
