//! Sampler behaviour on cheap stand-in networks.

mod common;

use common::{bits, blended_reference, Recorder};

use pilot_core::denoiser::{LatentCodec, PromptTokens};
use pilot_core::io::ImageRgb;
use pilot_core::pilot::pipeline::{pilot_inpaint, Pipeline};
use pilot_core::pilot::{BinaryMask, PilotParams, StepControl};
use pilot_core::record::{load_run, persist_run, RunArtifacts};
use pilot_core::schedule::{q_sample_at, ScheduleSpec, Step};
use pilot_core::testing::{LinearPredictor, PoolCodec};
use pilot_core::{Error, Schedule32};

fn setup() -> (LinearPredictor, PoolCodec, Schedule32) {
    (
        LinearPredictor::new::<f32>((3, 8, 8)),
        PoolCodec::new::<f32>(4),
        Schedule32::new(ScheduleSpec::default()).unwrap(),
    )
}

fn image() -> ImageRgb {
    let mut img = ImageRgb::filled(32, 32, [0.0; 3]);
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                img.set(c, y, x, ((y * 7 + x * 3 + c * 11) % 17) as f32 / 8.5 - 1.0);
            }
        }
    }
    img
}

fn mask() -> BinaryMask {
    BinaryMask::from_fn(32, 32, |y, x| (9..23).contains(&y) && (5..19).contains(&x))
}

fn prompt() -> PromptTokens {
    PromptTokens::parse("blue square").unwrap()
}

#[test]
fn gamma_zero_is_blended_latent_diffusion() {
    let (model, codec, s) = setup();
    let p = PilotParams { gamma: 0.0, n_steps: 25, seed: 9, ..Default::default() };
    let out = pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &p).unwrap();
    assert!(out.record.trace.events.is_empty());
    let reference = blended_reference(&model, &codec, &s, &image(), &mask(), &prompt(), &p);
    assert_eq!(bits(&out.final_latent), bits(&reference));
}

#[test]
fn blending_keeps_background_cells_exactly() {
    let (model, codec, s) = setup();
    let p = PilotParams { gamma: 0.5, n_steps: 20, tau: 3, inner_steps: 2, ..Default::default() };
    let m = mask();
    let md = m.max_pool(4).unwrap();
    let z_in = codec.encode(&image()).unwrap();
    let mut rec = Recorder::default();
    Pipeline::new(&model, &codec, &s).inpaint(&image(), &m, &prompt(), &p, &mut rec).unwrap();
    assert_eq!(rec.blends.len(), 10);
    assert_eq!(rec.blends.last().unwrap().1, Step::Endpoint);
    let hw = md.len();
    for (_, step, b) in &rec.blends {
        let expect = bits(&q_sample_at(&z_in, *step, &b.eps, &s).unwrap());
        let got = bits(&b.z);
        for (k, (g, e)) in got.iter().zip(&expect).enumerate() {
            if !md.data[k % hw] {
                assert_eq!(g, e, "background cell {k}");
            }
        }
    }
}

#[test]
fn events_follow_gamma_and_tau() {
    let (model, codec, s) = setup();
    let p = PilotParams { gamma: 0.5, n_steps: 40, tau: 7, inner_steps: 3, ..Default::default() };
    let mut rec = Recorder::default();
    let out = Pipeline::new(&model, &codec, &s).inpaint(&image(), &mask(), &prompt(), &p, &mut rec).unwrap();
    let idx: Vec<usize> = rec.events.iter().map(|e| e.step_index).collect();
    assert_eq!(idx, vec![0, 7, 14]);
    assert_eq!(out.record.trace.optimization_steps, 20);
    assert_eq!(rec.steps, (0..40).collect::<Vec<_>>());
    for e in &rec.events {
        assert_eq!(e.losses.len(), 1 + 3 - e.rejected);
        assert!(e.losses.iter().all(|l| l.total.is_finite() && l.sc >= 0.0 && l.sc <= 1.0));
    }
}

#[test]
fn optimization_lowers_the_loss() {
    let (model, codec, s) = setup();
    let p = PilotParams { n_steps: 20, tau: 5, inner_steps: 8, ..Default::default() };
    let out = pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &p).unwrap();
    for e in &out.record.trace.events {
        assert!(e.last().unwrap().total < e.first().unwrap().total, "event at {}", e.step_index);
    }
}

#[test]
fn same_inputs_same_bytes_and_record_round_trip() {
    let (model, codec, s) = setup();
    let p = PilotParams { gamma: 0.6, n_steps: 15, tau: 4, inner_steps: 2, seed: 3, snapshots: true, ..Default::default() };
    let a = pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &p).unwrap();
    let b = pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &p).unwrap();
    assert_eq!(a.output.to_png_bytes().unwrap(), b.output.to_png_bytes().unwrap());
    assert_eq!(a.record.without_timings(), b.record.without_timings());
    assert_eq!(a.snapshots.len(), a.record.trace.events.len());

    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let sheet = a.contact_sheet();
    persist_run(
        &run,
        &a.record,
        &RunArtifacts { input: &image(), mask: &mask(), output: &a.output, raw: Some(&a.raw), contact_sheet: sheet.as_ref() },
    )
    .unwrap();
    assert_eq!(load_run(&run).unwrap(), a.record);
    for f in ["output.png", "raw.png", "trace.json", "contact_sheet.png"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let input = run.join("inputs").join(format!("{}.png", a.record.inputs.image_sha256));
    assert_eq!(ImageRgb::load_png(&input).unwrap(), ImageRgb::from_png_bytes(&image().to_png_bytes().unwrap()).unwrap());

    let other = pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &PilotParams { seed: 4, ..p }).unwrap();
    assert_ne!(other.record.output_sha256, a.record.output_sha256);
}

#[test]
fn output_keeps_input_outside_the_mask() {
    let (model, codec, s) = setup();
    let p = PilotParams { n_steps: 10, tau: 5, inner_steps: 1, ..Default::default() };
    let m = mask();
    let out = pilot_inpaint(&model, &codec, &s, &image(), &m, &prompt(), &p).unwrap();
    let n = m.len();
    for c in 0..3 {
        for i in 0..n {
            let want = if m.data[i] { out.raw.data[c * n + i] } else { image().data[c * n + i] };
            assert_eq!(out.output.data[c * n + i].to_bits(), want.to_bits());
        }
    }
    assert!(out.raw.data.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn backtracking_matches_plain_descent_when_every_step_descends() {
    let (model, codec, s) = setup();
    let p = PilotParams { n_steps: 20, tau: 5, inner_steps: 4, ..Default::default() };
    let back = pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &p).unwrap();
    assert!(back.record.trace.events.iter().all(|e| e.rejected == 0 && e.lr_scale == 1.0));
    let plain = PilotParams { step_control: StepControl::Plain, ..p };
    let plain = pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &plain).unwrap();
    assert_eq!(bits(&back.final_latent), bits(&plain.final_latent));
}

#[test]
fn backtracking_never_raises_the_loss() {
    let (model, codec, s) = setup();
    let p = PilotParams { n_steps: 20, tau: 5, inner_steps: 6, lr_anchor: 1e4, ..Default::default() };
    let out = pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &p).unwrap();
    let events = &out.record.trace.events;
    assert!(events.iter().any(|e| e.rejected > 0));
    for e in events {
        assert_eq!(e.losses.len(), 1 + 6 - e.rejected);
        assert!(e.losses.windows(2).all(|w| w[1].total <= w[0].total), "event at {}", e.step_index);
    }

    let plain = PilotParams { step_control: StepControl::Plain, ..p };
    match pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &plain) {
        Err(Error::NonFinite(_)) => {}
        Ok(out) => assert!(out
            .record
            .trace
            .events
            .iter()
            .any(|e| e.losses.windows(2).any(|w| w[1].total > w[0].total))),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn empty_mask_reproduces_the_input() {
    let (model, codec, s) = setup();
    let p = PilotParams { n_steps: 10, tau: 5, inner_steps: 2, ..Default::default() };
    let empty = BinaryMask::filled(32, 32, false);
    let out = pilot_inpaint(&model, &codec, &s, &image(), &empty, &prompt(), &p).unwrap();
    assert!(out.record.mask.degenerate);
    assert_eq!(out.output, image());
    for e in &out.record.trace.events {
        assert!(e.losses.iter().all(|l| (l.sc - 1.0).abs() < 1e-6));
    }
}

#[test]
fn rejects_bad_inputs() {
    let (mut model, codec, s) = setup();
    let p = PilotParams { n_steps: 5, ..Default::default() };
    let small = BinaryMask::filled(16, 16, true);
    assert!(matches!(pilot_inpaint(&model, &codec, &s, &image(), &small, &prompt(), &p), Err(Error::Shape(_))));
    let bad = PilotParams { gamma: 2.0, ..p.clone() };
    assert!(matches!(pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &bad), Err(Error::InvalidArgument(_))));
    let too_long = PilotParams { n_steps: 5000, ..p.clone() };
    assert!(pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &too_long).is_err());
    model.trained = false;
    assert!(matches!(pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &p), Err(Error::Untrained(_))));
    let f64_model = LinearPredictor::new::<f64>((3, 8, 8));
    assert!(pilot_inpaint(&f64_model, &codec, &s, &image(), &mask(), &prompt(), &p).is_err());
}

#[test]
fn cancellation_stops_the_loop() {
    let (model, codec, s) = setup();
    let p = PilotParams { n_steps: 30, ..Default::default() };
    let mut rec = Recorder { cancel_after: Some(4), ..Default::default() };
    let r = Pipeline::new(&model, &codec, &s).inpaint(&image(), &mask(), &prompt(), &p, &mut rec);
    assert!(matches!(r, Err(Error::Cancelled)));
    assert_eq!(rec.steps.len(), 4);
}

#[test]
fn extended_precision_runs() {
    let model = LinearPredictor::new::<f64>((3, 8, 8));
    let codec = PoolCodec::new::<f64>(4);
    let s = pilot_core::Schedule64::new(ScheduleSpec::default()).unwrap();
    let p = PilotParams { n_steps: 12, tau: 4, inner_steps: 2, ..Default::default() };
    let out = pilot_inpaint(&model, &codec, &s, &image(), &mask(), &prompt(), &p).unwrap();
    assert_eq!(out.record.precision, "f64");
    assert_eq!(out.final_latent.dtype(), candle_core::DType::F64);
}
