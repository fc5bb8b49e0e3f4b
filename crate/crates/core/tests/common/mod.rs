//! Checks shared by the property tests and the acceptance report. Each
//! check returns whether it passed plus the measured numbers.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use pilot_core::denoiser::attention::{AttentionPolicy, AttentionProbe};
use pilot_core::denoiser::unet::DenoiserModel;
use pilot_core::denoiser::{LatentCodec, NoisePredictor, PromptTokens};
use pilot_core::io::ImageRgb;
use pilot_core::pilot::blend::Blended;
use pilot_core::pilot::guidance::cfg_combine;
use pilot_core::pilot::loss::{loss_sc, loss_sc_complement};
use pilot_core::pilot::optimize::{event_gradient, event_loss, OptContext, OptEvent};
use pilot_core::pilot::pipeline::{Pipeline, SamplerObserver};
use pilot_core::pilot::schedulers::{lambda_schedule, lr_schedule};
use pilot_core::pilot::{BinaryMask, PilotParams};
use pilot_core::schedule::{ddim_step, one_step_recon, q_sample, q_sample_at, Schedule, ScheduleSpec, Step};
use pilot_core::{JobRng, Real};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    let flat = t.flatten_all().unwrap();
    match flat.dtype() {
        DType::F32 => flat.to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits() as u64).collect(),
        _ => flat.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect(),
    }
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst norm-wise relative error of `one_step_recon(q_sample(x0, t, eps), eps, t)`
/// against `x0` over `n` random triples with `t < t_max`.
pub fn round_trip<T: Real>(n: usize, t_max: usize, tol: f64) -> Outcome {
    let s = Schedule::<T>::new(ScheduleSpec::default()).unwrap();
    let mut rng = JobRng::new(1);
    let mut worst = (0.0f64, 0usize);
    for _ in 0..n {
        let t = rng.below(t_max.min(s.t_train()));
        let x0 = rng.normal_tensor::<T, _>((4, 16, 16)).unwrap();
        let eps = rng.normal_tensor::<T, _>((4, 16, 16)).unwrap();
        let back = one_step_recon(&q_sample(&x0, t, &eps, &s).unwrap(), &eps, t, &s).unwrap();
        let (a, b) = (values(&back), values(&x0));
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let rel = norm(&diff) / norm(&b);
        if rel > worst.0 {
            worst = (rel, t);
        }
    }
    Outcome::new(
        worst.0 <= tol,
        format!("{n} triples with t < {t_max}, worst relative error {:.3e} at t={} (tolerance {tol:.0e})", worst.0, worst.1),
    )
}

fn cells(v: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (1, 1, h, w), &Device::Cpu).unwrap()
}

/// Both forms of the semantic loss on random inputs, plus the hand cases.
pub fn semantic_loss_forms(n: usize) -> Outcome {
    let mut rng = JobRng::new(2);
    let (mut worst, mut lo, mut hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    let mut checked = 0;
    for _ in 0..n {
        let (c, h, w) = (1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(8));
        let p = rng.uniform();
        let cells = (0..h * w).map(|_| rng.bernoulli(p)).collect();
        let md = BinaryMask::new(h, w, cells).unwrap();
        let scale = 10f64.powf(rng.range(-1.0, 2.0));
        let u = (rng.normal_tensor::<f64, _>((1, c, h, w)).unwrap() * scale).unwrap();
        let v = (rng.normal_tensor::<f64, _>((1, c, h, w)).unwrap() * scale).unwrap();
        let d = values(&(&u - &v).unwrap());
        let a = scalar(&loss_sc(&u, &v, &md, 1e-8).unwrap());
        let b = scalar(&loss_sc_complement(&u, &v, &md, 1e-8).unwrap());
        lo = lo.min(a).min(b);
        hi = hi.max(a).max(b);
        if norm(&d) > 1e-3 {
            checked += 1;
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE));
        }
    }
    let md = BinaryMask::new(1, 2, vec![true, false]).unwrap();
    let zero = cells(&[0.0, 0.0], 1, 2);
    let hand = [
        (scalar(&loss_sc(&cells(&[3.0, 0.0], 1, 2), &zero, &md, 1e-8).unwrap()), 0.0),
        (scalar(&loss_sc(&cells(&[0.0, 2.0], 1, 2), &zero, &md, 1e-8).unwrap()), 1.0),
        (scalar(&loss_sc(&cells(&[3.0, 4.0], 1, 2), &zero, &md, 1e-8).unwrap()), 0.64),
        (scalar(&loss_sc_complement(&cells(&[3.0, 4.0], 1, 2), &zero, &md, 1e-8).unwrap()), 1.0 - 9.0 / 25.0),
    ];
    let hand_ok = hand.iter().all(|(got, want)| got == want);
    Outcome::new(
        worst <= 1e-9 && lo >= 0.0 && hi <= 1.0 && hand_ok,
        format!(
            "{checked}/{n} compared, worst disagreement {worst:.3e}, range [{lo:.4}, {hi:.4}], hand cases {:?}",
            hand.iter().map(|h| h.0).collect::<Vec<_>>()
        ),
    )
}

pub fn probe_mask() -> BinaryMask {
    BinaryMask::from_fn(16, 16, |y, x| (3..11).contains(&y) && (5..14).contains(&x))
}

/// Directional derivatives of the event loss from autodiff on `grad_model`
/// against central differences on `fd_model` (same weights, possibly wider
/// precision), worst relative error over `probes` random unit directions.
pub fn gradient_check<G: Real, F: Real>(
    grad_model: &DenoiserModel<G>,
    fd_model: &DenoiserModel<F>,
    probes: usize,
    step: f64,
    tol: f64,
) -> Outcome {
    let (c, h, w) = grad_model.latent_dims();
    let md = probe_mask();
    let prompt = PromptTokens::parse("red triangle").unwrap();
    let params = PilotParams::default();
    let t = 700;
    let fraction = 0.2;
    let mut rng = JobRng::new(3);
    let z = rng.normal_vec::<f64>(c * h * w);
    let z_in = rng.normal_vec::<f64>(c * h * w);
    let tensor = |v: &[f64], dt: DType| Tensor::from_vec(v.to_vec(), (1, c, h, w), &Device::Cpu).unwrap().to_dtype(dt).unwrap();

    let sg = Schedule::<G>::new(ScheduleSpec::default()).unwrap();
    let zin_g = tensor(&z_in, G::DTYPE);
    let ctx_g = OptContext { model: grad_model, schedule: &sg, prompt: &prompt, z_in: &zin_g, md: &md, params: &params };
    let (_, g) = event_gradient(&tensor(&z, G::DTYPE), t, fraction, &ctx_g).unwrap();
    let g = values(&g);

    let sf = Schedule::<F>::new(ScheduleSpec::default()).unwrap();
    let zin_f = tensor(&z_in, F::DTYPE);
    let ctx_f = OptContext { model: fd_model, schedule: &sf, prompt: &prompt, z_in: &zin_f, md: &md, params: &params };
    let loss_at = |v: &[f64]| scalar(&event_loss(&tensor(v, F::DTYPE), t, fraction, &ctx_f).unwrap().total);

    let mut worst = 0.0f64;
    for _ in 0..probes {
        let dir = rng.normal_vec::<f64>(c * h * w);
        let n = norm(&dir);
        let dir: Vec<f64> = dir.iter().map(|d| d / n).collect();
        let shifted = |sign: f64| -> Vec<f64> { z.iter().zip(&dir).map(|(a, d)| a + sign * step * d).collect() };
        let fd = (loss_at(&shifted(1.0)) - loss_at(&shifted(-1.0))) / (2.0 * step);
        let ad: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        worst = worst.max((ad - fd).abs() / fd.abs().max(ad.abs()).max(1e-12));
    }
    Outcome::new(worst <= tol, format!("{probes} directions, worst relative error {worst:.3e} (tolerance {tol:.0e})"))
}

/// Every instrumented cross-attention layer adds exactly nothing at
/// background queries, across masks, timesteps and both self-mask phases.
pub fn cross_attention_leakage<T: Real>(model: &DenoiserModel<T>) -> Outcome {
    let (c, h, w) = model.latent_dims();
    let mut rng = JobRng::new(4);
    let masks = [
        probe_mask(),
        BinaryMask::filled(h, w, false),
        BinaryMask::from_fn(h, w, |y, x| y == 7 && x == 2),
        BinaryMask::from_fn(h, w, |y, x| (y + x) % 5 == 0),
    ];
    let policy = AttentionPolicy::default();
    let (mut layers, mut worst, mut background) = (0, 0.0f64, 0usize);
    for md in &masks {
        for (t, fraction) in [(999, 0.0), (500, 0.4), (100, 0.9)] {
            let z = rng.normal_tensor::<T, _>((1, c, h, w)).unwrap();
            let probe = AttentionProbe::default();
            model
                .forward(&z, &[t], &[PromptTokens::parse("green circle").unwrap()], Some(md), &policy, fraction, Some(&probe))
                .unwrap();
            for rec in probe.take() {
                layers += 1;
                let Some(m) = &rec.md else {
                    return Outcome::new(false, format!("layer {}x{} ran without a mask", rec.height, rec.width));
                };
                background += m.data.iter().filter(|v| !**v).count();
                worst = worst.max(rec.background_max().unwrap());
            }
        }
    }
    Outcome::new(
        layers > 0 && worst == 0.0,
        format!("{layers} layer passes, {background} background queries, largest contribution {worst:e}"),
    )
}

pub fn scheduler_anchors() -> Outcome {
    let md = BinaryMask::new(1, 3, vec![true, false, true]).unwrap();
    let lam = lambda_schedule(&md, 110.0);
    let lr = lr_schedule(950, 1000, 0.03, 1.0);
    Outcome::new(lam == 110.0 && lr == 0.03, format!("lambda(1/3) = {lam}, lr(0.95 T) = {lr}"))
}

/// Blended latent diffusion written out directly: guided DDIM everywhere,
/// background replaced by the noised input after every step.
pub fn blended_reference<T: Real>(
    model: &dyn NoisePredictor,
    codec: &dyn LatentCodec,
    s: &Schedule<T>,
    img: &ImageRgb,
    m: &BinaryMask,
    prompt: &PromptTokens,
    p: &PilotParams,
) -> Tensor {
    let md = m.max_pool(codec.factor()).unwrap();
    let z_in = codec.encode(img).unwrap();
    let plan = s.plan(p.n_steps).unwrap();
    let mut rng = JobRng::new(p.seed);
    let mut z = rng.normal_tensor::<T, _>(z_in.dims()).unwrap();
    let keep = md.to_tensor::<T>().unwrap().broadcast_as(z_in.shape()).unwrap();
    for i in 0..p.n_steps {
        let t = plan.steps[i];
        let prev = plan.steps.get(i + 1).map_or(Step::Endpoint, |&t| Step::At(t));
        let (eu, ec) = model
            .predict_pair(&z, t, prompt, Some(&md), &p.attention, i as f64 / p.n_steps as f64)
            .unwrap();
        let z0 = cfg_combine(&one_step_recon(&z, &eu, t, s).unwrap(), &one_step_recon(&z, &ec, t, s).unwrap(), p.omega)
            .unwrap();
        let fg = ddim_step(&z, &z0, t, prev, s).unwrap();
        let eps = rng.normal_tensor::<T, _>(z_in.dims()).unwrap();
        let bg = q_sample_at(&z_in, prev, &eps, s).unwrap();
        z = keep.gt(0.5).unwrap().where_cond(&fg, &bg).unwrap();
    }
    z
}

/// Records everything the sampler reports.
#[derive(Default)]
pub struct Recorder {
    pub blends: Vec<(usize, Step, Blended)>,
    pub events: Vec<OptEvent>,
    pub steps: Vec<usize>,
    pub cancel_after: Option<usize>,
}

impl SamplerObserver for Recorder {
    fn on_event(&mut self, e: &OptEvent) {
        self.events.push(e.clone());
    }
    fn on_step(&mut self, i: usize, _t: usize, _z: &Tensor) {
        self.steps.push(i);
    }
    fn on_blend(&mut self, i: usize, step: Step, b: &Blended) {
        self.blends.push((i, step, b.clone()));
    }
    fn cancelled(&self) -> bool {
        self.cancel_after.is_some_and(|n| self.steps.len() >= n)
    }
}

pub fn gamma_zero_matches_blending<T: Real>(
    model: &dyn NoisePredictor,
    codec: &dyn LatentCodec,
    s: &Schedule<T>,
    img: &ImageRgb,
    m: &BinaryMask,
    prompt: &PromptTokens,
    p: &PilotParams,
) -> Outcome {
    let p = PilotParams { gamma: 0.0, ..p.clone() };
    let out = Pipeline::new(model, codec, s).inpaint(img, m, prompt, &p, &mut Recorder::default()).unwrap();
    let reference = blended_reference(model, codec, s, img, m, prompt, &p);
    let (a, b) = (bits(&out.final_latent), bits(&reference));
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    Outcome::new(
        differing == 0 && out.record.trace.events.is_empty(),
        format!("{} steps, {differing}/{} latent values differ, {} events", p.n_steps, a.len(), out.record.trace.events.len()),
    )
}

pub fn blending_identity<T: Real>(
    model: &dyn NoisePredictor,
    codec: &dyn LatentCodec,
    s: &Schedule<T>,
    img: &ImageRgb,
    m: &BinaryMask,
    prompt: &PromptTokens,
    p: &PilotParams,
) -> Outcome {
    let md = m.max_pool(codec.factor()).unwrap();
    let z_in = codec.encode(img).unwrap();
    let mut rec = Recorder::default();
    Pipeline::new(model, codec, s).inpaint(img, m, prompt, p, &mut rec).unwrap();
    let hw = md.len();
    let (mut cells, mut mismatched) = (0usize, 0usize);
    for (_, step, b) in &rec.blends {
        let expect = bits(&q_sample_at(&z_in, *step, &b.eps, s).unwrap());
        for (k, (g, e)) in bits(&b.z).iter().zip(&expect).enumerate() {
            if !md.data[k % hw] {
                cells += 1;
                mismatched += usize::from(g != e);
            }
        }
    }
    let expected_steps = p.n_steps - p.optimization_steps();
    Outcome::new(
        mismatched == 0 && rec.blends.len() == expected_steps && cells > 0,
        format!("{} blending steps, {cells} background cells compared, {mismatched} differ", rec.blends.len()),
    )
}
