//! Small CNN that names the shape and colour of the object in a crop. It
//! stands in for a text-image alignment scorer.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::cases::{object_mask, square_box};
use crate::denoiser::dataset::{stack_images, ToyImage};
use crate::denoiser::prompt::{Color, Label, ShapeKind};
use crate::denoiser::TrainInfo;
use crate::io::ImageRgb;
use crate::nn::layers::{linear, Conv2d};
use crate::nn::params::{Checkpoint, Params};
use crate::pilot::mask::BinaryMask;
use crate::rng::JobRng;
use crate::{Error, Real, Result};

pub const CHECKPOINT_KIND: &str = "oracle";
pub const CROP_SIZE: usize = 32;
pub const VAL_ACCURACY: &str = "val_accuracy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub widths: [usize; 3],
    pub hidden: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64],
            hidden: 64,
        }
    }
}

pub struct Oracle<T: Real> {
    config: OracleConfig,
    params: Params<T>,
    info: TrainInfo,
    convs: Vec<Conv2d>,
    hidden: candle_nn::Linear,
    shape_head: candle_nn::Linear,
    color_head: candle_nn::Linear,
}

/// Class probabilities for one crop.
#[derive(Clone, Debug, PartialEq)]
pub struct OraclePrediction {
    pub shape: Vec<f64>,
    pub color: Vec<f64>,
}

impl OraclePrediction {
    /// Joint probability of `label` under independent heads.
    pub fn probability(&self, label: Label) -> f64 {
        self.shape[label.shape.id()] * self.color[label.color.id()]
    }

    pub fn argmax(&self) -> Label {
        let best = |p: &[f64]| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        Label {
            shape: ShapeKind::from_id(best(&self.shape)).unwrap_or(ShapeKind::Circle),
            color: Color::from_id(best(&self.color)).unwrap_or(Color::Red),
        }
    }
}

impl<T: Real> Oracle<T> {
    pub fn new(config: OracleConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    fn build(config: OracleConfig, seed: u64, frozen: bool) -> Result<Self> {
        let mut params = if frozen { Params::<T>::frozen() } else { Params::<T>::default() };
        let mut rng = JobRng::new(seed);
        let mut pb = params.builder(&mut rng);
        let [a, b, c] = config.widths;
        let convs = vec![
            Conv2d::new(&mut pb.sub("conv0"), 3, a, 3, 1)?,
            Conv2d::new(&mut pb.sub("conv1"), a, b, 3, 2)?,
            Conv2d::new(&mut pb.sub("conv2"), b, c, 3, 2)?,
            Conv2d::new(&mut pb.sub("conv3"), c, c, 3, 2)?,
        ];
        let hidden = linear(&mut pb.sub("hidden"), c, config.hidden)?;
        let shape_head = linear(&mut pb.sub("shape"), config.hidden, ShapeKind::ALL.len())?;
        let color_head = linear(&mut pb.sub("color"), config.hidden, Color::ALL.len())?;
        Ok(Self {
            config,
            params,
            info: TrainInfo::default(),
            convs,
            hidden,
            shape_head,
            color_head,
        })
    }

    pub fn info(&self) -> &TrainInfo {
        &self.info
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn validation_accuracy(&self) -> Option<f64> {
        self.info.metrics.get(VAL_ACCURACY).copied()
    }

    /// `(B, 3, 32, 32)` crops to `(shape_logits, color_logits)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        let pooled = h.mean((2, 3))?;
        let feat = self.hidden.forward(&pooled)?.relu()?;
        Ok((self.shape_head.forward(&feat)?, self.color_head.forward(&feat)?))
    }

    pub fn predict(&self, crop: &ImageRgb) -> Result<OraclePrediction> {
        let (s, c) = self.forward(&crop.to_tensor::<T>()?)?;
        let probs = |t: Tensor| -> Result<Vec<f64>> {
            Ok(candle_nn::ops::softmax(&t, D::Minus1)?
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?)
        };
        Ok(OraclePrediction {
            shape: probs(s)?,
            color: probs(c)?,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.info, self.params.tensors())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ckpt, _) = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut o = Self::build(ckpt.config()?, 0, true)?;
        o.params.assign(&ckpt.tensors)?;
        o.info = ckpt.info()?;
        Ok(o)
    }
}

/// The crop the oracle sees: the square around the mask's bounding box,
/// resized to [`CROP_SIZE`].
pub fn mask_crop(image: &ImageRgb, m: &BinaryMask) -> Result<ImageRgb> {
    let bbox = m
        .bbox()
        .ok_or_else(|| Error::InvalidArgument("empty mask has no crop".into()))?;
    Ok(image.crop_resized(square_box(bbox, image.height, image.width), CROP_SIZE))
}

/// Oracle probability that the masked region of `output` shows `target`.
pub fn semantic_score<T: Real>(oracle: &Oracle<T>, output: &ImageRgb, m: &BinaryMask, target: Label) -> Result<f64> {
    Ok(oracle.predict(&mask_crop(output, m)?)?.probability(target))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Largest standard deviation of the pixel noise added to training crops.
    pub noise: f64,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch: 64,
            lr: 2e-3,
            seed: 0,
            noise: 0.15,
        }
    }
}

/// Crop an image the way evaluation does: around a random mask over its object.
fn training_crop(img: &ToyImage, rng: &mut JobRng) -> Result<ImageRgb> {
    mask_crop(&img.pixels, &object_mask(img, rng))
}

fn labels_tensor(labels: &[Label]) -> Result<(Tensor, Tensor)> {
    let s: Vec<u32> = labels.iter().map(|l| l.shape.id() as u32).collect();
    let c: Vec<u32> = labels.iter().map(|l| l.color.id() as u32).collect();
    let n = labels.len();
    Ok((Tensor::from_vec(s, n, &Device::Cpu)?, Tensor::from_vec(c, n, &Device::Cpu)?))
}

/// Fraction of crops where both heads are right.
pub fn accuracy<T: Real>(oracle: &Oracle<T>, crops: &[ImageRgb], labels: &[Label]) -> Result<f64> {
    let mut correct = 0;
    for (chunk, lab) in crops.chunks(128).zip(labels.chunks(128)) {
        let refs: Vec<&ImageRgb> = chunk.iter().collect();
        let (s, c) = oracle.forward(&stack_images::<T>(&refs)?)?;
        let s = s.argmax(D::Minus1)?.to_vec1::<u32>()?;
        let c = c.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += lab
            .iter()
            .enumerate()
            .filter(|(i, l)| s[*i] as usize == l.shape.id() && c[*i] as usize == l.color.id())
            .count();
    }
    Ok(correct as f64 / crops.len().max(1) as f64)
}

/// Validation crops use a fixed mask stream so accuracy is reproducible.
pub fn validation_crops(val: &[ToyImage], seed: u64) -> Result<(Vec<ImageRgb>, Vec<Label>)> {
    let mut rng = JobRng::derived(seed, 21);
    let crops = val.iter().map(|img| training_crop(img, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok((crops, val.iter().map(|i| i.label).collect()))
}

pub fn train_oracle<T: Real>(
    oracle: &mut Oracle<T>,
    train: &[ToyImage],
    val: &[ToyImage],
    cfg: &OracleTrainConfig,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let start = Instant::now();
    let mut rng = JobRng::derived(cfg.seed, 20);
    let mut opt = AdamW::new(
        oracle.params().vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 1e-4,
            ..Default::default()
        },
    )?;
    let (val_crops, val_labels) = validation_crops(val, cfg.seed)?;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch) {
            let mut crops = Vec::with_capacity(idx.len());
            for &i in idx {
                let mut crop = training_crop(&train[i], &mut rng)?;
                let sigma = rng.range(0.0, cfg.noise) as f32;
                crop.data.iter_mut().for_each(|v| *v = (*v + sigma * rng.normal() as f32).clamp(-1.0, 1.0));
                crops.push(crop);
            }
            let labels: Vec<Label> = idx.iter().map(|&i| train[i].label).collect();
            let refs: Vec<&ImageRgb> = crops.iter().collect();
            let (s, c) = oracle.forward(&stack_images::<T>(&refs)?)?;
            let (ts, tc) = labels_tensor(&labels)?;
            let loss = (candle_nn::loss::cross_entropy(&s, &ts)? + candle_nn::loss::cross_entropy(&c, &tc)?)?;
            let l = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!("oracle loss became {l} at step {step}")));
            }
            opt.backward_step(&loss)?;
            step += 1;
        }
        if !val.is_empty() {
            let acc = accuracy(oracle, &val_crops, &val_labels)?;
            tracing::info!(epoch, acc, "oracle epoch");
            history.push(acc);
        }
    }
    let mut info = TrainInfo {
        trained: true,
        seed: cfg.seed,
        dataset_size: train.len(),
        epochs: cfg.epochs,
        steps: step,
        seconds: start.elapsed().as_secs_f64(),
        metrics: Default::default(),
    };
    if let Some(&acc) = history.last() {
        info.metrics.insert(VAL_ACCURACY.into(), acc);
    }
    oracle.info = info;
    Ok(history)
}
