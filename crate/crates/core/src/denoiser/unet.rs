//! Conditional U-Net noise predictor with maskable self- and cross-attention.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use super::attention::{
    build_cross_mask, build_self_mask, masked_attention, AttentionPolicy, AttentionProbe, CrossAttnRecord,
    MaskTensors,
};
use super::prompt::{PromptTokens, PROMPT_LEN, VOCAB_SIZE};
use super::{NoisePredictor, TrainInfo};
use crate::nn::layers::{group_norm, linear, norm_act, silu, timestep_embedding, upsample2x, Conv2d, LayerNorm};
use crate::nn::params::{Checkpoint, Init, ParamBuilder, Params};
use crate::pilot::mask::{downsample_mask, BinaryMask};
use crate::rng::JobRng;
use crate::{Error, Real, Result};

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Channel width per resolution level; each level halves the resolution.
    pub widths: Vec<usize>,
    /// Whether each level carries an attention block.
    pub attention_levels: Vec<bool>,
    pub mid_attention: bool,
    pub head_dim: usize,
    pub token_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub vocab_size: usize,
    pub prompt_len: usize,
}

impl UNetConfig {
    pub fn standard() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 16,
            widths: vec![32, 64, 64],
            attention_levels: vec![false, true, true],
            mid_attention: true,
            head_dim: 32,
            token_dim: 64,
            time_dim: 128,
            groups: 8,
            vocab_size: VOCAB_SIZE,
            prompt_len: PROMPT_LEN,
        }
    }

    /// Small enough for fast tests, same topology.
    pub fn tiny() -> Self {
        Self {
            widths: vec![16, 16],
            attention_levels: vec![false, true],
            head_dim: 8,
            token_dim: 16,
            time_dim: 32,
            groups: 4,
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.widths.is_empty() || self.widths.len() != self.attention_levels.len() {
            return bad("widths and attention_levels must be non-empty and equal length".into());
        }
        if !self.latent_size.is_multiple_of(1 << (self.widths.len() - 1)) {
            return bad(format!("latent size {} too small for {} levels", self.latent_size, self.widths.len()));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            let with_skip = w + self.widths.get(i + 1).copied().unwrap_or(w);
            if w % self.groups != 0 || with_skip % self.groups != 0 {
                return bad(format!("width {w} not divisible into {} groups", self.groups));
            }
            if self.attention_levels[i] && w % self.head_dim != 0 {
                return bad(format!("width {w} not divisible by head dim {}", self.head_dim));
            }
        }
        Ok(())
    }
}

struct ResBlock {
    norm1: candle_nn::GroupNorm,
    conv1: Conv2d,
    time: candle_nn::Linear,
    norm2: candle_nn::GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &UNetConfig, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(&mut pb.sub("norm1"), cfg.groups, cin)?,
            conv1: Conv2d::new(&mut pb.sub("conv1"), cin, cout, 3, 1)?,
            time: linear(&mut pb.sub("time"), cfg.time_dim, cout)?,
            norm2: group_norm(&mut pb.sub("norm2"), cfg.groups, cout)?,
            conv2: Conv2d::new(&mut pb.sub("conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(&mut pb.sub("skip"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&norm_act(&self.norm1, x)?)?;
        let t = self.time.forward(&silu(temb)?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&norm_act(&self.norm2, &h)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

struct MultiHead {
    q: candle_nn::Linear,
    k: candle_nn::Linear,
    v: candle_nn::Linear,
    out: candle_nn::Linear,
    heads: usize,
}

impl MultiHead {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, kv_dim: usize, head_dim: usize) -> Result<Self> {
        Ok(Self {
            q: linear(&mut pb.sub("q"), dim, dim)?,
            k: linear(&mut pb.sub("k"), kv_dim, dim)?,
            v: linear(&mut pb.sub("v"), kv_dim, dim)?,
            out: linear(&mut pb.sub("out"), dim, dim)?,
            heads: dim / head_dim,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x
            .reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `(B, N, C)` queries against `(B, L, kv_dim)` keys; returns the
    /// out-projected update, with fully blocked rows zeroed after projection.
    fn forward(&self, x: &Tensor, kv: &Tensor, mask: Option<&MaskTensors>) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let q = self.split(&self.q.forward(x)?)?;
        let k = self.split(&self.k.forward(kv)?)?;
        let v = self.split(&self.v.forward(kv)?)?;
        let a = masked_attention(&q, &k, &v, mask)?;
        let a = a.transpose(1, 2)?.reshape((b, n, c))?;
        let y = self.out.forward(&a)?;
        Ok(match mask.and_then(|m| m.row_gate.as_ref()) {
            Some(g) => y.broadcast_mul(g)?,
            None => y,
        })
    }
}

/// Masks prepared for one attention resolution.
#[derive(Default)]
struct LevelMasks {
    /// Set whenever cross-attention masking applies, even if every query
    /// at this level is masked and no tensor was needed.
    md: Option<BinaryMask>,
    self_mask: Option<MaskTensors>,
    cross_mask: Option<MaskTensors>,
}

struct AttnBlock {
    norm: candle_nn::GroupNorm,
    proj_in: Conv2d,
    ln1: LayerNorm,
    attn_self: MultiHead,
    ln2: LayerNorm,
    attn_cross: MultiHead,
    ln3: LayerNorm,
    ff1: candle_nn::Linear,
    ff2: candle_nn::Linear,
    proj_out: Conv2d,
}

impl AttnBlock {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &UNetConfig, c: usize) -> Result<Self> {
        Ok(Self {
            norm: group_norm(&mut pb.sub("norm"), cfg.groups, c)?,
            proj_in: Conv2d::new(&mut pb.sub("proj_in"), c, c, 1, 1)?,
            ln1: LayerNorm::new(&mut pb.sub("ln1"), c)?,
            attn_self: MultiHead::new(&mut pb.sub("self"), c, c, cfg.head_dim)?,
            ln2: LayerNorm::new(&mut pb.sub("ln2"), c)?,
            attn_cross: MultiHead::new(&mut pb.sub("cross"), c, cfg.token_dim, cfg.head_dim)?,
            ln3: LayerNorm::new(&mut pb.sub("ln3"), c)?,
            ff1: linear(&mut pb.sub("ff1"), c, 2 * c)?,
            ff2: linear(&mut pb.sub("ff2"), 2 * c, c)?,
            proj_out: Conv2d::new(&mut pb.sub("proj_out"), c, c, 1, 1)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        masks: &LevelMasks,
        probe: Option<&AttentionProbe>,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .proj_in
            .forward(&self.norm.forward(x)?)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let n = self.ln1.forward(&tokens)?;
        let tokens = (&tokens + self.attn_self.forward(&n, &n, masks.self_mask.as_ref())?)?;
        let cross = self
            .attn_cross
            .forward(&self.ln2.forward(&tokens)?, context, masks.cross_mask.as_ref())?;
        if let Some(probe) = probe {
            let per_query = cross.abs()?.max(D::Minus1)?.max(0)?;
            probe.push(CrossAttnRecord {
                height: h,
                width: w,
                md: masks.md.clone(),
                max_abs_residual: per_query.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            });
        }
        let tokens = (tokens + cross)?;
        let ff = self.ff2.forward(&self.ff1.forward(&self.ln3.forward(&tokens)?)?.gelu()?)?;
        let tokens = (tokens + ff)?;
        let out = tokens.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((self.proj_out.forward(&out)? + x)?)
    }
}

struct Level {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

/// Conditional noise predictor `eps_theta(z_t, t, prompt)`.
pub struct DenoiserModel<T: Real> {
    config: UNetConfig,
    params: Params<T>,
    info: TrainInfo,
    fingerprint: Option<String>,
    time_mlp: (candle_nn::Linear, candle_nn::Linear),
    token_table: Tensor,
    positions: Tensor,
    token_norm: LayerNorm,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid: (ResBlock, Option<AttnBlock>, ResBlock),
    up: Vec<Level>,
    upsample: Vec<Conv2d>,
    out_norm: candle_nn::GroupNorm,
    conv_out: Conv2d,
}

impl<T: Real> DenoiserModel<T> {
    /// Freshly initialized trainable model; all weights drawn from `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// Inference-only model: gradients flow to inputs but not to weights.
    pub fn new_frozen(config: UNetConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    fn build(config: UNetConfig, seed: u64, frozen: bool) -> Result<Self> {
        config.validate()?;
        let mut params = if frozen { Params::<T>::frozen() } else { Params::<T>::default() };
        let mut rng = JobRng::new(seed);
        let mut pb = params.builder(&mut rng);
        let cfg = &config;
        let w0 = cfg.widths[0];
        let time_mlp = (
            linear(&mut pb.sub("time.0"), w0, cfg.time_dim)?,
            linear(&mut pb.sub("time.1"), cfg.time_dim, cfg.time_dim)?,
        );
        let token_table = pb.tensor("tokens", &[cfg.vocab_size, cfg.token_dim], Init::Uniform(1.0))?;
        let positions = pb.tensor("positions", &[cfg.prompt_len, cfg.token_dim], Init::Uniform(1.0))?;
        let token_norm = LayerNorm::new(&mut pb.sub("token_norm"), cfg.token_dim)?;
        let conv_in = Conv2d::new(&mut pb.sub("conv_in"), cfg.latent_channels, w0, 3, 1)?;

        let levels = cfg.widths.len();
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cin = w0;
        for l in 0..levels {
            let w = cfg.widths[l];
            let mut lb = pb.sub(&format!("down.{l}"));
            down.push(Level {
                res: ResBlock::new(&mut lb.sub("res"), cfg, cin, w)?,
                attn: if cfg.attention_levels[l] {
                    Some(AttnBlock::new(&mut lb.sub("attn"), cfg, w)?)
                } else {
                    None
                },
            });
            if l + 1 < levels {
                downsample.push(Conv2d::new(&mut lb.sub("downsample"), w, w, 3, 2)?);
            }
            cin = w;
        }
        let wl = cfg.widths[levels - 1];
        let mid = (
            ResBlock::new(&mut pb.sub("mid.res1"), cfg, wl, wl)?,
            if cfg.mid_attention {
                Some(AttnBlock::new(&mut pb.sub("mid.attn"), cfg, wl)?)
            } else {
                None
            },
            ResBlock::new(&mut pb.sub("mid.res2"), cfg, wl, wl)?,
        );
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        let mut cur = wl;
        for l in (0..levels).rev() {
            let w = cfg.widths[l];
            let mut lb = pb.sub(&format!("up.{l}"));
            up.push(Level {
                res: ResBlock::new(&mut lb.sub("res"), cfg, cur + w, w)?,
                attn: if cfg.attention_levels[l] {
                    Some(AttnBlock::new(&mut lb.sub("attn"), cfg, w)?)
                } else {
                    None
                },
            });
            if l > 0 {
                upsample.push(Conv2d::new(&mut lb.sub("upsample"), w, w, 3, 1)?);
            }
            cur = w;
        }
        let out_norm = group_norm(&mut pb.sub("out_norm"), cfg.groups, w0)?;
        let conv_out = Conv2d::new(&mut pb.sub("conv_out"), w0, cfg.latent_channels, 3, 1)?;
        Ok(Self {
            config,
            params,
            info: TrainInfo::default(),
            fingerprint: None,
            time_mlp,
            token_table,
            positions,
            token_norm,
            conv_in,
            down,
            downsample,
            mid,
            up,
            upsample,
            out_norm,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn info(&self) -> &TrainInfo {
        &self.info
    }

    pub fn set_info(&mut self, info: TrainInfo) {
        self.info = info;
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Same weights at another precision.
    pub fn to_dtype<U: Real>(&self) -> Result<DenoiserModel<U>> {
        let mut m = DenoiserModel::<U>::new_frozen(self.config.clone(), 0)?;
        m.params.assign(&self.params.tensors())?;
        m.info = self.info.clone();
        m.fingerprint = self.fingerprint.clone();
        Ok(m)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.info, self.params.tensors())
    }

    pub fn save(&mut self, path: &Path) -> Result<String> {
        let sha = self.checkpoint()?.save(path)?;
        self.fingerprint = Some(sha.clone());
        Ok(sha)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ckpt, sha) = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut m = Self::from_checkpoint(&ckpt)?;
        m.fingerprint = Some(sha);
        Ok(m)
    }

    /// Trainable copy of a saved model, for continued training.
    pub fn load_trainable(path: &Path) -> Result<Self> {
        let (ckpt, _) = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut m = Self::new(ckpt.config()?, 0)?;
        m.params.assign(&ckpt.tensors)?;
        m.info = ckpt.info()?;
        Ok(m)
    }

    /// Loaded models are frozen.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new_frozen(ckpt.config()?, 0)?;
        m.params.assign(&ckpt.tensors)?;
        m.info = ckpt.info()?;
        Ok(m)
    }

    fn context(&self, prompts: &[PromptTokens]) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(prompts.len() * self.config.prompt_len);
        for p in prompts {
            p.validate(self.config.vocab_size)?;
            ids.extend_from_slice(&p.ids);
        }
        let ids = Tensor::from_vec(ids, prompts.len() * self.config.prompt_len, &Device::Cpu)?;
        let emb = self
            .token_table
            .index_select(&ids, 0)?
            .reshape((prompts.len(), self.config.prompt_len, self.config.token_dim))?
            .broadcast_add(&self.positions)?;
        self.token_norm.forward(&emb)
    }

    fn level_masks(&self, md: Option<&BinaryMask>, policy: &AttentionPolicy, frac: f64) -> Result<HashMap<usize, LevelMasks>> {
        let mut out = HashMap::new();
        let Some(md) = md else {
            return Ok(out);
        };
        if (md.height, md.width) != (self.config.latent_size, self.config.latent_size) {
            return Err(Error::Shape(format!(
                "latent mask is {}x{}, model latent is {}x{}",
                md.height, md.width, self.config.latent_size, self.config.latent_size
            )));
        }
        let use_cross = policy.cross_active(Some(md));
        let use_self = policy.self_active(Some(md), frac);
        for l in 0..self.config.widths.len() {
            let md_l = downsample_mask(md, 1 << l)?;
            let mut lm = LevelMasks::default();
            if use_self {
                lm.self_mask = MaskTensors::from_mask::<T>(&build_self_mask(&md_l))?;
            }
            if use_cross {
                lm.cross_mask = MaskTensors::from_mask::<T>(&build_cross_mask(&md_l, self.config.prompt_len))?;
                lm.md = Some(md_l);
            }
            out.insert(l, lm);
        }
        Ok(out)
    }

    /// Batched noise prediction. `zt` is `(B, C, H, W)`, one timestep and
    /// prompt per batch item. `md` is the latent-resolution mask shared by
    /// the whole batch.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        zt: &Tensor,
        ts: &[usize],
        prompts: &[PromptTokens],
        md: Option<&BinaryMask>,
        policy: &AttentionPolicy,
        trajectory_fraction: f64,
        probe: Option<&AttentionProbe>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, c, h, w) = zt.dims4()?;
        if (c, h, w) != (cfg.latent_channels, cfg.latent_size, cfg.latent_size) {
            return Err(Error::Shape(format!(
                "latent {:?} does not match model latent {}x{}x{}",
                zt.dims(),
                cfg.latent_channels,
                cfg.latent_size,
                cfg.latent_size
            )));
        }
        if ts.len() != b || prompts.len() != b {
            return Err(Error::Shape(format!(
                "batch of {b} latents with {} timesteps and {} prompts",
                ts.len(),
                prompts.len()
            )));
        }
        if zt.dtype() != T::DTYPE {
            return Err(Error::InvalidArgument(format!(
                "latent dtype {:?}, model dtype {:?}",
                zt.dtype(),
                T::DTYPE
            )));
        }
        let masks = self.level_masks(md, policy, trajectory_fraction)?;
        let none = LevelMasks::default();
        let at = |l: usize| masks.get(&l).unwrap_or(&none);

        let temb = timestep_embedding::<T>(ts, cfg.widths[0])?;
        let temb = self.time_mlp.1.forward(&silu(&self.time_mlp.0.forward(&temb)?)?)?;
        let context = self.context(prompts)?;

        let levels = cfg.widths.len();
        let mut x = self.conv_in.forward(zt)?;
        let mut skips = Vec::with_capacity(levels);
        for (l, level) in self.down.iter().enumerate() {
            x = level.res.forward(&x, &temb)?;
            if let Some(a) = &level.attn {
                x = a.forward(&x, &context, at(l), probe)?;
            }
            skips.push(x.clone());
            if l + 1 < levels {
                x = self.downsample[l].forward(&x)?;
            }
        }
        x = self.mid.0.forward(&x, &temb)?;
        if let Some(a) = &self.mid.1 {
            x = a.forward(&x, &context, at(levels - 1), probe)?;
        }
        x = self.mid.2.forward(&x, &temb)?;
        for (i, level) in self.up.iter().enumerate() {
            let l = levels - 1 - i;
            let skip = skips.pop().expect("one skip per level");
            x = level.res.forward(&Tensor::cat(&[&x, &skip], 1)?, &temb)?;
            if let Some(a) = &level.attn {
                x = a.forward(&x, &context, at(l), probe)?;
            }
            if l > 0 {
                x = self.upsample[i].forward(&upsample2x(&x)?)?;
            }
        }
        self.conv_out.forward(&norm_act(&self.out_norm, &x)?)
    }

    /// Single-latent noise prediction.
    pub fn predict_noise(
        &self,
        zt: &Tensor,
        t: usize,
        prompt: &PromptTokens,
        md: Option<&BinaryMask>,
        policy: &AttentionPolicy,
        trajectory_fraction: f64,
    ) -> Result<Tensor> {
        let zt = if zt.rank() == 3 { zt.unsqueeze(0)? } else { zt.clone() };
        self.forward(&zt, &[t], &[*prompt], md, policy, trajectory_fraction, None)
    }
}

impl<T: Real> NoisePredictor for DenoiserModel<T> {
    fn dtype(&self) -> DType {
        T::DTYPE
    }

    fn latent_dims(&self) -> (usize, usize, usize) {
        let c = &self.config;
        (c.latent_channels, c.latent_size, c.latent_size)
    }

    fn predict_pair(
        &self,
        zt: &Tensor,
        t: usize,
        prompt: &PromptTokens,
        md: Option<&BinaryMask>,
        policy: &AttentionPolicy,
        trajectory_fraction: f64,
    ) -> Result<(Tensor, Tensor)> {
        let both = Tensor::cat(&[zt, zt], 0)?;
        let eps = self.forward(
            &both,
            &[t, t],
            &[PromptTokens::null(), *prompt],
            md,
            policy,
            trajectory_fraction,
            None,
        )?;
        Ok((eps.narrow(0, 0, 1)?, eps.narrow(0, 1, 1)?))
    }

    fn is_trained(&self) -> bool {
        self.info.trained
    }

    fn fingerprint(&self) -> Option<String> {
        self.fingerprint.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::prompt::{Color, Label, ShapeKind};

    fn prompt() -> PromptTokens {
        PromptTokens::for_label(Label {
            shape: ShapeKind::Circle,
            color: Color::Red,
        })
    }

    #[test]
    fn output_shape_matches_latent() {
        let m = DenoiserModel::<f32>::new(UNetConfig::tiny(), 0).unwrap();
        let z = JobRng::new(1).normal_tensor::<f32, _>((3, 4, 16, 16)).unwrap();
        let p = [prompt(), PromptTokens::null(), prompt()];
        let y = m.forward(&z, &[5, 500, 999], &p, None, &AttentionPolicy::default(), 0.0, None).unwrap();
        assert_eq!(y.dims(), z.dims());
    }

    #[test]
    fn all_ones_mask_matches_unmasked_bitwise() {
        let m = DenoiserModel::<f32>::new(UNetConfig::tiny(), 0).unwrap();
        let z = JobRng::new(2).normal_tensor::<f32, _>((1, 4, 16, 16)).unwrap();
        let pol = AttentionPolicy::default();
        let a = m.predict_noise(&z, 700, &prompt(), None, &pol, 0.0).unwrap();
        let ones = BinaryMask::filled(16, 16, true);
        let b = m.predict_noise(&z, 700, &prompt(), Some(&ones), &pol, 0.0).unwrap();
        let (a, b) = (a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_out_of_vocabulary_prompt() {
        let m = DenoiserModel::<f32>::new(UNetConfig::tiny(), 0).unwrap();
        let z = Tensor::zeros((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let bad = PromptTokens { ids: [1, 3, 40, 2] };
        let r = m.predict_noise(&z, 1, &bad, None, &AttentionPolicy::default(), 0.0);
        assert!(matches!(r, Err(Error::Prompt(_))));
    }

    #[test]
    fn checkpoint_round_trip_across_precision() {
        let m = DenoiserModel::<f32>::new(UNetConfig::tiny(), 4).unwrap();
        let ck = Checkpoint::from_bytes(&m.checkpoint().unwrap().to_bytes().unwrap(), CHECKPOINT_KIND).unwrap();
        let back = DenoiserModel::<f32>::from_checkpoint(&ck).unwrap();
        let z = JobRng::new(2).normal_tensor::<f32, _>((1, 4, 16, 16)).unwrap();
        let pol = AttentionPolicy::default();
        let a = m.predict_noise(&z, 10, &prompt(), None, &pol, 0.0).unwrap();
        let b = back.predict_noise(&z, 10, &prompt(), None, &pol, 0.0).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let wide = m.to_dtype::<f64>().unwrap();
        let c = wide
            .predict_noise(&z.to_dtype(DType::F64).unwrap(), 10, &prompt(), None, &pol, 0.0)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        let diff = (a - c).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-4, "precision gap {diff}");
    }
}
