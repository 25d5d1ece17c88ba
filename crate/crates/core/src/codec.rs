//! Image <-> latent codecs: a small convolutional VAE and the identity.

use std::path::Path;

use candle_core::Tensor;
use candle_nn::optim::Optimizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::nn::{permutation, scalar, silu, Conv2d, GroupNorm, ParamStore};
use crate::tensor::{gaussian_vec, Domain, SpatialTensor, DEVICE};

pub const CODEC_KIND: &str = "codec";
const BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecVariant {
    Same,
    Finetuned,
    DifferentArch,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// `(C, H, W)` of images; H and W must be even.
    pub pixel_shape: (usize, usize, usize),
    pub latent_channels: usize,
    pub width: usize,
    pub groups: usize,
}

impl VaeConfig {
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_channels, self.pixel_shape.1 / 2, self.pixel_shape.2 / 2)
    }

    fn validate(&self) -> Result<()> {
        let (c, h, w) = self.pixel_shape;
        if c == 0 || h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("codec pixel shape {:?} must have even spatial size", self.pixel_shape)));
        }
        if self.latent_channels == 0 || self.width == 0 || self.groups == 0 || self.width % self.groups != 0 {
            return Err(Error::Config("codec width must be positive and divisible by groups".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, learning_rate: 2e-3, kl_weight: 1e-4, seed: 0 }
    }
}

impl CodecTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.kl_weight >= 0.0) {
            return Err(Error::Config("codec epochs, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecMeta {
    pub variant: CodecVariant,
    pub config: Option<VaeConfig>,
    pub pixel_shape: (usize, usize, usize),
    /// Multiplies posterior means so latents have roughly unit spread.
    pub latent_scale: f32,
    pub seed: u64,
    pub final_loss: Option<f64>,
}

struct Res {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
}

impl Res {
    fn new(s: &mut ParamStore, name: &str, w: usize, g: usize) -> Result<Self> {
        Ok(Self {
            n1: GroupNorm::new(s, &format!("{name}.n1"), w, g)?,
            c1: Conv2d::new(s, &format!("{name}.c1"), w, w, 3)?,
            n2: GroupNorm::new(s, &format!("{name}.n2"), w, g)?,
            c2: Conv2d::with_gain(s, &format!("{name}.c2"), w, w, 3, 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&silu(&self.n1.forward(x)?)?)?;
        let h = self.c2.forward(&silu(&self.n2.forward(&h)?)?)?;
        Ok((x + h)?)
    }
}

/// `(N, C, 2H, 2W) -> (N, 4C, H, W)`.
fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?.permute((0, 1, 3, 5, 2, 4))?.reshape((n, 4 * c, h / 2, w / 2))?)
}

fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (n, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    Ok(x.reshape((n, c, 2, 2, h, w))?.permute((0, 1, 4, 2, 5, 3))?.reshape((n, c, 2 * h, 2 * w))?)
}

/// Convolutional VAE working on 2x2 pixel blocks folded into channels, so
/// every convolution runs at latent resolution.
struct Vae {
    store: ParamStore,
    enc_in: Conv2d,
    enc_res: Vec<Res>,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: Vec<Res>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
    latent_channels: usize,
}

impl Vae {
    fn new(cfg: &VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new(seed);
        let (c, w, g, l) = (cfg.pixel_shape.0, cfg.width, cfg.groups, cfg.latent_channels);
        let enc_in = Conv2d::new(&mut s, "enc.in", 4 * c, w, 3)?;
        let enc_res = (0..2).map(|i| Res::new(&mut s, &format!("enc.res{i}"), w, g)).collect::<Result<_>>()?;
        let enc_norm = GroupNorm::new(&mut s, "enc.norm", w, g)?;
        let enc_out = Conv2d::new(&mut s, "enc.out", w, 2 * l, 3)?;
        let dec_in = Conv2d::new(&mut s, "dec.in", l, w, 3)?;
        let dec_res = (0..2).map(|i| Res::new(&mut s, &format!("dec.res{i}"), w, g)).collect::<Result<_>>()?;
        let dec_norm = GroupNorm::new(&mut s, "dec.norm", w, g)?;
        let dec_out = Conv2d::new(&mut s, "dec.out", w, 4 * c, 3)?;
        Ok(Self { store: s, enc_in, enc_res, enc_norm, enc_out, dec_in, dec_res, dec_norm, dec_out, latent_channels: l })
    }

    /// Posterior mean and log-variance of unscaled latents.
    fn posterior(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = self.enc_in.forward(&space_to_depth(x)?)?;
        for r in &self.enc_res {
            h = r.forward(&h)?;
        }
        let out = self.enc_out.forward(&silu(&self.enc_norm.forward(&h)?)?)?;
        let l = self.latent_channels;
        Ok((out.narrow(1, 0, l)?, out.narrow(1, l, l)?.clamp(-20f32, 10f32)?))
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_in.forward(z)?;
        for r in &self.dec_res {
            h = r.forward(&h)?;
        }
        depth_to_space(&self.dec_out.forward(&silu(&self.dec_norm.forward(&h)?)?)?)
    }
}

/// Encoder/decoder pair. Encoding uses the posterior mean, so it is a
/// deterministic differentiable function.
pub struct Codec {
    meta: CodecMeta,
    vae: Option<Vae>,
}

impl Codec {
    pub fn identity(pixel_shape: (usize, usize, usize)) -> Self {
        Self {
            meta: CodecMeta {
                variant: CodecVariant::Identity,
                config: None,
                pixel_shape,
                latent_scale: 1.0,
                seed: 0,
                final_loss: None,
            },
            vae: None,
        }
    }

    pub fn meta(&self) -> &CodecMeta {
        &self.meta
    }

    pub fn variant(&self) -> CodecVariant {
        self.meta.variant
    }

    pub fn is_identity(&self) -> bool {
        self.vae.is_none()
    }

    pub fn pixel_shape(&self) -> (usize, usize, usize) {
        self.meta.pixel_shape
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.meta.config.as_ref().map_or(self.meta.pixel_shape, VaeConfig::latent_shape)
    }

    pub fn store(&self) -> Option<&ParamStore> {
        self.vae.as_ref().map(|v| &v.store)
    }

    /// Differentiable encode of a raw `(N, C, H, W)` pixel tensor.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        match &self.vae {
            None => Ok(x.clone()),
            Some(v) => Ok((v.posterior(x)?.0 * f64::from(self.meta.latent_scale))?),
        }
    }

    /// Differentiable decode without the final clip.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        match &self.vae {
            None => Ok(z.clone()),
            Some(v) => v.decode(&(z / f64::from(self.meta.latent_scale))?),
        }
    }

    pub fn encode(&self, images: &SpatialTensor) -> Result<SpatialTensor> {
        if images.domain() != Domain::Pixel {
            return Err(invalid("encode expects pixel-domain input"));
        }
        if images.item_shape() != self.pixel_shape() {
            return Err(invalid(format!("codec expects {:?}, got {:?}", self.pixel_shape(), images.item_shape())));
        }
        let data = self.batched(images.data(), |x| self.encode_tensor(x))?;
        SpatialTensor::new(data, Domain::Latent)
    }

    /// Decodes and clips to `[-1, 1]`.
    pub fn decode(&self, latents: &SpatialTensor) -> Result<SpatialTensor> {
        if latents.item_shape() != self.latent_shape() {
            return Err(invalid(format!("codec expects latents {:?}, got {:?}", self.latent_shape(), latents.item_shape())));
        }
        let data = self.batched(latents.data(), |z| self.decode_tensor(z))?;
        SpatialTensor::new(data.clamp(-1f32, 1f32)?, Domain::Pixel)
    }

    fn batched(&self, x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        let n = x.dim(0)?;
        if n == 0 || self.vae.is_none() {
            return f(x);
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(BATCH) {
            parts.push(f(&x.narrow(0, start, BATCH.min(n - start))?)?.detach());
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn digest(&self) -> Result<String> {
        match &self.vae {
            None => Ok(checkpoint::sha256_hex(format!("identity{:?}", self.meta.pixel_shape).as_bytes())),
            Some(v) => {
                let mut d = v.store.digest()?;
                d.push_str(&self.meta.latent_scale.to_bits().to_string());
                Ok(checkpoint::sha256_hex(d.as_bytes()))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let empty = ParamStore::new(0);
        let store = self.vae.as_ref().map_or(&empty, |v| &v.store);
        checkpoint::save(path, CODEC_KIND, &self.meta, store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path, CODEC_KIND)?;
        let meta: CodecMeta = ck.meta_as()?;
        let vae = match &meta.config {
            None => None,
            Some(cfg) => {
                let v = Vae::new(cfg, meta.seed)?;
                v.store.import(&ck.tensors)?;
                Some(v)
            }
        };
        Ok(Self { meta, vae })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub latent_scale: f32,
}

fn fit(vae: &Vae, images: &SpatialTensor, cfg: &CodecTrainConfig) -> Result<Vec<f64>> {
    let mut opt = vae.store.adam(cfg.learning_rate, (0.9, 0.999))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0DE_C);
    let n = images.len();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(n, &mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let x = images.select(chunk)?.into_data();
            let (mu, logvar) = vae.posterior(&x)?;
            let std = (&logvar * 0.5)?.exp()?;
            let noise = Tensor::from_vec(gaussian_vec(rand::Rng::random(&mut rng), mu.elem_count()), mu.dims(), &DEVICE)?;
            let z = (&mu + (std * noise)?)?;
            let recon = vae.decode(&z)?;
            let mse = (recon - &x)?.sqr()?.mean_all()?;
            let kl = ((mu.sqr()? + logvar.exp()? - &logvar)? - 1.0)?.mean_all()? * 0.5;
            let loss = (&mse + (kl? * cfg.kl_weight)?)?;
            opt.backward_step(&loss)?;
            total += f64::from(scalar(&mse)?);
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("codec epoch {epoch}: reconstruction mse {mean:.5}");
        losses.push(mean);
    }
    Ok(losses)
}

fn latent_std(vae: &Vae, images: &SpatialTensor) -> Result<f32> {
    let probe = images.slice(0, images.len().min(512))?;
    let mut parts = Vec::new();
    for start in (0..probe.len()).step_by(BATCH) {
        parts.push(vae.posterior(probe.slice(start, BATCH.min(probe.len() - start))?.data())?.0.detach());
    }
    let mu = Tensor::cat(&parts, 0)?.flatten_all()?;
    let mean = mu.mean_all()?;
    let var = scalar(&mu.broadcast_sub(&mean)?.sqr()?.mean_all()?)?;
    Ok(var.sqrt().max(1e-6))
}

fn check_images(images: &SpatialTensor, cfg: &VaeConfig) -> Result<()> {
    if images.is_empty() {
        return Err(invalid("cannot train a codec on an empty dataset"));
    }
    if images.domain() != Domain::Pixel || images.item_shape() != cfg.pixel_shape {
        return Err(invalid(format!("codec training data must be pixel images of shape {:?}", cfg.pixel_shape)));
    }
    Ok(())
}

/// Trains a fresh VAE; the latent scale is fitted on the training images.
pub fn train_codec(images: &SpatialTensor, arch: &VaeConfig, cfg: &CodecTrainConfig) -> Result<(Codec, CodecTrainReport)> {
    train_variant(images, arch, cfg, CodecVariant::Same)
}

fn train_variant(
    images: &SpatialTensor,
    arch: &VaeConfig,
    cfg: &CodecTrainConfig,
    variant: CodecVariant,
) -> Result<(Codec, CodecTrainReport)> {
    cfg.validate()?;
    arch.validate()?;
    check_images(images, arch)?;
    let vae = Vae::new(arch, cfg.seed)?;
    let losses = fit(&vae, images, cfg)?;
    let scale = 1.0 / latent_std(&vae, images)?;
    let final_loss = *losses.last().expect("at least one epoch");
    let meta = CodecMeta {
        variant,
        config: Some(arch.clone()),
        pixel_shape: arch.pixel_shape,
        latent_scale: scale,
        seed: cfg.seed,
        final_loss: Some(final_loss),
    };
    let report = CodecTrainReport { seed: cfg.seed, epoch_losses: losses, final_loss, latent_scale: scale };
    Ok((Codec { meta, vae: Some(vae) }, report))
}

/// Continues training a copy of `base` on `images`. The latent scale is kept
/// so the copy stays interchangeable with the base.
pub fn finetune_codec(base: &Codec, images: &SpatialTensor, cfg: &CodecTrainConfig) -> Result<(Codec, CodecTrainReport)> {
    cfg.validate()?;
    let base_vae = base.vae.as_ref().ok_or_else(|| invalid("cannot fine-tune the identity codec"))?;
    let arch = base.meta.config.clone().expect("vae codecs carry a config");
    check_images(images, &arch)?;
    let vae = Vae::new(&arch, base.meta.seed)?;
    vae.store.import(&base_vae.store.export()?)?;
    let losses = fit(&vae, images, cfg)?;
    let final_loss = *losses.last().expect("at least one epoch");
    let meta = CodecMeta { variant: CodecVariant::Finetuned, final_loss: Some(final_loss), ..base.meta.clone() };
    let report = CodecTrainReport { seed: cfg.seed, epoch_losses: losses, final_loss, latent_scale: meta.latent_scale };
    Ok((Codec { meta, vae: Some(vae) }, report))
}

/// Builds the ablation codecs from a base codec.
///
/// `finetuned` continues training the base on `images` (a split disjoint
/// from the base's data) for `cfg.epochs`; `different-arch` trains a fresh
/// codec with `alt_arch`; `same` and `identity` need no training.
pub fn make_variant_codec(
    variant: CodecVariant,
    base: Option<&Codec>,
    images: Option<&SpatialTensor>,
    alt_arch: Option<&VaeConfig>,
    cfg: &CodecTrainConfig,
) -> Result<Codec> {
    let need_base = || base.ok_or_else(|| invalid(format!("{variant:?} codec requires a base codec")));
    let need_images = || images.ok_or_else(|| invalid(format!("{variant:?} codec requires training images")));
    match variant {
        CodecVariant::Same => {
            let b = need_base()?;
            let vae = match (&b.vae, &b.meta.config) {
                (Some(v), Some(arch)) => {
                    let copy = Vae::new(arch, b.meta.seed)?;
                    copy.store.import(&v.store.export()?)?;
                    Some(copy)
                }
                _ => None,
            };
            Ok(Codec { meta: b.meta.clone(), vae })
        }
        CodecVariant::Identity => {
            let shape = base.map(Codec::pixel_shape).or_else(|| images.map(SpatialTensor::item_shape));
            Ok(Codec::identity(shape.ok_or_else(|| invalid("identity codec needs a base or images for its shape"))?))
        }
        CodecVariant::Finetuned => Ok(finetune_codec(need_base()?, need_images()?, cfg)?.0),
        CodecVariant::DifferentArch => {
            let arch = alt_arch.ok_or_else(|| invalid("different-arch codec requires an architecture"))?;
            Ok(train_variant(need_images()?, arch, cfg, CodecVariant::DifferentArch)?.0)
        }
    }
}
