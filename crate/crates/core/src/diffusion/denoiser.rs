use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{condition_ids, Condition, NoisePredictor, NoiseSchedule};
use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::nn::{silu, sinusoidal_features, Conv2d, Embedding, GroupNorm, Linear, ParamStore};

pub const DENOISER_KIND: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Width of the first level; deeper levels use twice this.
    pub base_width: usize,
    pub groups: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 || self.groups == 0 || self.embed_dim < 2 {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if self.base_width % self.groups != 0 {
            return Err(Error::Config(format!("base_width {} not divisible by groups {}", self.base_width, self.groups)));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!("denoiser input {}x{} must be divisible by 4", self.height, self.width)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub config: DenoiserConfig,
    /// Fingerprint of the sampling schedule the model was trained for.
    pub schedule_hash: String,
    pub schedule: NoiseSchedule,
    pub train_stride: usize,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub epochs: usize,
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, emb_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3)?,
            emb: Linear::new(store, &format!("{name}.emb"), emb_dim, cout)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups)?,
            conv2: Conv2d::with_gain(store, &format!("{name}.conv2"), cout, cout, 3, 0.0)?,
            skip: if cin == cout { None } else { Some(Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1)?) },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let e = self.emb.forward(emb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Two-level U-shaped conditional noise predictor.
pub struct Denoiser {
    meta: DenoiserMeta,
    store: ParamStore,
    time1: Linear,
    time2: Linear,
    classes: Embedding,
    conv_in: Conv2d,
    down1: ResBlock,
    down2: ResBlock,
    mid: ResBlock,
    up2: ResBlock,
    up1: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, schedule: &NoiseSchedule, train_stride: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new(seed);
        let (b, e, g) = (config.base_width, config.embed_dim, config.groups);
        let time1 = Linear::new(&mut s, "time1", e, e)?;
        let time2 = Linear::new(&mut s, "time2", e, e)?;
        let classes = Embedding::new(&mut s, "classes", config.num_classes + 1, e)?;
        let conv_in = Conv2d::new(&mut s, "conv_in", config.channels, b, 3)?;
        let down1 = ResBlock::new(&mut s, "down1", b, b, e, g)?;
        let down2 = ResBlock::new(&mut s, "down2", b, 2 * b, e, g)?;
        let mid = ResBlock::new(&mut s, "mid", 2 * b, 2 * b, e, g)?;
        let up2 = ResBlock::new(&mut s, "up2", 4 * b, 2 * b, e, g)?;
        let up1 = ResBlock::new(&mut s, "up1", 3 * b, b, e, g)?;
        let norm_out = GroupNorm::new(&mut s, "norm_out", b, g)?;
        let conv_out = Conv2d::with_gain(&mut s, "conv_out", b, config.channels, 3, 0.0)?;
        let meta = DenoiserMeta {
            config,
            schedule_hash: schedule.fingerprint(),
            schedule: schedule.clone(),
            train_stride,
            seed,
            final_loss: None,
            epochs: 0,
        };
        Ok(Self { meta, store: s, time1, time2, classes, conv_in, down1, down2, mid, up2, up1, norm_out, conv_out })
    }

    pub fn meta(&self) -> &DenoiserMeta {
        &self.meta
    }

    pub(crate) fn meta_mut(&mut self) -> &mut DenoiserMeta {
        &mut self.meta
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.meta.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// The schedule this model samples and inverts with.
    pub fn schedule(&self) -> &NoiseSchedule {
        &self.meta.schedule
    }

    /// Noise prediction from per-item time inputs, cumulative alphas and
    /// class indices (`num_classes` for the empty label).
    ///
    /// The output is `sqrt(1 - a) x + sqrt(a) F(x)`: the first term is the
    /// optimal prediction for unit-variance data, so the network only models
    /// a bounded residual and `x0` estimates stay stable at high noise.
    pub fn forward(&self, x: &Tensor, time: &[f32], alpha: &[f32], ids: &[u32]) -> Result<Tensor> {
        let c = &self.meta.config;
        let (n, ch, h, w) = x.dims4()?;
        if (ch, h, w) != (c.channels, c.height, c.width) {
            return Err(invalid(format!("denoiser expects {}x{}x{}, got {ch}x{h}x{w}", c.channels, c.height, c.width)));
        }
        if time.len() != n || alpha.len() != n || ids.len() != n {
            return Err(invalid("time/label count does not match batch"));
        }
        let t = sinusoidal_features(time, c.embed_dim)?;
        let t = self.time2.forward(&silu(&self.time1.forward(&t)?)?)?;
        let emb = silu(&(t + self.classes.forward(ids)?)?)?;
        let h0 = self.conv_in.forward(x)?;
        let h1 = self.down1.forward(&h0, &emb)?;
        let h2 = self.down2.forward(&h1.avg_pool2d(2)?, &emb)?;
        let m = self.mid.forward(&h2.avg_pool2d(2)?, &emb)?;
        let u2 = m.upsample_nearest2d(h / 2, w / 2)?;
        let u2 = self.up2.forward(&Tensor::cat(&[&u2, &h2], 1)?, &emb)?;
        let u1 = u2.upsample_nearest2d(h, w)?;
        let u1 = self.up1.forward(&Tensor::cat(&[&u1, &h1], 1)?, &emb)?;
        let residual = self.conv_out.forward(&silu(&self.norm_out.forward(&u1)?)?)?;
        let skip: Vec<f32> = alpha.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
        let out: Vec<f32> = alpha.iter().map(|a| a.max(0.0).sqrt()).collect();
        let skip = Tensor::from_vec(skip, (n, 1, 1, 1), x.device())?;
        let out = Tensor::from_vec(out, (n, 1, 1, 1), x.device())?;
        Ok((x.broadcast_mul(&skip)? + residual.broadcast_mul(&out)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        checkpoint::save(path, DENOISER_KIND, &self.meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path, DENOISER_KIND)?;
        let meta: DenoiserMeta = ck.meta_as()?;
        let mut model = Self::new(meta.config.clone(), &meta.schedule, meta.train_stride, meta.seed)?;
        model.store.import(&ck.tensors)?;
        model.meta = meta;
        Ok(model)
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, xt: &Tensor, t: usize, sched: &NoiseSchedule, conds: &[Condition]) -> Result<Tensor> {
        let n = xt.dim(0)?;
        let ids = condition_ids(conds, n, self.meta.config.num_classes as u32)?;
        self.forward(xt, &vec![sched.time_input(t); n], &vec![sched.alpha(t) as f32; n], &ids)
    }

    fn check_schedule(&self, sched: &NoiseSchedule) -> Result<()> {
        let got = sched.fingerprint();
        if got != self.meta.schedule_hash {
            return Err(invalid(format!(
                "schedule {got} differs from the one this denoiser was trained for ({})",
                self.meta.schedule_hash
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::tensor::gaussian_vec;
    use crate::tensor::DEVICE;

    fn cfg() -> DenoiserConfig {
        DenoiserConfig { channels: 4, height: 8, width: 8, base_width: 8, groups: 4, num_classes: 3, embed_dim: 16 }
    }

    #[test]
    fn shape_and_determinism() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let m = Denoiser::new(cfg(), &s, 4, 1).unwrap();
        let x = Tensor::from_vec(gaussian_vec(1, 2 * 4 * 64), (2, 4, 8, 8), &DEVICE).unwrap();
        let a = m.predict_noise(&x, 3, &s, &[Condition::Class(1), Condition::Empty]).unwrap();
        let b = m.predict_noise(&x, 3, &s, &[Condition::Class(1), Condition::Empty]).unwrap();
        assert_eq!(a.dims(), x.dims());
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn refuses_foreign_schedule_and_round_trips() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let other = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let m = Denoiser::new(cfg(), &s, 4, 2).unwrap();
        assert!(m.check_schedule(&s).is_ok());
        assert!(m.check_schedule(&other).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.safetensors");
        m.save(&path).unwrap();
        let back = Denoiser::load(&path).unwrap();
        assert_eq!(back.digest().unwrap(), m.digest().unwrap());
        assert!(back.check_schedule(&other).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let mut c = cfg();
        c.base_width = 6;
        assert!(Denoiser::new(c, &s, 1, 0).is_err());
    }
}
