use candle_core::Tensor;
use candle_nn::optim::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserConfig, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::nn::{permutation, scalar};
use crate::tensor::{gaussian_vec, SpatialTensor, DEVICE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Where the training images came from; recorded, not read.
    pub dataset_path: Option<String>,
    /// Probability of replacing a class label with the empty label.
    pub cond_dropout: f64,
    /// Training schedule density relative to the sampling schedule.
    pub dense_stride: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 32, learning_rate: 2e-3, seed: 0, dataset_path: None, cond_dropout: 0.2, dense_stride: 20 }
    }
}

impl DiffusionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.dense_stride == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("epochs, batch size, stride and learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Draws `(x_t, eps, time input, alpha)` for a batch at uniformly sampled steps.
fn noised_batch(x0: &Tensor, dense: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor, Vec<f32>, Vec<f32>)> {
    let (n, c, h, w) = x0.dims4()?;
    let per = c * h * w;
    let mut eps = Vec::with_capacity(n * per);
    let mut sa = Vec::with_capacity(n);
    let mut sb = Vec::with_capacity(n);
    let mut time = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for _ in 0..n {
        let t = rng.random_range(1..=dense.steps());
        let a = dense.alpha(t);
        sa.push(a.sqrt() as f32);
        sb.push((1.0 - a).sqrt() as f32);
        time.push(dense.time_input(t));
        alpha.push(a as f32);
        eps.extend(gaussian_vec(rng.random(), per));
    }
    let eps = Tensor::from_vec(eps, (n, c, h, w), &DEVICE)?;
    let sa = Tensor::from_vec(sa, (n, 1, 1, 1), &DEVICE)?;
    let sb = Tensor::from_vec(sb, (n, 1, 1, 1), &DEVICE)?;
    let xt = (x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?;
    Ok((xt, eps, time, alpha))
}

/// Fits a fresh denoiser with the epsilon-prediction MSE objective.
///
/// `labels` gives per-item classes (`None` trains unconditionally). The
/// returned model is bound to `sched`; training draws steps from
/// `sched.dense(cfg.dense_stride)`.
pub fn train_denoiser(
    data: &SpatialTensor,
    labels: Option<&[u32]>,
    sched: &NoiseSchedule,
    model_cfg: DenoiserConfig,
    cfg: &DiffusionTrainConfig,
) -> Result<(Denoiser, DiffusionTrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("cannot train a denoiser on an empty dataset"));
    }
    if let Some(l) = labels {
        if l.len() != data.len() {
            return Err(invalid("label count does not match dataset"));
        }
        if l.iter().any(|&k| k as usize >= model_cfg.num_classes) {
            return Err(invalid("label outside the configured class range"));
        }
    }
    let dense = sched.dense(cfg.dense_stride)?;
    let mut model = Denoiser::new(model_cfg, sched, cfg.dense_stride, cfg.seed)?;
    let empty = model.config().num_classes as u32;
    let mut opt = model.store().adam(cfg.learning_rate, (0.9, 0.999))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1FF_0510);
    let n = data.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = permutation(n, &mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x0 = data.select(chunk)?;
            let (xt, eps, time, alpha) = noised_batch(x0.data(), &dense, &mut rng)?;
            let ids: Vec<u32> = chunk
                .iter()
                .map(|&i| match labels {
                    Some(l) if !rng.random_bool(cfg.cond_dropout) => l[i],
                    _ => empty,
                })
                .collect();
            let pred = model.forward(&xt, &time, &alpha, &ids)?;
            let loss = (pred - eps)?.sqr()?.mean_all()?;
            opt.backward_step(&loss)?;
            total += f64::from(scalar(&loss)?);
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("denoiser epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }
    let final_loss = *epoch_losses.last().expect("at least one epoch");
    {
        let meta = model.meta_mut();
        meta.final_loss = Some(final_loss);
        meta.epochs = cfg.epochs;
    }
    Ok((model, DiffusionTrainReport { seed: cfg.seed, epoch_losses, final_loss }))
}

/// Mean squared epsilon-prediction error on held-out data at uniformly drawn
/// steps of the sampling schedule.
pub fn eval_eps_mse(model: &Denoiser, data: &SpatialTensor, labels: Option<&[u32]>, seed: u64) -> Result<f64> {
    let sched = model.schedule().clone();
    let empty = model.config().num_classes as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for start in (0..data.len()).step_by(64) {
        let len = 64.min(data.len() - start);
        let x0 = data.slice(start, len)?;
        let (xt, eps, time, alpha) = noised_batch(x0.data(), &sched, &mut rng)?;
        let ids: Vec<u32> = (start..start + len).map(|i| labels.map_or(empty, |l| l[i])).collect();
        let pred = model.forward(&xt, &time, &alpha, &ids)?.detach();
        total += f64::from(scalar(&(pred - eps)?.sqr()?.sum_all()?)?);
        count += x0.data().elem_count();
    }
    Ok(total / count as f64)
}

