//! Watermark removal: surrogate PGD in latent or pixel space, regeneration,
//! and adversarial noising through a weaker diffusion model.

use candle_core::{Tensor, Var};
use candle_nn::optim::Optimizer;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::diffusion::{invert_tensor, Denoiser};
use crate::error::{invalid, Error, Result};
use crate::nn::{adam, cross_entropy_per_item, scalar};
use crate::spectrum::SpectralTransform;
use crate::surrogate::{classify, latent_spectrum, Features, SurrogateMode, SurrogateModel};
use crate::tensor::{derive_seed, gaussian_vec, Domain, SpatialTensor, DEVICE};
use crate::watermark::FrequencyKey;

/// Images attacked together; Adam is elementwise and the loss is a sum of
/// per-image terms, so batching does not couple images.
const CHUNK: usize = 64;
const BUDGET_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Max-norm radius of the cumulative perturbation, in the attacked domain.
    pub budget: f64,
    pub target_label: u32,
    pub betas: (f64, f64),
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { steps: 200, step_size: 0.05, budget: 0.1, target_label: 0, betas: (0.9, 0.999), seed: 0 }
    }
}

impl AttackConfig {
    /// A zero step size or budget is accepted and yields the unperturbed path.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) || !(self.budget >= 0.0 && self.budget.is_finite()) {
            return Err(Error::Config("attack step size and budget must be finite and non-negative".into()));
        }
        if self.target_label > 1 {
            return Err(Error::Config("target label must be 0 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub images: SpatialTensor,
    /// Mean per-image loss before each update.
    pub loss_trace: Vec<f64>,
    /// Surrogate probability of "watermarked" after the attack (empty when
    /// the attack has no surrogate classifier).
    pub final_prob: Vec<f32>,
    /// Largest absolute perturbation actually applied, in the attacked domain.
    pub effective_budget: f64,
}

/// Budget in latent units: `delta_image / p`, with `p` the largest absolute
/// latent value in the sample.
pub fn scale_budget(wm_latents: &SpatialTensor, delta_image: f64) -> Result<f64> {
    if wm_latents.is_empty() {
        return Err(invalid("budget scaling needs at least one latent"));
    }
    let p = f64::from(wm_latents.max_abs()?);
    if p == 0.0 {
        return Err(invalid("all-zero latents give no budget scale"));
    }
    Ok(delta_image / p)
}

fn check_budget(eta: &Tensor, budget: f64) -> Result<f64> {
    let m = f64::from(eta.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?);
    if m > budget + BUDGET_SLACK {
        return Err(Error::Invariant(format!("perturbation {m} exceeds budget {budget}")));
    }
    Ok(m)
}

/// Shared projected-Adam loop. `loss_of` maps the perturbed input to
/// per-item losses to minimise; `project` maps the raw perturbation back
/// into the feasible set.
fn projected_adam(
    x0: &Tensor,
    cfg: &AttackConfig,
    mut loss_of: impl FnMut(&Tensor) -> Result<Tensor>,
    project: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<(Tensor, Vec<f64>, f64)> {
    let eta = Var::from_tensor(&x0.zeros_like()?)?;
    let mut opt = adam(vec![eta.clone()], cfg.step_size, cfg.betas)?;
    let n = x0.dim(0)? as f64;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut used = 0.0f64;
    for _ in 0..cfg.steps {
        let per_item = loss_of(&(x0 + eta.as_tensor())?)?;
        let loss = per_item.sum_all()?;
        trace.push(f64::from(scalar(&loss)?) / n);
        opt.backward_step(&loss)?;
        eta.set(&project(eta.as_tensor())?)?;
        used = used.max(check_budget(eta.as_tensor(), cfg.budget)?);
    }
    Ok(((x0 + eta.as_tensor())?.detach(), trace, used))
}

fn merge_traces(traces: &[(Vec<f64>, usize)]) -> Vec<f64> {
    let total: usize = traces.iter().map(|(_, n)| n).sum();
    let steps = traces.first().map_or(0, |(t, _)| t.len());
    (0..steps).map(|s| traces.iter().map(|(t, n)| t[s] * *n as f64).sum::<f64>() / total as f64).collect()
}

fn surrogate_loss(model: &SurrogateModel, f: &Features, target: u32) -> Result<Tensor> {
    let n = f.len();
    cross_entropy_per_item(&classify(model, f)?.logits, &vec![target; n])
}

/// Surrogate PGD in latent space: encode once, perturb the latent so the
/// spectral surrogate predicts `target_label`, then decode.
pub fn pgd_latent_attack(images: &SpatialTensor, surrogate: &SurrogateModel, codec: &Codec, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if !surrogate.mode().is_spectral() {
        return Err(invalid("latent PGD needs a spectrum-mode surrogate"));
    }
    if surrogate.input_shape() != codec.latent_shape() {
        return Err(invalid(format!(
            "surrogate input {:?} does not match codec latents {:?}",
            surrogate.input_shape(),
            codec.latent_shape()
        )));
    }
    let latents = codec.encode(images)?;
    let budget = cfg.budget;
    let mut outs = Vec::new();
    let mut traces = Vec::new();
    let mut probs = Vec::new();
    let mut used = 0.0f64;
    for start in (0..latents.len()).step_by(CHUNK) {
        let z0 = latents.slice(start, CHUNK.min(latents.len() - start))?;
        let (z, trace, u) = projected_adam(
            z0.data(),
            cfg,
            |z| surrogate_loss(surrogate, &latent_spectrum(z)?, cfg.target_label),
            |eta| Ok(eta.clamp(-budget as f32, budget as f32)?),
        )?;
        probs.extend(classify(surrogate, &latent_spectrum(&z)?)?.prob_watermarked.detach().to_vec1::<f32>()?);
        traces.push((trace, z0.len()));
        outs.push(SpatialTensor::new(z, Domain::Latent)?);
        used = used.max(u);
    }
    let images = codec.decode(&SpatialTensor::cat(&outs)?)?;
    Ok(AttackResult { images, loss_trace: merge_traces(&traces), final_prob: probs, effective_budget: used })
}

/// Keeps `x0 + eta` inside the pixel range while staying in the budget ball.
fn pixel_projection(x0: &Tensor, eta: &Tensor, budget: f64) -> Result<Tensor> {
    let eta = eta.clamp(-budget as f32, budget as f32)?;
    Ok(((x0 + eta)?.clamp(-1f32, 1f32)? - x0)?)
}

/// Surrogate PGD directly on pixels against a pixel-mode surrogate.
pub fn pgd_pixel_attack(images: &SpatialTensor, surrogate: &SurrogateModel, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if surrogate.mode() != SurrogateMode::Pixel {
        return Err(invalid("pixel PGD needs a pixel-mode surrogate"));
    }
    if images.domain() != Domain::Pixel {
        return Err(invalid("pixel PGD attacks pixel-domain images"));
    }
    let mut outs = Vec::new();
    let mut traces = Vec::new();
    let mut probs = Vec::new();
    let mut used = 0.0f64;
    for start in (0..images.len()).step_by(CHUNK) {
        let x0 = images.slice(start, CHUNK.min(images.len() - start))?;
        let base = x0.data().clone();
        let (x, trace, u) = projected_adam(
            x0.data(),
            cfg,
            |x| surrogate_loss(surrogate, &Features { re: x.clone(), im: None }, cfg.target_label),
            |eta| pixel_projection(&base, eta, cfg.budget),
        )?;
        probs.extend(classify(surrogate, &Features { re: x.clone(), im: None })?.prob_watermarked.detach().to_vec1::<f32>()?);
        traces.push((trace, x0.len()));
        outs.push(SpatialTensor::new(x, Domain::Pixel)?);
        used = used.max(u);
    }
    Ok(AttackResult { images: SpatialTensor::cat(&outs)?, loss_trace: merge_traces(&traces), final_prob: probs, effective_budget: used })
}

/// `decode(encode(x) + N(0, noise_std^2))` with per-image seeded noise.
pub fn regeneration_attack(images: &SpatialTensor, codec: &Codec, noise_std: f64, seed: u64) -> Result<SpatialTensor> {
    if !(noise_std >= 0.0) {
        return Err(invalid("noise_std must be non-negative"));
    }
    let z = codec.encode(images)?;
    let (n, c, h, w) = z.dims();
    let mut noise = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        noise.extend(gaussian_vec(derive_seed(seed, i as u64), c * h * w).into_iter().map(|v| v * noise_std as f32));
    }
    let noise = Tensor::from_vec(noise, (n, c, h, w), &DEVICE)?;
    codec.decode(&z.with_data((z.data() + noise)?)?)
}

/// Differentiable key distance of latents already at step `T`: mean L1 over
/// real and imaginary parts at the masked positions of the carrier channel.
fn key_distance_tensor(latents: &Tensor, key: &FrequencyKey, transform: &SpectralTransform) -> Result<Tensor> {
    let (n, _, h, w) = latents.dims4()?;
    let carrier = latents.narrow(1, key.channel(), 1)?;
    let (re, im) = transform.forward(&carrier)?;
    let idx: Vec<u32> = key.positions().iter().map(|&p| p as u32).collect();
    let m = idx.len();
    let idx = Tensor::from_vec(idx, m, &DEVICE)?;
    let targets = key.targets();
    let tre = Tensor::from_vec(targets.iter().map(|v| v.re as f32).collect::<Vec<_>>(), (1, m), &DEVICE)?;
    let tim = Tensor::from_vec(targets.iter().map(|v| v.im as f32).collect::<Vec<_>>(), (1, m), &DEVICE)?;
    let pick = |t: &Tensor| -> Result<Tensor> { Ok(t.reshape((n, h * w))?.index_select(&idx, 1)?) };
    let dre = pick(&re)?.broadcast_sub(&tre)?.abs()?;
    let dim = pick(&im)?.broadcast_sub(&tim)?.abs()?;
    Ok(((dre + dim)?.sum(1)? / (2 * m) as f64)?)
}

/// Pixel perturbation that pushes the key extracted through a weaker
/// diffusion model away from the embedded key.
pub fn adversarial_noising(
    images: &SpatialTensor,
    surrogate_diffusion: &Denoiser,
    key: Option<&FrequencyKey>,
    codec: &Codec,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let key = key.ok_or_else(|| invalid("adversarial noising needs the key"))?;
    if images.domain() != Domain::Pixel {
        return Err(invalid("adversarial noising attacks pixel-domain images"));
    }
    let (_, h, w) = key.shape();
    let transform = SpectralTransform::new(h, w)?;
    let sched = surrogate_diffusion.schedule();
    let mut outs = Vec::new();
    let mut traces = Vec::new();
    let mut used = 0.0f64;
    for start in (0..images.len()).step_by(CHUNK) {
        let x0 = images.slice(start, CHUNK.min(images.len() - start))?;
        let base = x0.data().clone();
        let (x, trace, u) = projected_adam(
            x0.data(),
            cfg,
            |x| {
                let z = codec.encode_tensor(x)?;
                let zt = invert_tensor(&z, surrogate_diffusion, sched, true)?;
                Ok(key_distance_tensor(&zt, key, &transform)?.neg()?)
            },
            |eta| pixel_projection(&base, eta, cfg.budget),
        )?;
        traces.push((trace, x0.len()));
        outs.push(SpatialTensor::new(x, Domain::Pixel)?);
        used = used.max(u);
    }
    Ok(AttackResult { images: SpatialTensor::cat(&outs)?, loss_trace: merge_traces(&traces), final_prob: Vec::new(), effective_budget: used })
}
