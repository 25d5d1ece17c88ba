//! Watermarked generation and inversion-based detection.

use crate::codec::Codec;
use crate::diffusion::{ddim_invert, ddim_sample, Condition, Denoiser, NoisePredictor, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::tensor::{Domain, SpatialTensor};
use crate::watermark::{embed_key, latent_distances, DetectionResult, FrequencyKey};

/// Items processed per diffusion call.
const CHUNK: usize = 100;

/// Initial Gaussian latents, one per seed, shaped for `model`.
pub fn initial_latents(model: &Denoiser, seeds: &[u64]) -> Result<SpatialTensor> {
    let c = model.config();
    SpatialTensor::gaussian((c.channels, c.height, c.width), seeds, Domain::Latent)
}

fn chunked(x: &SpatialTensor, mut f: impl FnMut(&SpatialTensor, usize) -> Result<SpatialTensor>) -> Result<SpatialTensor> {
    let mut parts = Vec::new();
    for start in (0..x.len()).step_by(CHUNK) {
        parts.push(f(&x.slice(start, CHUNK.min(x.len() - start))?, start)?);
    }
    SpatialTensor::cat(&parts)
}

/// `decode(D_theta(x_T))` with `x_T` drawn from `seeds` and, when a key is
/// given, watermarked first. `conds` holds one condition or one per seed.
pub fn generate(
    model: &Denoiser,
    codec: &Codec,
    seeds: &[u64],
    conds: &[Condition],
    key: Option<&FrequencyKey>,
) -> Result<SpatialTensor> {
    if seeds.is_empty() {
        return Err(invalid("nothing to generate"));
    }
    if conds.len() != 1 && conds.len() != seeds.len() {
        return Err(invalid(format!("{} conditions for {} seeds", conds.len(), seeds.len())));
    }
    let mut xt = initial_latents(model, seeds)?;
    if let Some(k) = key {
        xt = embed_key(&xt, k)?;
    }
    let sched = model.schedule();
    let latents = chunked(&xt, |part, start| {
        let c = if conds.len() == 1 { conds } else { &conds[start..start + part.len()] };
        ddim_sample(part, model, c, sched)
    })?;
    codec.decode(&latents)
}

/// Key distance after inverting to step `T`. Pixel inputs are encoded with
/// `codec` first; latent inputs are inverted directly.
pub fn detection_distances(
    x: &SpatialTensor,
    key: &FrequencyKey,
    model: &dyn NoisePredictor,
    codec: Option<&Codec>,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let latents = match x.domain() {
        Domain::Latent => x.clone(),
        Domain::Pixel => codec.ok_or_else(|| invalid("image input needs a codec"))?.encode(x)?,
    };
    let inverted = chunked(&latents, |part, _| ddim_invert(part, model, sched))?;
    latent_distances(&inverted, key)
}

/// Full detector: inversion, extraction and the `distance <= tau` decision.
pub fn detect(
    x: &SpatialTensor,
    key: &FrequencyKey,
    model: &dyn NoisePredictor,
    codec: Option<&Codec>,
    sched: &NoiseSchedule,
    tau: f64,
) -> Result<Vec<DetectionResult>> {
    Ok(detection_distances(x, key, model, codec, sched)?.into_iter().map(|d| DetectionResult::new(d, tau)).collect())
}
