use std::collections::HashMap;

use ringlab_core::attacks::{adversarial_noising, pgd_latent_attack, pgd_pixel_attack, regeneration_attack, scale_budget, AttackConfig};
use ringlab_core::codec::{Codec, CodecVariant};
use ringlab_core::tensor::SpatialTensor;

use crate::config::AttackMethod;
use crate::error::Result;
use crate::manifest::RunManifest;
use crate::run::{AttackJob, Run, Space, Stage, SurrogateSpec, STREAM_ATTACK};
use crate::stages::train::load_noising_denoiser;
use crate::store::{self, fmt};

/// Pixel-space max-norm radius for a level on the 0-255 scale, in [-1, 1] units.
pub fn pixel_budget(delta: f64) -> f64 {
    2.0 * delta / 255.0
}

/// Budget of a gradient attack at level `delta`. Latent attacks rescale by
/// the largest absolute latent so that `reference_delta` maps to `1 / p`.
pub fn budget_for(run: &Run, job: &AttackJob, codec: &Codec, images: &SpatialTensor) -> Result<f64> {
    Ok(match job.cell.method {
        AttackMethod::LatentPgd if job.cell.codec != CodecVariant::Identity => {
            scale_budget(&codec.encode(images)?, job.param / run.cfg.attack.reference_delta)?
        }
        AttackMethod::Regeneration => 0.0,
        _ => pixel_budget(job.param),
    })
}

struct Outcome {
    images: SpatialTensor,
    budget: f64,
    effective: f64,
    loss_trace: Vec<f64>,
    final_prob: Vec<f32>,
}

pub fn attack(run: &Run) -> Result<RunManifest> {
    let cfg = &run.cfg;
    let jobs = run.attack_jobs();
    // Check every upstream artifact before touching the outputs.
    for spec in run.surrogate_specs() {
        run.require(&Run::surrogate_rel(&spec.name()), Stage::TrainSurrogate)?;
    }
    for j in &jobs {
        run.require(&format!("{}/eval_s{}_wm.safetensors", j.space().dir(), j.seed), Stage::Generate)?;
    }
    let mut codecs: HashMap<String, Codec> = HashMap::new();
    for j in &jobs {
        let v = j.cell.codec;
        codecs.entry(format!("{v:?}")).or_insert(run.load_codec(v)?);
    }
    let noising = if run.noising_needed() { Some(load_noising_denoiser(run)?) } else { None };
    let key = run.load_key(Space::Latent)?;
    let victim = run.load_codec(CodecVariant::Same)?;

    let mut rec = run.begin(Stage::Attack)?;
    let mut rows = Vec::new();
    let mut trace_rows = Vec::new();
    for job in &jobs {
        let wm = run.load_generated(job.space(), &format!("eval_s{}_wm", job.seed))?;
        let seed = run.seed_for(STREAM_ATTACK, job.seed);
        let codec = &codecs[&format!("{:?}", job.cell.codec)];
        let budget = budget_for(run, job, codec, &wm)?;
        let acfg = AttackConfig { steps: cfg.attack.steps, step_size: cfg.attack.step_size, budget, target_label: 0, betas: cfg.attack.betas, seed };
        let out = match job.cell.method {
            AttackMethod::LatentPgd | AttackMethod::PixelPgd => {
                let surrogate = run.load_surrogate(&SurrogateSpec::for_cell(&job.cell).name())?;
                let r = if job.cell.method == AttackMethod::LatentPgd {
                    pgd_latent_attack(&wm, &surrogate, codec, &acfg)?
                } else {
                    pgd_pixel_attack(&wm, &surrogate, &acfg)?
                };
                Outcome { images: r.images, budget, effective: r.effective_budget, loss_trace: r.loss_trace, final_prob: r.final_prob }
            }
            AttackMethod::Regeneration => {
                let images = regeneration_attack(&wm, &victim, job.param, seed)?;
                Outcome { images, budget: f64::NAN, effective: f64::NAN, loss_trace: Vec::new(), final_prob: Vec::new() }
            }
            AttackMethod::AdversarialNoising => {
                let model = noising.as_ref().expect("noising model loaded when a noising cell exists");
                let r = adversarial_noising(&wm, model, Some(&key), &victim, &acfg)?;
                Outcome { images: r.images, budget, effective: r.effective_budget, loss_trace: r.loss_trace, final_prob: r.final_prob }
            }
        };
        let rel = job.rel_path();
        store::save_images(&rec.path(&rel), &out.images)?;
        rec.add(&rel)?;
        let fooled = if out.final_prob.is_empty() {
            String::new()
        } else {
            fmt(out.final_prob.iter().filter(|&&p| p < 0.5).count() as f64 / out.final_prob.len() as f64)
        };
        let opt = |v: f64| if v.is_nan() { String::new() } else { fmt(v) };
        log::info!("attack {} p={} s={}: done", job.cell, job.param, job.seed);
        rows.push(vec![
            job.cell.to_string(),
            fmt(job.param),
            job.seed.to_string(),
            opt(out.budget),
            opt(out.effective),
            out.loss_trace.last().map_or_else(String::new, |&l| fmt(l)),
            fooled,
            fmt(f64::from(out.images.mean_abs_diff(&wm)?)),
        ]);
        for (step, l) in out.loss_trace.iter().enumerate() {
            trace_rows.push(vec![job.cell.to_string(), fmt(job.param), job.seed.to_string(), step.to_string(), fmt(*l)]);
        }
    }
    store::write_csv(
        &rec.path("attacks/attacks.csv"),
        &["cell", "param", "seed", "budget", "effective_budget", "final_loss", "surrogate_fooled", "mean_abs_pixel_change"],
        &rows,
    )?;
    rec.add("attacks/attacks.csv")?;
    store::write_csv(&rec.path("attacks/loss_trace.csv"), &["cell", "param", "seed", "step", "loss"], &trace_rows)?;
    rec.add("attacks/loss_trace.csv")?;
    rec.finish()
}
