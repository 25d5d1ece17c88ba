use ringlab_core::codec::{self, make_variant_codec, Codec, CodecTrainConfig, CodecVariant, VaeConfig};
use ringlab_core::diffusion::{make_schedule, train_denoiser, DenoiserConfig, DiffusionTrainConfig};
use ringlab_core::surrogate::{pixel_features, spectrum_features, train_surrogate as fit_surrogate, SurrogateConfig, SurrogateMode};

use crate::error::{HarnessError, Result};
use crate::manifest::{Recorder, RunManifest};
use crate::run::{Run, Space, Stage};
use crate::store::{self, fmt};

const NOISING_REL: &str = "models/noising-denoiser.safetensors";

fn save_codec(rec: &mut Recorder, codec: &Codec, variant: CodecVariant) -> Result<()> {
    let rel = Run::codec_rel(variant);
    let digest = codec.save(&rec.path(rel))?;
    rec.add(rel)?;
    rec.checkpoint(&format!("codec-{variant:?}").to_lowercase(), &digest);
    Ok(())
}

fn reconstruction_mae(codec: &Codec, images: &ringlab_core::tensor::SpatialTensor) -> Result<f64> {
    Ok(f64::from(codec.decode(&codec.encode(images)?)?.mean_abs_diff(images)?))
}

/// Trains the victim codec and the attacker variants the attack cells use.
/// Variants are trained on the public split, disjoint from the victim's data.
pub fn train_codec(run: &Run) -> Result<RunManifest> {
    let cfg = &run.cfg;
    let k = &cfg.codec;
    let data = run.load_split("codec_train")?;
    let public = run.load_split("public")?;
    let eval = run.load_split("eval")?;
    let mut rec = run.begin(Stage::TrainCodec)?;
    let arch = VaeConfig { pixel_shape: cfg.pixel_shape(), latent_channels: k.latent_channels, width: k.width, groups: k.groups };
    let tc = CodecTrainConfig { epochs: k.epochs, batch_size: k.batch_size, learning_rate: k.learning_rate, kl_weight: k.kl_weight, seed: k.seed };
    let (victim, report) = codec::train_codec(&data.images, &arch, &tc)?;
    save_codec(&mut rec, &victim, CodecVariant::Same)?;
    let row = |name: &str, width: usize, epochs: usize, loss: Option<f64>, c: &Codec| -> Result<Vec<String>> {
        Ok(vec![
            name.to_string(),
            width.to_string(),
            epochs.to_string(),
            loss.map_or_else(String::new, fmt),
            fmt(f64::from(c.meta().latent_scale)),
            fmt(reconstruction_mae(c, &eval.images)?),
        ])
    };
    let mut rows = vec![row("same", k.width, k.epochs, Some(report.final_loss), &victim)?];
    let variants: Vec<CodecVariant> = {
        let mut v: Vec<CodecVariant> = cfg.all_cells().iter().map(|c| c.codec).collect();
        v.sort_by_key(|c| format!("{c:?}"));
        v.dedup();
        v
    };
    for variant in variants {
        let trained = match variant {
            CodecVariant::Finetuned => {
                let ft = CodecTrainConfig { epochs: k.finetune_epochs, ..tc.clone() };
                let c = make_variant_codec(variant, Some(&victim), Some(&public.images), None, &ft)?;
                Some((c, k.width, k.finetune_epochs))
            }
            CodecVariant::DifferentArch => {
                let alt = VaeConfig { width: k.alt_width, ..arch.clone() };
                let at = CodecTrainConfig { epochs: k.alt_epochs, seed: k.seed.wrapping_add(1), ..tc.clone() };
                let c = make_variant_codec(variant, None, Some(&public.images), Some(&alt), &at)?;
                Some((c, k.alt_width, k.alt_epochs))
            }
            CodecVariant::Same | CodecVariant::Identity => None,
        };
        if let Some((c, width, epochs)) = trained {
            save_codec(&mut rec, &c, variant)?;
            rows.push(row(&format!("{variant:?}").to_lowercase(), width, epochs, c.meta().final_loss, &c)?);
        }
    }
    store::write_csv(&rec.path("models/codec_report.csv"), &["codec", "width", "epochs", "final_loss", "latent_scale", "eval_reconstruction_mae"], &rows)?;
    rec.add("models/codec_report.csv")?;
    rec.finish()
}

/// Trains the victim denoiser, plus the pixel-space victim and the weaker
/// attacker model when the attack cells need them.
pub fn train_diffusion(run: &Run) -> Result<RunManifest> {
    let cfg = &run.cfg;
    let d = &cfg.diffusion;
    let codec = run.load_codec(CodecVariant::Same)?;
    let data = run.load_split("diffusion_train")?;
    let mut rec = run.begin(Stage::TrainDiffusion)?;
    let classes = data.num_classes().max(1);
    let sched = make_schedule(d.steps, d.schedule)?;
    let tc = DiffusionTrainConfig {
        epochs: d.epochs,
        batch_size: d.batch_size,
        learning_rate: d.learning_rate,
        seed: d.seed,
        dataset_path: Some("data/diffusion_train.safetensors".into()),
        cond_dropout: d.cond_dropout,
        dense_stride: d.dense_stride,
    };
    let (lc, lh, lw) = cfg.latent_shape();
    let mc = DenoiserConfig { channels: lc, height: lh, width: lw, base_width: d.base_width, groups: d.groups, num_classes: classes, embed_dim: d.embed_dim };
    let (model, report) = train_denoiser(&codec.encode(&data.images)?, Some(&data.labels), &sched, mc.clone(), &tc)?;
    let rel = Run::denoiser_rel(Space::Latent);
    rec.checkpoint("denoiser", &model.save(&rec.path(rel))?);
    rec.add(rel)?;
    let mut rows = vec![vec!["denoiser".to_string(), d.epochs.to_string(), fmt(report.final_loss)]];

    if run.pixel_space_needed() {
        let p = &cfg.pixel_space;
        let small = data.downsample2()?;
        let (c, h, w) = run.pixel_space_shape();
        let id = Codec::identity((c, h, w));
        let pc = DenoiserConfig { channels: c, height: h, width: w, base_width: p.base_width, ..mc.clone() };
        let pt = DiffusionTrainConfig { epochs: p.epochs, ..tc.clone() };
        let (pm, pr) = train_denoiser(&id.encode(&small.images)?, Some(&small.labels), &sched, pc, &pt)?;
        let rel = Run::denoiser_rel(Space::Pixel);
        rec.checkpoint("pixel-denoiser", &pm.save(&rec.path(rel))?);
        rec.add(rel)?;
        rows.push(vec!["pixel-denoiser".into(), p.epochs.to_string(), fmt(pr.final_loss)]);
    }
    if run.noising_needed() {
        let n = &cfg.attack.noising;
        let public = run.load_split("public")?;
        let ns = make_schedule(n.diffusion_steps, d.schedule)?;
        let nc = DenoiserConfig { base_width: n.base_width, ..mc };
        let nt = DiffusionTrainConfig { epochs: n.epochs, seed: d.seed.wrapping_add(1), dataset_path: Some("data/public.safetensors".into()), ..tc };
        let (nm, nr) = train_denoiser(&codec.encode(&public.images)?, Some(&public.labels), &ns, nc, &nt)?;
        rec.checkpoint("noising-denoiser", &nm.save(&rec.path(NOISING_REL))?);
        rec.add(NOISING_REL)?;
        rows.push(vec!["noising-denoiser".into(), n.epochs.to_string(), fmt(nr.final_loss)]);
    }
    store::write_csv(&rec.path("models/diffusion_report.csv"), &["model", "epochs", "final_loss"], &rows)?;
    rec.add("models/diffusion_report.csv")?;
    rec.finish()
}

pub fn load_noising_denoiser(run: &Run) -> Result<ringlab_core::diffusion::Denoiser> {
    Ok(ringlab_core::diffusion::Denoiser::load(&run.require(NOISING_REL, Stage::TrainDiffusion)?)?)
}

/// Labels of a generated surrogate dataset, read from its row table.
pub fn dataset_labels(run: &Run, space: Space, name: &str) -> Result<Vec<u32>> {
    let rows = store::read_csv(&run.require(&format!("{}/{name}.csv", space.dir()), Stage::Generate)?)?;
    rows.iter()
        .map(|r| r["label"].parse().map_err(|_| HarnessError::Runtime(format!("bad label in {name}.csv"))))
        .collect()
}

/// Trains every surrogate the attack cells use.
pub fn train_surrogate(run: &Run) -> Result<RunManifest> {
    let cfg = &run.cfg;
    let s = &cfg.surrogate;
    let specs = run.surrogate_specs();
    let mut inputs = Vec::new();
    for spec in &specs {
        let dataset = match spec.data {
            crate::config::TrainingData::Paired => "paired",
            crate::config::TrainingData::Public => "public",
        };
        let images = run.load_generated(spec.space(), dataset)?;
        let labels = dataset_labels(run, spec.space(), dataset)?;
        let codec = if spec.pixel { None } else { Some(run.load_codec(spec.codec)?) };
        inputs.push((spec, dataset, images, labels, codec));
    }
    let mut rec = run.begin(Stage::TrainSurrogate)?;
    let mut rows = Vec::new();
    for (spec, dataset, images, labels, codec) in inputs {
        let mode = if spec.pixel {
            SurrogateMode::Pixel
        } else if s.complex {
            SurrogateMode::Spectrum
        } else {
            SurrogateMode::StackedSpectrum
        };
        let features = match &codec {
            Some(c) => spectrum_features(&images, c)?,
            None => pixel_features(&images)?,
        };
        let sc = SurrogateConfig {
            mode,
            width: s.width,
            depth: s.depth,
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            train_fraction: s.train_fraction,
            seed: s.seed,
        };
        let (mut model, report) = fit_surrogate(&features, &labels, &sc)?;
        if let Some(c) = &codec {
            model.set_codec_hash(Some(c.digest()?));
        }
        let name = spec.name();
        let rel = Run::surrogate_rel(&name);
        rec.checkpoint(&format!("surrogate-{name}"), &model.save(&rec.path(&rel))?);
        rec.add(&rel)?;
        log::info!("surrogate {name}: val accuracy {:.4}", report.val_accuracy);
        rows.push(vec![
            name,
            dataset.to_string(),
            format!("{mode:?}").to_lowercase(),
            fmt(report.train_accuracy),
            fmt(report.val_accuracy),
            report.best_epoch.to_string(),
            report.train_size.to_string(),
            report.val_size.to_string(),
        ]);
    }
    store::write_csv(
        &rec.path("models/surrogate_report.csv"),
        &["surrogate", "dataset", "mode", "train_accuracy", "val_accuracy", "best_epoch", "train_size", "val_size"],
        &rows,
    )?;
    rec.add("models/surrogate_report.csv")?;
    rec.finish()
}
