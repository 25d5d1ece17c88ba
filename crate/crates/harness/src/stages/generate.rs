use ringlab_core::diffusion::Condition;
use ringlab_core::pipeline::generate as sample;
use ringlab_core::surrogate::{Provenance, SurrogateDataset};
use ringlab_core::tensor::SpatialTensor;
use ringlab_core::watermark::generate_key;

use crate::error::Result;
use crate::manifest::{Recorder, RunManifest};
use crate::run::{Run, Space, Stage, STREAM_EVAL, STREAM_NO_ATTACK, STREAM_PAIRED, STREAM_PUBLIC};
use crate::store;

/// Offset between the seed ranges of different evaluation seeds.
const EVAL_SEED_STRIDE: u64 = 1 << 20;

fn cond_label(c: &Option<Condition>) -> String {
    match c {
        None => String::new(),
        Some(Condition::Empty) => "empty".into(),
        Some(Condition::Class(k)) => format!("class-{k}"),
    }
}

fn provenance_label(p: Provenance) -> &'static str {
    match p {
        Provenance::GeneratedWm => "generated-wm",
        Provenance::GeneratedUnwm => "generated-unwm",
        Provenance::Public => "public",
    }
}

fn save_dataset(rec: &mut Recorder, dir: &str, name: &str, ds: &SurrogateDataset) -> Result<()> {
    let rel = format!("{dir}/{name}.safetensors");
    store::save_images(&rec.path(&rel), &ds.images)?;
    rec.add(&rel)?;
    let rows: Vec<Vec<String>> = ds
        .rows()
        .iter()
        .map(|r| {
            vec![
                r.id.to_string(),
                r.label.to_string(),
                provenance_label(r.provenance).to_string(),
                r.seed.map_or_else(String::new, |s| s.to_string()),
                cond_label(&r.cond),
            ]
        })
        .collect();
    let csv = format!("{dir}/{name}.csv");
    store::write_csv(&rec.path(&csv), &["id", "label", "provenance", "seed", "condition"], &rows)?;
    rec.add(&csv)
}

fn save_set(rec: &mut Recorder, rel: &str, x: &SpatialTensor) -> Result<()> {
    store::save_images(&rec.path(rel), x)?;
    rec.add(rel)
}

/// Key, surrogate training datasets and evaluation sets for one victim.
fn generate_space(run: &Run, rec: &mut Recorder, space: Space, classes: usize) -> Result<()> {
    let cfg = &run.cfg;
    let ds = &cfg.datasets;
    let model = run.load_denoiser(space)?;
    let codec = run.victim_codec(space)?;
    let mut public = run.load_split("public")?;
    if space == Space::Pixel {
        public = public.downsample2()?;
    }
    let dir = space.dir();
    let mc = model.config();
    let channel = match space {
        Space::Latent => cfg.key.channel,
        Space::Pixel => cfg.pixel_space.channel,
    };
    let mut key = generate_key((mc.channels, mc.height, mc.width), &cfg.key.radii, channel, cfg.key.seed)?;
    key.set_distance_mode(cfg.key.distance);
    let key_rel = format!("{dir}/key.json");
    store::ensure_parent(&rec.path(&key_rel))?;
    key.save(&rec.path(&key_rel))?;
    rec.add(&key_rel)?;

    let seeds = run.seeds(STREAM_PAIRED, 0, ds.n_pairs);
    let conds = run.conditions(ds.n_pairs, classes);
    let wm = sample(&model, &codec, &seeds, &conds, Some(&key))?;
    let clean = sample(&model, &codec, &seeds, &conds, None)?;
    let n = ds.n_pairs;
    let paired = SurrogateDataset::new(
        SpatialTensor::cat(&[wm, clean])?,
        [vec![Provenance::GeneratedWm; n], vec![Provenance::GeneratedUnwm; n]].concat(),
        seeds.iter().chain(&seeds).map(|&s| Some(s)).collect(),
        conds.iter().chain(&conds).map(|&c| Some(c)).collect(),
    )?;
    save_dataset(rec, dir, "paired", &paired)?;

    let n = ds.n_public;
    let seeds = run.seeds(STREAM_PUBLIC, 0, n);
    let conds = run.conditions(n, classes);
    let wm = sample(&model, &codec, &seeds, &conds, Some(&key))?;
    let mixed = SurrogateDataset::new(
        SpatialTensor::cat(&[wm, public.images.slice(0, n)?])?,
        [vec![Provenance::GeneratedWm; n], vec![Provenance::Public; n]].concat(),
        seeds.iter().map(|&s| Some(s)).chain(std::iter::repeat_n(None, n)).collect(),
        conds.iter().map(|&c| Some(c)).chain(std::iter::repeat_n(None, n)).collect(),
    )?;
    save_dataset(rec, dir, "public", &mixed)?;

    for s in run.eval_seeds(space) {
        let seeds = run.seeds(STREAM_EVAL, s * EVAL_SEED_STRIDE, ds.n_eval);
        let conds = run.conditions(ds.n_eval, classes);
        let wm = sample(&model, &codec, &seeds, &conds, Some(&key))?;
        let clean = sample(&model, &codec, &seeds, &conds, None)?;
        save_set(rec, &format!("{dir}/eval_s{s}_wm.safetensors"), &wm)?;
        save_set(rec, &format!("{dir}/eval_s{s}_clean.safetensors"), &clean)?;
        if s == run.first_seed() {
            let k = ds.n_eval.min(8);
            let rel = format!("{dir}/eval_preview.png");
            store::save_grid(&rec.path(&rel), &SpatialTensor::cat(&[wm.slice(0, k)?, clean.slice(0, k)?])?, k)?;
            rec.add(&rel)?;
        }
    }
    if space == Space::Latent {
        let seeds = run.seeds(STREAM_NO_ATTACK, 0, ds.n_no_attack);
        let conds = run.conditions(ds.n_no_attack, classes);
        save_set(rec, "gen/no_attack_wm.safetensors", &sample(&model, &codec, &seeds, &conds, Some(&key))?)?;
        save_set(rec, "gen/no_attack_clean.safetensors", &sample(&model, &codec, &seeds, &conds, None)?)?;
    }
    Ok(())
}

/// Watermarked and paired clean generations: surrogate datasets, per-seed
/// evaluation sets and the no-attack detection set.
pub fn generate(run: &Run) -> Result<RunManifest> {
    let classes = run.num_classes()?;
    run.load_denoiser(Space::Latent)?;
    run.load_codec(ringlab_core::codec::CodecVariant::Same)?;
    if run.pixel_space_needed() {
        run.load_denoiser(Space::Pixel)?;
    }
    let mut rec = run.begin(Stage::Generate)?;
    generate_space(run, &mut rec, Space::Latent, classes)?;
    if run.pixel_space_needed() {
        generate_space(run, &mut rec, Space::Pixel, classes)?;
    }
    rec.finish()
}
