use std::collections::BTreeMap;

use ringlab_core::analysis::{
    attack_diff_maps, excess_ratio, latent_projection_2d, linear_separability, masked_features, masked_gap, spectrum_progression,
    ProjectionMethod, SpectrumStep,
};
use ringlab_core::codec::Codec;
use ringlab_core::diffusion::Denoiser;
use ringlab_core::pipeline::{detection_distances, initial_latents};
use ringlab_core::quality::{train_feature_net, FeatureNetConfig, QualityMetric, QualitySuite};
use ringlab_core::tensor::SpatialTensor;
use ringlab_core::watermark::{calibrate_threshold, embed_key, FrequencyKey};
use ringlab_metrics::{mean_std, MetricsReport, ScoreSet};
use serde::{Deserialize, Serialize};

use crate::config::AttackMethod;
use crate::error::Result;
use crate::manifest::{Recorder, RunManifest};
use crate::run::{cell_slug, param_label, Run, Space, Stage, STREAM_DIAGNOSTIC};
use crate::store::{self, fmt};

pub const METRIC_COLUMNS: [&str; 5] = ["roc_auc", "pr_auc", "accuracy_at_1pct_fpr_threshold", "tpr_at_1pct_fpr", "mean_distance"];

/// Victim detector of one space.
struct Victim {
    model: Denoiser,
    codec: Codec,
    key: FrequencyKey,
}

impl Victim {
    fn load(run: &Run, space: Space) -> Result<Self> {
        Ok(Self { model: run.load_denoiser(space)?, codec: run.victim_codec(space)?, key: run.load_key(space)? })
    }

    fn distances(&self, x: &SpatialTensor) -> Result<Vec<f64>> {
        Ok(detection_distances(x, &self.key, &self.model, Some(&self.codec), self.model.schedule())?)
    }
}

/// Data the report stage renders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub spectrum: Vec<SpectrumStep>,
    pub spectrum_shape: (usize, usize),
    pub projections: BTreeMap<String, Vec<[f64; 2]>>,
    pub projection_labels: Vec<u32>,
    pub diff_maps: BTreeMap<String, ringlab_core::analysis::DiffMaps>,
}

fn neg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|d| -d).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn scores(wm: &[f64], clean: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport::from_scores(&ScoreSet::from_classes(&neg(wm), &neg(clean))?)?)
}

fn metric_values(r: &MetricsReport, wm_dist: &[f64]) -> Vec<f64> {
    vec![r.roc_auc(), r.pr_auc(), r.accuracy, r.tpr_at_1pct_fpr, mean(wm_dist)]
}

struct MetricRow {
    cell: String,
    param: f64,
    seed: u64,
    values: Vec<f64>,
}

fn write_curves(rec: &mut Recorder, stem: &str, r: &MetricsReport) -> Result<()> {
    for (suffix, text) in [
        ("roc", MetricsReport::curve_csv(&r.roc, "fpr", "tpr")),
        ("pr", MetricsReport::curve_csv(&r.pr, "recall", "precision")),
        ("base_rate", r.base_rate_csv()),
    ] {
        let rel = format!("eval/curves/{stem}_{suffix}.csv");
        store::write_bytes(&rec.path(&rel), text.as_bytes())?;
        rec.add(&rel)?;
    }
    Ok(())
}

/// Detection metrics for every attacked set, quality deltas against the
/// paired clean generations, seed summaries and the diagnostics.
pub fn evaluate(run: &Run) -> Result<RunManifest> {
    let cfg = &run.cfg;
    let jobs = run.attack_jobs();
    for j in &jobs {
        run.require(&j.rel_path(), Stage::Attack)?;
    }
    for spec in run.surrogate_specs() {
        run.require(&Run::surrogate_rel(&spec.name()), Stage::TrainSurrogate)?;
    }
    let latent = Victim::load(run, Space::Latent)?;
    let pixel = if run.pixel_space_needed() { Some(Victim::load(run, Space::Pixel)?) } else { None };
    let victim = |s: Space| -> &Victim {
        match s {
            Space::Latent => &latent,
            Space::Pixel => pixel.as_ref().expect("pixel victim loaded when needed"),
        }
    };
    let metrics: Vec<QualityMetric> = cfg.evaluation.quality_metrics.iter().map(|m| m.parse()).collect::<ringlab_core::Result<_>>()?;
    let feature_net = if metrics.contains(&QualityMetric::FeatureDistance) {
        let fc = FeatureNetConfig { epochs: cfg.evaluation.feature_net_epochs, seed: cfg.seed, ..Default::default() };
        Some(train_feature_net(&run.load_split("codec_train")?, &fc)?)
    } else {
        None
    };
    let suite = QualitySuite { feature_net };

    let mut rec = run.begin(Stage::Evaluate)?;
    let mut dist_rows: Vec<Vec<String>> = Vec::new();
    let mut record = |set: &str, seed: u64, d: &[f64]| {
        for (i, v) in d.iter().enumerate() {
            dist_rows.push(vec![set.to_string(), seed.to_string(), i.to_string(), fmt(*v)]);
        }
    };

    // Held-out no-attack check and threshold calibration.
    let d_wm = latent.distances(&run.load_generated(Space::Latent, "no_attack_wm")?)?;
    let d_cl = latent.distances(&run.load_generated(Space::Latent, "no_attack_clean")?)?;
    record("no-attack-holdout-wm", 0, &d_wm);
    record("no-attack-holdout-clean", 0, &d_cl);
    let holdout = scores(&d_wm, &d_cl)?;
    let tau = calibrate_threshold(&d_cl, cfg.evaluation.target_fpr)?;
    let mut calibrated = latent.key.clone();
    calibrated.set_threshold(tau);
    store::ensure_parent(&rec.path("eval/key.json"))?;
    calibrated.save(&rec.path("eval/key.json"))?;
    rec.add("eval/key.json")?;
    let flagged = |d: &[f64]| d.iter().filter(|&&v| v <= tau).count() as f64 / d.len() as f64;
    store::write_csv(
        &rec.path("eval/no_attack.csv"),
        &["n_watermarked", "n_clean", "roc_auc", "pr_auc", "accuracy_at_1pct_fpr_threshold", "tpr_at_1pct_fpr", "threshold", "flagged_watermarked", "flagged_clean", "mean_wm_distance", "mean_clean_distance", "sampling_steps", "inversion_steps"],
        &[vec![
            d_wm.len().to_string(),
            d_cl.len().to_string(),
            fmt(holdout.roc_auc()),
            fmt(holdout.pr_auc()),
            fmt(holdout.accuracy),
            fmt(holdout.tpr_at_1pct_fpr),
            fmt(tau),
            fmt(flagged(&d_wm)),
            fmt(flagged(&d_cl)),
            fmt(mean(&d_wm)),
            fmt(mean(&d_cl)),
            cfg.diffusion.steps.to_string(),
            cfg.diffusion.steps.to_string(),
        ]],
    )?;
    rec.add("eval/no_attack.csv")?;

    // Per-seed clean references and unattacked baselines.
    let mut clean: BTreeMap<(u8, u64), (SpatialTensor, SpatialTensor, Vec<f64>)> = BTreeMap::new();
    let mut rows: Vec<MetricRow> = Vec::new();
    let spaces: Vec<Space> = if pixel.is_some() { vec![Space::Latent, Space::Pixel] } else { vec![Space::Latent] };
    let nq = metrics.len();
    for &space in &spaces {
        for s in run.eval_seeds(space) {
            let wm = run.load_generated(space, &format!("eval_s{s}_wm"))?;
            let cl = run.load_generated(space, &format!("eval_s{s}_clean"))?;
            let dc = victim(space).distances(&cl)?;
            let dw = victim(space).distances(&wm)?;
            let tag = if space == Space::Latent { "" } else { "pixel-space-" };
            record(&format!("{tag}clean"), s, &dc);
            record(&format!("{tag}no-attack"), s, &dw);
            let r = scores(&dw, &dc)?;
            let mut values = metric_values(&r, &dw);
            values.extend(std::iter::repeat_n(0.0, nq + 1));
            rows.push(MetricRow { cell: format!("{tag}no-attack"), param: 0.0, seed: s, values });
            if s == run.first_seed() {
                write_curves(&mut rec, &format!("{tag}no-attack"), &r)?;
            }
            clean.insert((space as u8, s), (wm, cl, dc));
        }
    }

    let mut attacked_first: BTreeMap<String, SpatialTensor> = BTreeMap::new();
    for job in &jobs {
        let space = job.space();
        let (wm, cl, dc) = &clean[&(space as u8, job.seed)];
        let att = run.load_attacked(job)?;
        let d = victim(space).distances(&att)?;
        record(&format!("{}@{}", job.cell, job.param), job.seed, &d);
        let r = scores(&d, dc)?;
        let mut values = metric_values(&r, &d);
        let deltas = suite.quality_deltas(&metrics, wm, &att, cl)?;
        values.extend(metrics.iter().map(|m| deltas[m.name()]));
        values.push(f64::from(att.mean_abs_diff(wm)?));
        rows.push(MetricRow { cell: job.cell.to_string(), param: job.param, seed: job.seed, values });
        if job.seed == run.first_seed() {
            write_curves(&mut rec, &format!("{}_p{}", cell_slug(&job.cell), param_label(job.param)), &r)?;
            attacked_first.insert(format!("{}@{}", job.cell, job.param), att);
        }
        log::info!("evaluate {} p={} s={}: auc {:.4}", job.cell, job.param, job.seed, r.roc_auc());
    }

    let mut header: Vec<String> = ["cell", "param", "seed"].iter().map(|s| s.to_string()).collect();
    header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(metrics.iter().map(|m| format!("quality_delta_{}", m.name())));
    header.push("mean_abs_pixel_change".into());
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| [r.cell.clone(), fmt(r.param), r.seed.to_string()].into_iter().chain(r.values.iter().map(|v| fmt(*v))).collect())
        .collect();
    store::write_csv(&rec.path("eval/metrics.csv"), &h, &table)?;
    rec.add("eval/metrics.csv")?;
    store::write_csv(&rec.path("eval/distances.csv"), &["set", "seed", "index", "distance"], &dist_rows)?;
    rec.add("eval/distances.csv")?;

    // Mean and sample std over seeds.
    let mut groups: BTreeMap<(String, String), Vec<&MetricRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.cell.clone(), fmt(r.param))).or_default().push(r);
    }
    let mut sh: Vec<String> = vec!["cell".into(), "param".into(), "n_seeds".into()];
    for name in &header[3..] {
        sh.push(format!("{name}_mean"));
        sh.push(format!("{name}_std"));
    }
    let mut summary = Vec::new();
    for ((cell, param), members) in &groups {
        let mut row = vec![cell.clone(), param.clone(), members.len().to_string()];
        for k in 0..members[0].values.len() {
            let s = mean_std(&members.iter().map(|m| m.values[k]).collect::<Vec<_>>());
            row.push(fmt(s.mean));
            row.push(fmt(s.std));
        }
        summary.push(row);
    }
    let sh: Vec<&str> = sh.iter().map(String::as_str).collect();
    store::write_csv(&rec.path("eval/summary.csv"), &sh, &summary)?;
    rec.add("eval/summary.csv")?;

    matched_regeneration(run, &mut rec, &rows, &metrics)?;
    diagnostics(run, &mut rec, &latent, &attacked_first, &clean[&(Space::Latent as u8, run.first_seed())].0)?;
    rec.finish()
}

/// For each gradient attack at the default level: the weakest regeneration
/// whose mean ROC-AUC is at most the attack's, and both pixel-MSE deltas.
/// Without such a level the strongest regeneration is used and `matched` is false.
fn matched_regeneration(run: &Run, rec: &mut Recorder, rows: &[MetricRow], metrics: &[QualityMetric]) -> Result<()> {
    let Some(q) = metrics.iter().position(|m| *m == QualityMetric::PixelMse) else {
        return Ok(());
    };
    let qi = METRIC_COLUMNS.len() + q;
    let avg = |cell: &str, param: f64, k: usize| -> Option<f64> {
        let v: Vec<f64> = rows.iter().filter(|r| r.cell == cell && r.param == param).map(|r| r.values[k]).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    let mut regen: Vec<(f64, f64, f64)> = run
        .cfg
        .attack
        .regeneration_noise
        .iter()
        .filter_map(|&s| Some((s, avg("regeneration", s, 0)?, avg("regeneration", s, qi)?)))
        .collect();
    regen.sort_by(|a, b| a.0.total_cmp(&b.0));
    if regen.is_empty() {
        return Ok(());
    }
    let mut out = Vec::new();
    let delta = run.cfg.attack.default_delta;
    for cell in run.cfg.all_cells() {
        if !matches!(cell.method, AttackMethod::LatentPgd | AttackMethod::PixelPgd) || cell.codec == ringlab_core::codec::CodecVariant::Identity {
            continue;
        }
        let name = cell.to_string();
        let (Some(auc), Some(mse)) = (avg(&name, delta, 0), avg(&name, delta, qi)) else {
            continue;
        };
        let (matched, r) = match regen.iter().find(|r| r.1 <= auc) {
            Some(r) => (true, *r),
            None => (false, *regen.last().expect("non-empty")),
        };
        out.push(vec![name, fmt(delta), fmt(auc), fmt(mse), fmt(r.0), fmt(r.1), fmt(r.2), matched.to_string()]);
    }
    store::write_csv(
        &rec.path("eval/matched_regeneration.csv"),
        &["cell", "param", "roc_auc", "quality_delta_pixel-mse", "regeneration_noise", "regeneration_roc_auc", "regeneration_quality_delta_pixel-mse", "matched"],
        &out,
    )?;
    rec.add("eval/matched_regeneration.csv")
}

fn diagnostics(run: &Run, rec: &mut Recorder, victim: &Victim, attacked: &BTreeMap<String, SpatialTensor>, wm_first: &SpatialTensor) -> Result<()> {
    let cfg = &run.cfg;
    let e = &cfg.evaluation;
    let key = &victim.key;
    let model = &victim.model;
    let n = e.projection_samples;
    let classes = run.num_classes()?;
    let wm_seeds = run.seeds(STREAM_DIAGNOSTIC, 0, n);
    let clean_seeds = run.seeds(STREAM_DIAGNOSTIC, n as u64, n);
    let xt_clean = initial_latents(model, &clean_seeds)?;
    let xt_wm = embed_key(&initial_latents(model, &wm_seeds)?, key)?;
    let mut rows: Vec<Vec<String>> = Vec::new();

    // Carrier spectra along the sampling trajectory (a subset keeps this cheap).
    let m = n.min(32);
    let conds = run.conditions(m, classes);
    let steps = spectrum_progression(model, &xt_wm.slice(0, m)?, &xt_clean.slice(0, m)?, &conds, model.schedule(), &e.spectrum_steps, key.channel())?;
    for s in &steps {
        rows.push(vec![format!("excess_ratio_watermarked_t{}", s.t), fmt(excess_ratio(&s.watermarked.coherent, key))]);
        rows.push(vec![format!("excess_ratio_clean_t{}", s.t), fmt(excess_ratio(&s.clean.coherent, key))]);
        rows.push(vec![format!("masked_gap_t{}", s.t), fmt(masked_gap(s, key))]);
    }

    // Initial latents projected to 2D.
    let features = [masked_features(&xt_wm, key)?, masked_features(&xt_clean, key)?].concat();
    let labels: Vec<u32> = (0..2 * n).map(|i| u32::from(i < n)).collect();
    let mut projections = BTreeMap::new();
    for (name, method) in [("pca", ProjectionMethod::Pca), ("tsne", ProjectionMethod::Tsne)] {
        let pts = latent_projection_2d(&features, &labels, method, cfg.seed)?;
        rows.push(vec![format!("separability_{name}"), fmt(linear_separability(&pts, &labels)?)]);
        let csv: Vec<Vec<String>> = pts.iter().zip(&labels).map(|(p, l)| vec![fmt(p[0]), fmt(p[1]), l.to_string()]).collect();
        let rel = format!("eval/projection_{name}.csv");
        store::write_csv(&rec.path(&rel), &["x", "y", "watermarked"], &csv)?;
        rec.add(&rel)?;
        projections.insert(name.to_string(), pts);
    }

    // Where the attacks change the image and the carrier spectrum.
    let mut diff_maps = BTreeMap::new();
    for (name, att) in attacked {
        if att.item_shape() != wm_first.item_shape() {
            continue;
        }
        let maps = attack_diff_maps(wm_first, att, &victim.codec, key.channel())?;
        rows.push(vec![format!("diff_concentration[{name}]"), fmt(maps.concentration(key))]);
        diff_maps.insert(name.clone(), maps);
    }
    store::write_csv(&rec.path("eval/diagnostics.csv"), &["diagnostic", "value"], &rows)?;
    rec.add("eval/diagnostics.csv")?;
    let (_, h, w) = key.shape();
    let diag = Diagnostics { spectrum: steps, spectrum_shape: (h, w), projections, projection_labels: labels, diff_maps };
    store::write_json(&rec.path("eval/diagnostics.json"), &diag)?;
    rec.add("eval/diagnostics.json")?;
    Ok(())
}

pub fn load_diagnostics(run: &Run) -> Result<Diagnostics> {
    store::read_json(&run.require("eval/diagnostics.json", Stage::Evaluate)?)
}
