use std::collections::{BTreeMap, HashMap};

use ringlab_core::tensor::SpatialTensor;

use crate::config::AttackMethod;
use crate::error::{HarnessError, Result};
use crate::manifest::{Recorder, RunManifest};
use crate::plot::{line_chart, scatter_chart, Series};
use crate::run::{cell_slug, param_label, Run, Space, Stage};
use crate::stages::evaluate::load_diagnostics;
use crate::store::{self, fmt};

/// Operating point used for the precision-vs-base-rate figure.
const BASE_RATE_MIN_TPR: &str = "0.95";

fn num(row: &HashMap<String, String>, k: &str) -> Result<f64> {
    let v = row.get(k).ok_or_else(|| HarnessError::Runtime(format!("missing column {k}")))?;
    match v.as_str() {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "undefined" | "" => Ok(f64::NAN),
        s => s.parse().map_err(|_| HarnessError::Runtime(format!("bad number {s} in column {k}"))),
    }
}

fn read_points(path: &std::path::Path, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
    store::read_csv(path)?.iter().map(|r| Ok((num(r, x)?, num(r, y)?))).collect()
}

fn add_csv(rec: &mut Recorder, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    store::write_csv(&rec.path(rel), header, rows)?;
    rec.add(rel)
}

/// Tables and figures: surrogate accuracy, attack comparison, budget sweep,
/// precision at base rates, curves, difference panels and diagnostics.
pub fn report(run: &Run) -> Result<RunManifest> {
    let cfg = &run.cfg;
    let surrogates = store::read_csv(&run.require("models/surrogate_report.csv", Stage::TrainSurrogate)?)?;
    let summary_path = run.require("eval/summary.csv", Stage::Evaluate)?;
    let summary = store::read_csv(&summary_path)?;
    let metrics = store::read_csv(&run.require("eval/metrics.csv", Stage::Evaluate)?)?;
    let diag = load_diagnostics(run)?;
    let mut rec = run.begin(Stage::Report)?;

    // Surrogate accuracy.
    let mut t1 = Vec::new();
    for r in &surrogates {
        let (tr, va) = (num(r, "train_accuracy")?, num(r, "val_accuracy")?);
        t1.push(vec![
            r["surrogate"].clone(),
            r["dataset"].clone(),
            fmt(tr),
            fmt(va),
            fmt(tr - va),
            r["best_epoch"].clone(),
            format!("{}:{}", r["train_size"], r["val_size"]),
        ]);
    }
    add_csv(&mut rec, "report/table1_surrogates.csv", &["surrogate", "dataset", "train_accuracy", "val_accuracy", "train_val_gap", "best_epoch", "split"], &t1)?;

    // Attack comparison at the default level (every regeneration level is kept).
    let delta = fmt(cfg.attack.default_delta);
    let is_table_row = |r: &HashMap<String, String>| {
        let cell = r["cell"].as_str();
        cell.ends_with("no-attack") || cell == "regeneration" || cell == "adversarial-noising" || r["param"] == delta
    };
    let text = std::fs::read_to_string(&summary_path).map_err(|e| HarnessError::io(&summary_path, e))?;
    let header: Vec<&str> = text.lines().next().unwrap_or_default().split(',').collect();
    let t2: Vec<Vec<String>> = summary.iter().filter(|r| is_table_row(r)).map(|r| header.iter().map(|h| r[*h].clone()).collect()).collect();
    add_csv(&mut rec, "report/table2_attacks.csv", &header, &t2)?;

    // Budget sweep (first seed).
    let first = run.first_seed().to_string();
    let mut sweep_rows = Vec::new();
    let mut sweep_series = Vec::new();
    for cell in &cfg.attack.sweep_cells {
        let name = cell.to_string();
        let mut pts = Vec::new();
        for &d in &cfg.attack.sweep_deltas {
            if let Some(r) = metrics.iter().find(|r| r["cell"] == name && r["param"] == fmt(d) && r["seed"] == first) {
                let (auc, tpr) = (num(r, "roc_auc")?, num(r, "tpr_at_1pct_fpr")?);
                sweep_rows.push(vec![name.clone(), fmt(d), fmt(auc), fmt(num(r, "pr_auc")?), fmt(tpr)]);
                pts.push((d, auc));
            }
        }
        sweep_series.push(Series { label: name, points: pts });
    }
    add_csv(&mut rec, "report/fig7_budget_sweep.csv", &["cell", "delta", "roc_auc", "pr_auc", "tpr_at_1pct_fpr"], &sweep_rows)?;
    line_chart(&rec.path("report/fig7_budget_sweep.svg"), "Detector ROC-AUC vs attack budget", "budget level (0-255 scale)", "ROC-AUC", &sweep_series, None, Some((0.0, 1.0)), true)?;
    rec.add("report/fig7_budget_sweep.svg")?;

    // Curves and precision at base rates for the first seed at the default level.
    let mut curves: Vec<(String, String)> = vec![("no attack".into(), "no-attack".into())];
    for j in run.attack_jobs() {
        let default_level = j.param == cfg.attack.default_delta || matches!(j.cell.method, AttackMethod::AdversarialNoising);
        let regen = j.cell.method == AttackMethod::Regeneration;
        if j.seed == run.first_seed() && (default_level || regen) && j.space() == Space::Latent {
            let label = if regen { format!("regeneration (std {})", j.param) } else { j.cell.to_string() };
            curves.push((label, format!("{}_p{}", cell_slug(&j.cell), param_label(j.param))));
        }
    }
    let mut roc = Vec::new();
    let mut pr = Vec::new();
    let mut base = Vec::new();
    let mut base_rows = Vec::new();
    for (label, stem) in &curves {
        let p = |s: &str| run.require(&format!("eval/curves/{stem}_{s}.csv"), Stage::Evaluate);
        roc.push(Series { label: label.clone(), points: read_points(&p("roc")?, "fpr", "tpr")? });
        pr.push(Series { label: label.clone(), points: read_points(&p("pr")?, "recall", "precision")? });
        let mut pts = Vec::new();
        for r in store::read_csv(&p("base_rate")?)? {
            if r["min_tpr"] == BASE_RATE_MIN_TPR {
                let (pi, prec) = (num(&r, "base_rate")?, num(&r, "precision")?);
                base_rows.push(vec![label.clone(), r["min_tpr"].clone(), fmt(num(&r, "tpr")?), fmt(num(&r, "fpr")?), fmt(pi), r["precision"].clone()]);
                if prec.is_finite() {
                    pts.push((pi, prec));
                }
            }
        }
        base.push(Series { label: label.clone(), points: pts });
    }
    add_csv(&mut rec, "report/fig8_base_rate.csv", &["attack", "min_tpr", "tpr", "fpr", "base_rate", "precision"], &base_rows)?;
    line_chart(&rec.path("report/fig8_base_rate.svg"), "Precision vs base rate (TPR >= 0.95)", "base rate", "precision", &base, None, Some((0.0, 1.0)), true)?;
    rec.add("report/fig8_base_rate.svg")?;
    line_chart(&rec.path("report/fig10_pr.svg"), "Precision-recall", "recall", "precision", &pr, Some((0.0, 1.0)), Some((0.0, 1.0)), false)?;
    rec.add("report/fig10_pr.svg")?;
    line_chart(&rec.path("report/roc.svg"), "ROC", "false positive rate", "true positive rate", &roc, Some((0.0, 1.0)), Some((0.0, 1.0)), false)?;
    rec.add("report/roc.svg")?;

    // Difference panels: watermarked row, attacked row, then the maps.
    let wm = run.load_generated(Space::Latent, &format!("eval_s{}_wm", run.first_seed()))?;
    let k = cfg.evaluation.diff_panels.min(wm.len()).max(1);
    let jobs: BTreeMap<String, _> = run
        .attack_jobs()
        .into_iter()
        .filter(|j| j.seed == run.first_seed())
        .map(|j| (format!("{}@{}", j.cell, j.param), j))
        .collect();
    for (name, maps) in &diag.diff_maps {
        let Some(job) = jobs.get(name) else { continue };
        let stem = format!("report/appendix_a/{}_p{}", cell_slug(&job.cell), param_label(job.param));
        let att = run.load_attacked(job)?;
        let rel = format!("{stem}_images.png");
        store::save_grid(&rec.path(&rel), &SpatialTensor::cat(&[wm.slice(0, k)?, att.slice(0, k)?])?, k)?;
        rec.add(&rel)?;
        let (ph, pw) = maps.pixel_shape;
        let rel = format!("{stem}_pixel_diff.png");
        store::save_heatmap(&rec.path(&rel), &maps.pixel, ph, pw, 4)?;
        rec.add(&rel)?;
        let (fh, fw) = maps.fourier_shape;
        let rel = format!("{stem}_fourier_diff.png");
        store::save_heatmap(&rec.path(&rel), &maps.fourier, fh, fw, 8)?;
        rec.add(&rel)?;
    }

    // Carrier spectra along sampling, and the 2D projections.
    let (h, w) = diag.spectrum_shape;
    for s in &diag.spectrum {
        for (tag, map) in [("watermarked", &s.watermarked), ("clean", &s.clean)] {
            let rel = format!("report/spectrum/t{:03}_{tag}.png", s.t);
            store::save_heatmap(&rec.path(&rel), &map.mean_log, h, w, 8)?;
            rec.add(&rel)?;
        }
    }
    for (name, pts) in &diag.projections {
        let split = |want: u32| pts.iter().zip(&diag.projection_labels).filter(|(_, &l)| l == want).map(|(p, _)| (p[0], p[1])).collect();
        let series = [Series { label: "watermarked".into(), points: split(1) }, Series { label: "clean".into(), points: split(0) }];
        let rel = format!("report/projection_{name}.svg");
        scatter_chart(&rec.path(&rel), &format!("Initial latents ({name})"), &series)?;
        rec.add(&rel)?;
    }
    rec.finish()
}
