//! Diagnostics of how much key structure survives: spectra along the
//! sampling trajectory, low-dimensional projections and attack diff maps.

use nalgebra::{DMatrix, Matrix2, Vector2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::diffusion::{ddim_sample_trace, Condition, NoisePredictor, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::spectrum::centered_fft2;
use crate::tensor::SpatialTensor;
use crate::watermark::{extract_key, rounded_radius, FrequencyKey};

/// Carrier-channel spectra of a batch: `coherent` is the magnitude of the
/// batch-mean spectrum (structure shared by all items survives the average,
/// independent noise shrinks); `mean_log` is the mean per-item log magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMap {
    pub coherent: Vec<f64>,
    pub mean_log: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStep {
    pub t: usize,
    pub watermarked: SpectrumMap,
    pub clean: SpectrumMap,
}

pub fn spectrum_map(x: &SpatialTensor, channel: usize) -> Result<SpectrumMap> {
    let (n, c, h, w) = x.dims();
    if channel >= c || n == 0 {
        return Err(invalid("spectrum map needs a valid channel and a non-empty batch"));
    }
    let values = x.to_vec()?;
    let plane = h * w;
    let mut sum = vec![Complex64::new(0.0, 0.0); plane];
    let mut logs = vec![0.0; plane];
    for i in 0..n {
        let off = (i * c + channel) * plane;
        for (p, v) in centered_fft2(&values[off..off + plane], h, w).into_iter().enumerate() {
            sum[p] += v;
            logs[p] += (1.0 + v.norm()).ln();
        }
    }
    Ok(SpectrumMap {
        coherent: sum.iter().map(|v| v.norm() / n as f64).collect(),
        mean_log: logs.iter().map(|v| v / n as f64).collect(),
    })
}

/// Captures carrier spectra of watermarked and clean trajectories at the
/// requested steps. Both batches are denoised with the same conditions.
pub fn spectrum_progression(
    model: &dyn NoisePredictor,
    xt_wm: &SpatialTensor,
    xt_clean: &SpatialTensor,
    conds: &[Condition],
    sched: &NoiseSchedule,
    ts: &[usize],
    channel: usize,
) -> Result<Vec<SpectrumStep>> {
    if let Some(&t) = ts.iter().find(|&&t| t > sched.steps()) {
        return Err(invalid(format!("capture step {t} outside 0..={}", sched.steps())));
    }
    let (_, wm) = ddim_sample_trace(xt_wm, model, conds, sched, ts)?;
    let (_, clean) = ddim_sample_trace(xt_clean, model, conds, sched, ts)?;
    wm.iter()
        .zip(&clean)
        .map(|((t, a), (_, b))| Ok(SpectrumStep { t: *t, watermarked: spectrum_map(a, channel)?, clean: spectrum_map(b, channel)? }))
        .collect()
}

/// Off-mask positions in the radial band spanned by the key (one pixel
/// wider on each side), excluding the zero frequency.
pub fn reference_positions(key: &FrequencyKey) -> Vec<usize> {
    let (_, h, w) = key.shape();
    let lo = key.radii().first().copied().unwrap_or(0).saturating_sub(1).max(1);
    let hi = key.radii().last().copied().unwrap_or(0) + 1;
    (0..h * w)
        .filter(|&p| {
            let r = rounded_radius(p / w, p % w, h, w);
            key.ring_of(p).is_none() && r >= lo && r <= hi
        })
        .collect()
}

/// Mean value on the key mask over the mean on [`reference_positions`].
pub fn excess_ratio(map: &[f64], key: &FrequencyKey) -> f64 {
    let mean = |ps: &[usize]| ps.iter().map(|&p| map[p]).sum::<f64>() / ps.len().max(1) as f64;
    mean(key.positions()) / mean(&reference_positions(key))
}

/// Mean absolute watermarked-minus-clean difference of coherent magnitudes on the mask.
pub fn masked_gap(step: &SpectrumStep, key: &FrequencyKey) -> f64 {
    let ps = key.positions();
    ps.iter().map(|&p| (step.watermarked.coherent[p] - step.clean.coherent[p]).abs()).sum::<f64>() / ps.len().max(1) as f64
}

/// Real and imaginary parts of the masked carrier spectrum, per item.
pub fn masked_features(latents: &SpatialTensor, key: &FrequencyKey) -> Result<Vec<Vec<f64>>> {
    Ok(extract_key(latents, key)?
        .into_iter()
        .map(|vals| vals.iter().map(|v| v.re).chain(vals.iter().map(|v| v.im)).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

const MIN_PER_CLASS: usize = 10;

pub fn latent_projection_2d(features: &[Vec<f64>], labels: &[u32], method: ProjectionMethod, seed: u64) -> Result<Vec<[f64; 2]>> {
    if features.len() != labels.len() {
        return Err(invalid("feature and label counts differ"));
    }
    for class in [0, 1] {
        if labels.iter().filter(|&&l| l == class).count() < MIN_PER_CLASS {
            return Err(invalid(format!("projection needs at least {MIN_PER_CLASS} samples per class")));
        }
    }
    let d = features[0].len();
    if d < 2 || features.iter().any(|f| f.len() != d) {
        return Err(invalid("features must share a dimension of at least 2"));
    }
    match method {
        ProjectionMethod::Pca => Ok(pca_2d(features)),
        ProjectionMethod::Tsne => Ok(tsne_2d(features, seed)),
    }
}

fn pca_2d(features: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let (n, d) = (features.len(), features[0].len());
    let mut x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    for j in 0..d {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let comps: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let mut v: Vec<f64> = vt.row(k).iter().copied().collect();
            // sign convention: largest-magnitude loading is positive
            let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if big < 0.0 {
                v.iter_mut().for_each(|e| *e = -*e);
            }
            v
        })
        .collect();
    (0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (k, comp) in comps.iter().enumerate() {
                p[k] = x.row(i).iter().zip(comp).map(|(a, b)| a * b).sum();
            }
            p
        })
        .collect()
}

/// Exact t-SNE with the usual early exaggeration and momentum schedule.
fn tsne_2d(features: &[Vec<f64>], seed: u64) -> Vec<[f64; 2]> {
    let n = features.len();
    let perplexity = 30f64.min((n as f64 - 1.0) / 3.0).max(2.0);
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = d2(&features[i], &features[j]);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    // conditional affinities with a per-point bandwidth matching the perplexity
    let mut p = vec![0.0; n * n];
    let target = perplexity.ln();
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let row_min = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).fold(f64::INFINITY, f64::min);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut hsum = 0.0;
            for j in 0..n {
                if j != i {
                    let e = (-(dist[i * n + j] - row_min) * beta).exp();
                    p[i * n + j] = e;
                    sum += e;
                    hsum += (dist[i * n + j] - row_min) * e;
                }
            }
            let entropy = sum.ln() + beta * hsum / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            if (entropy - target).abs() < 1e-5 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_infinite() { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let mut pj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [a * 1e-4, b * 1e-4]
        })
        .collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    for iter in 0..500 {
        let exaggeration = if iter < 100 { 12.0 } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dy = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                let q = 1.0 / (1.0 + dy[0] * dy[0] + dy[1] * dy[1]);
                num[i * n + j] = q;
                num[j * n + i] = q;
                zsum += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i != j {
                    let q = num[i * n + j];
                    let coef = 4.0 * (exaggeration * pj[i * n + j] - q / zsum) * q;
                    g[0] += coef * (y[i][0] - y[j][0]);
                    g[1] += coef * (y[i][1] - y[j][1]);
                }
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (vel[i][k] > 0.0) { gains[i][k] + 0.2 } else { (gains[i][k] * 0.8f64).max(0.01) };
                vel[i][k] = momentum * vel[i][k] - 200.0 * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
    }
    y
}

/// Training accuracy of a Fisher discriminant with the best threshold.
pub fn linear_separability(points: &[[f64; 2]], labels: &[u32]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(invalid("points and labels must be non-empty and aligned"));
    }
    let class = |c: u32| points.iter().zip(labels).filter(move |(_, &l)| l == c).map(|(p, _)| Vector2::new(p[0], p[1]));
    let (n0, n1) = (class(0).count(), class(1).count());
    if n0 == 0 || n1 == 0 {
        return Err(invalid("separability needs both classes"));
    }
    let m0 = class(0).sum::<Vector2<f64>>() / n0 as f64;
    let m1 = class(1).sum::<Vector2<f64>>() / n1 as f64;
    let mut sw = Matrix2::zeros();
    for v in class(0) {
        sw += (v - m0) * (v - m0).transpose();
    }
    for v in class(1) {
        sw += (v - m1) * (v - m1).transpose();
    }
    let ridge = 1e-9 * (sw.trace() + 1.0);
    sw += Matrix2::identity() * ridge;
    let dir = sw.try_inverse().map(|inv| inv * (m1 - m0)).unwrap_or(m1 - m0);
    let mut proj: Vec<(f64, u32)> = points.iter().zip(labels).map(|(p, &l)| (dir[0] * p[0] + dir[1] * p[1], l)).collect();
    proj.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = proj.len();
    // predict 1 above the cut; try every cut between distinct values
    let total1 = n1;
    let mut best = n0.max(n1);
    let mut ones_below = 0;
    let mut zeros_below = 0;
    for i in 0..n {
        if proj[i].1 == 1 {
            ones_below += 1;
        } else {
            zeros_below += 1;
        }
        if i + 1 < n && proj[i + 1].0 == proj[i].0 {
            continue;
        }
        let correct = zeros_below + (total1 - ones_below);
        best = best.max(correct).max(n - correct);
    }
    Ok(best as f64 / n as f64)
}

/// Per-position mean absolute differences, in pixels and in the carrier
/// spectrum of the encoded images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffMaps {
    pub pixel: Vec<f64>,
    pub pixel_shape: (usize, usize),
    pub fourier: Vec<f64>,
    pub fourier_shape: (usize, usize),
}

impl DiffMaps {
    /// Mean Fourier difference on the key mask over the mean on the
    /// reference band around it.
    pub fn concentration(&self, key: &FrequencyKey) -> f64 {
        excess_ratio(&self.fourier, key)
    }
}

pub fn attack_diff_maps(x0: &SpatialTensor, x0_star: &SpatialTensor, codec: &Codec, channel: usize) -> Result<DiffMaps> {
    x0.require_same_shape(x0_star)?;
    let (n, c, h, w) = x0.dims();
    let diff = (x0_star.data() - x0.data())?.abs()?.mean(1)?.mean(0)?;
    let pixel = diff.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from).collect();
    let (za, zb) = (codec.encode(x0)?, codec.encode(x0_star)?);
    let (_, lc, lh, lw) = za.dims();
    if channel >= lc {
        return Err(invalid(format!("carrier channel {channel} outside 0..{lc}")));
    }
    let (va, vb) = (za.to_vec()?, zb.to_vec()?);
    let plane = lh * lw;
    let mut fourier = vec![0.0; plane];
    for i in 0..n {
        let off = (i * lc + channel) * plane;
        let fa = centered_fft2(&va[off..off + plane], lh, lw);
        let fb = centered_fft2(&vb[off..off + plane], lh, lw);
        for p in 0..plane {
            fourier[p] += (fb[p] - fa[p]).norm() / n as f64;
        }
    }
    let _ = c;
    Ok(DiffMaps { pixel, pixel_shape: (h, w), fourier, fourier_shape: (lh, lw) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Domain;
    use crate::watermark::{embed_key, generate_key};

    fn seeds(base: u64, n: usize) -> Vec<u64> {
        (0..n as u64).map(|i| base + i).collect()
    }

    #[test]
    fn coherent_map_shows_shared_key() {
        let key = generate_key((4, 16, 16), &[2, 4, 6], 3, 1).unwrap();
        let clean = SpatialTensor::gaussian((4, 16, 16), &seeds(0, 100), Domain::Latent).unwrap();
        let wm = embed_key(&SpatialTensor::gaussian((4, 16, 16), &seeds(500, 100), Domain::Latent).unwrap(), &key).unwrap();
        assert!(excess_ratio(&spectrum_map(&wm, 3).unwrap().coherent, &key) > 2.0);
        assert!(excess_ratio(&spectrum_map(&clean, 3).unwrap().coherent, &key) < 1.3);
    }

    #[test]
    fn reference_band_avoids_mask_and_dc() {
        let key = generate_key((4, 16, 16), &[1, 2, 3], 3, 1).unwrap();
        let r = reference_positions(&key);
        assert!(!r.is_empty());
        assert!(r.iter().all(|&p| key.ring_of(p).is_none() && p != 8 * 16 + 8));
    }

    #[test]
    fn pca_is_deterministic_and_separates_key() {
        let key = generate_key((4, 16, 16), &[1, 2, 3], 3, 2).unwrap();
        let clean = SpatialTensor::gaussian((4, 16, 16), &seeds(0, 30), Domain::Latent).unwrap();
        let wm = embed_key(&SpatialTensor::gaussian((4, 16, 16), &seeds(100, 30), Domain::Latent).unwrap(), &key).unwrap();
        let mut f = masked_features(&wm, &key).unwrap();
        f.extend(masked_features(&clean, &key).unwrap());
        let labels: Vec<u32> = (0..60).map(|i| u32::from(i < 30)).collect();
        let a = latent_projection_2d(&f, &labels, ProjectionMethod::Pca, 0).unwrap();
        assert_eq!(a, latent_projection_2d(&f, &labels, ProjectionMethod::Pca, 0).unwrap());
        assert!(linear_separability(&a, &labels).unwrap() >= 0.99);
    }

    #[test]
    fn random_classes_are_not_separable() {
        let all = SpatialTensor::gaussian((4, 16, 16), &seeds(0, 200), Domain::Latent).unwrap();
        let key = generate_key((4, 16, 16), &[1, 2, 3], 3, 2).unwrap();
        let f = masked_features(&all, &key).unwrap();
        let labels: Vec<u32> = (0..200).map(|i| i % 2).collect();
        let p = latent_projection_2d(&f, &labels, ProjectionMethod::Pca, 0).unwrap();
        let acc = linear_separability(&p, &labels).unwrap();
        assert!(acc < 0.62, "{acc}");
    }

    #[test]
    fn too_few_samples_rejected() {
        let f = vec![vec![0.0, 1.0]; 12];
        let labels: Vec<u32> = (0..12).map(|i| u32::from(i < 3)).collect();
        assert!(latent_projection_2d(&f, &labels, ProjectionMethod::Pca, 0).is_err());
    }

    #[test]
    fn tsne_separates_distant_clusters() {
        let mut f = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..40 {
            let off = if i < 20 { 0.0 } else { 20.0 };
            f.push((0..5).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); off + z }).collect::<Vec<f64>>());
            labels.push(u32::from(i >= 20));
        }
        let y = latent_projection_2d(&f, &labels, ProjectionMethod::Tsne, 1).unwrap();
        assert!(linear_separability(&y, &labels).unwrap() >= 0.95);
    }

    #[test]
    fn identical_images_have_zero_diff() {
        let x = SpatialTensor::gaussian((4, 8, 8), &[1, 2], Domain::Pixel).unwrap().clip_pixels().unwrap();
        let m = attack_diff_maps(&x, &x, &Codec::identity((4, 8, 8)), 3).unwrap();
        assert!(m.pixel.iter().chain(&m.fourier).all(|&v| v == 0.0));
    }
}
