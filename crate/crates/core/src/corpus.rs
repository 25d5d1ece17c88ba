//! Labeled image collections and the procedural toy corpus.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::permutation;
use crate::tensor::{derive_seed, Domain, SpatialTensor};

/// Images in `[-1, 1]` with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub images: SpatialTensor,
    pub labels: Vec<u32>,
}

impl LabeledImages {
    pub fn new(images: SpatialTensor, labels: Vec<u32>) -> Result<Self> {
        if images.domain() != Domain::Pixel {
            return Err(invalid("labeled images must be in the pixel domain"));
        }
        if images.len() != labels.len() {
            return Err(invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(self.images.select(indices)?, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// 2x2 average pooling, e.g. 3x32x32 -> 3x16x16.
    pub fn downsample2(&self) -> Result<Self> {
        let pooled = self.images.data().avg_pool2d(2)?;
        Self::new(SpatialTensor::new(pooled, Domain::Pixel)?, self.labels.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Disc,
    Square,
    HorizontalStripes,
    VerticalStripes,
    Ring,
    Gradient,
    Checker,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Disc,
        Shape::Square,
        Shape::HorizontalStripes,
        Shape::VerticalStripes,
        Shape::Ring,
        Shape::Gradient,
        Shape::Checker,
        Shape::Cross,
    ];
}

/// Soft step from 0 to 1 around `edge` with half-width ~1 pixel.
fn soft(edge: f32, v: f32) -> f32 {
    1.0 / (1.0 + (-(edge - v) * 2.5).exp())
}

fn render(shape: Shape, size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let color = |rng: &mut ChaCha8Rng| [rng.random_range(-0.9f32..0.9), rng.random_range(-0.9f32..0.9), rng.random_range(-0.9f32..0.9)];
    let bg = color(rng);
    let mut fg = color(rng);
    // keep foreground visibly distinct
    if fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() < 0.8 {
        for (f, b) in fg.iter_mut().zip(&bg) {
            *f = if *b > 0.0 { *b - 0.8 } else { *b + 0.8 };
        }
    }
    let cx = rng.random_range(0.3 * s..0.7 * s);
    let cy = rng.random_range(0.3 * s..0.7 * s);
    let r = rng.random_range(0.15 * s..0.32 * s);
    let period = rng.random_range(0.15 * s..0.35 * s);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let mut out = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = (fx - cx, fy - cy);
            let t = match shape {
                Shape::Disc => soft(r, (dx * dx + dy * dy).sqrt()),
                Shape::Square => soft(r, dx.abs().max(dy.abs())),
                Shape::HorizontalStripes => 0.5 + 0.5 * (std::f32::consts::TAU * fy / period + phase).sin(),
                Shape::VerticalStripes => 0.5 + 0.5 * (std::f32::consts::TAU * fx / period + phase).sin(),
                Shape::Ring => {
                    let d = (dx * dx + dy * dy).sqrt();
                    soft(r, d) * (1.0 - soft(0.55 * r, d))
                }
                Shape::Gradient => ((fx * angle.cos() + fy * angle.sin()) / (1.5 * s) + 0.5).clamp(0.0, 1.0),
                Shape::Checker => {
                    let a = (std::f32::consts::TAU * fx / (2.0 * period) + phase).sin();
                    let b = (std::f32::consts::TAU * fy / (2.0 * period)).sin();
                    soft(0.0, -a * b * 4.0)
                }
                Shape::Cross => {
                    let arm = 0.35 * r;
                    soft(r, dx.abs().max(dy.abs())) * (soft(arm, dx.abs()).max(soft(arm, dy.abs())))
                }
            };
            for c in 0..3 {
                out[c * size * size + y * size + x] = bg[c] + t * (fg[c] - bg[c]);
            }
        }
    }
    out
}

/// Deterministic procedural corpus: `n` images cycling through the eight
/// shape classes, each with random colours, placement and light noise.
pub fn synthetic_corpus(n: usize, size: usize, seed: u64) -> Result<LabeledImages> {
    if n == 0 || size < 4 {
        return Err(invalid("synthetic corpus needs n >= 1 and size >= 4"));
    }
    let noise = Normal::new(0.0f32, 0.02).map_err(|e| invalid(e.to_string()))?;
    let mut values = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % Shape::ALL.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let img = render(Shape::ALL[class], size, &mut rng);
        values.extend(img.into_iter().map(|v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0)));
        labels.push(class as u32);
    }
    let images = SpatialTensor::new(Tensor::from_vec(values, (n, 3, size, size), &crate::tensor::DEVICE)?, Domain::Pixel)?;
    LabeledImages::new(images, labels)
}

/// Shuffles `0..n` with `seed` and cuts it into consecutive disjoint parts of
/// the requested sizes. The sizes must sum to at most `n`.
pub fn split_indices(n: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: usize = sizes.iter().sum();
    if total > n {
        return Err(invalid(format!("split sizes sum to {total} but only {n} items")));
    }
    let perm = permutation(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let mut part = perm[start..start + s].to_vec();
        part.sort_unstable();
        out.push(part);
        start += s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_in_range() {
        let a = synthetic_corpus(16, 32, 5).unwrap();
        let b = synthetic_corpus(16, 32, 5).unwrap();
        assert_eq!(a.images.to_vec().unwrap(), b.images.to_vec().unwrap());
        assert!(a.images.max_abs().unwrap() <= 1.0);
        assert_eq!(a.num_classes(), 8);
        assert_eq!(a.images.dims(), (16, 3, 32, 32));
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let parts = split_indices(20, &[5, 7, 8], 1).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 20);
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 7, 8]);
        assert!(split_indices(3, &[2, 2], 0).is_err());
    }

    #[test]
    fn downsample_halves_resolution() {
        let c = synthetic_corpus(3, 32, 0).unwrap().downsample2().unwrap();
        assert_eq!(c.images.dims(), (3, 3, 16, 16));
    }
}
