//! Image-degradation metrics and the quality delta.

use std::collections::BTreeMap;
use std::str::FromStr;

use candle_core::Tensor;
use candle_nn::optim::Optimizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledImages;
use crate::error::{invalid, Error, Result};
use crate::nn::{cross_entropy, permutation, Conv2d, Linear, ParamStore};
use crate::tensor::SpatialTensor;

/// Names reserved for adapters around large pretrained models.
pub const RESERVED_ADAPTERS: [&str; 3] = ["clip-score", "fid", "lpips"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityMetric {
    PixelMse,
    Psnr,
    FeatureDistance,
}

impl QualityMetric {
    pub const BUILTIN: [QualityMetric; 3] = [QualityMetric::PixelMse, QualityMetric::Psnr, QualityMetric::FeatureDistance];

    pub fn name(self) -> &'static str {
        match self {
            QualityMetric::PixelMse => "pixel-mse",
            QualityMetric::Psnr => "psnr",
            QualityMetric::FeatureDistance => "feature-distance",
        }
    }
}

impl FromStr for QualityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel-mse" => Ok(QualityMetric::PixelMse),
            "psnr" => Ok(QualityMetric::Psnr),
            "feature-distance" => Ok(QualityMetric::FeatureDistance),
            r if RESERVED_ADAPTERS.contains(&r) => Err(invalid(format!("quality adapter {r} is reserved but not available"))),
            other => Err(invalid(format!("unknown quality metric {other}"))),
        }
    }
}

pub fn builtin_quality_metrics() -> Vec<QualityMetric> {
    QualityMetric::BUILTIN.to_vec()
}

/// Per-image mean squared error.
pub fn pixel_mse(a: &SpatialTensor, b: &SpatialTensor) -> Result<Vec<f64>> {
    a.require_same_shape(b)?;
    let per = (a.data() - b.data())?.sqr()?.flatten_from(1)?.mean(1)?.to_vec1::<f32>()?;
    Ok(per.into_iter().map(f64::from).collect())
}

/// Per-image PSNR for images in `[-1, 1]` (peak-to-peak 2); identical
/// images give `+inf`.
pub fn psnr(a: &SpatialTensor, b: &SpatialTensor) -> Result<Vec<f64>> {
    Ok(pixel_mse(a, b)?
        .into_iter()
        .map(|m| if m == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / m).log10() })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self { width: 16, epochs: 4, batch_size: 32, learning_rate: 2e-3, seed: 0 }
    }
}

/// Small image classifier whose penultimate activations define the
/// feature distance.
pub struct FeatureNet {
    store: ParamStore,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    head: Linear,
}

impl FeatureNet {
    pub fn new(channels: usize, classes: usize, cfg: &FeatureNetConfig) -> Result<Self> {
        let mut s = ParamStore::new(cfg.seed);
        let w = cfg.width;
        Ok(Self {
            c1: Conv2d::new(&mut s, "c1", channels, w, 3)?,
            c2: Conv2d::new(&mut s, "c2", w, 2 * w, 3)?,
            c3: Conv2d::new(&mut s, "c3", 2 * w, 2 * w, 3)?,
            head: Linear::new(&mut s, "head", 2 * w, classes)?,
            store: s,
        })
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(x)?.relu()?.avg_pool2d(2)?;
        let h = self.c2.forward(&h)?.relu()?.avg_pool2d(2)?;
        let h = self.c3.forward(&h)?.relu()?;
        Ok(h.flatten_from(2)?.mean(2)?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.features(x)?)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

pub fn train_feature_net(data: &LabeledImages, cfg: &FeatureNetConfig) -> Result<FeatureNet> {
    if data.is_empty() {
        return Err(invalid("feature network needs training images"));
    }
    let (c, _, _) = data.images.item_shape();
    let net = FeatureNet::new(c, data.num_classes().max(2), cfg)?;
    let mut opt = net.store.adam(cfg.learning_rate, (0.9, 0.999))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xFEA7);
    for _ in 0..cfg.epochs {
        for chunk in permutation(data.len(), &mut rng).chunks(cfg.batch_size) {
            let x = data.images.select(chunk)?;
            let y: Vec<u32> = chunk.iter().map(|&i| data.labels[i]).collect();
            let loss = cross_entropy(&net.logits(x.data())?, &y)?;
            opt.backward_step(&loss)?;
        }
    }
    Ok(net)
}

/// Per-image L2 distance between penultimate activations.
pub fn feature_distance(net: &FeatureNet, a: &SpatialTensor, b: &SpatialTensor) -> Result<Vec<f64>> {
    a.require_same_shape(b)?;
    let mut out = Vec::with_capacity(a.len());
    for start in (0..a.len()).step_by(128) {
        let len = 128.min(a.len() - start);
        let fa = net.features(a.slice(start, len)?.data())?.detach();
        let fb = net.features(b.slice(start, len)?.data())?.detach();
        out.extend((fa - fb)?.sqr()?.sum(1)?.sqrt()?.to_vec1::<f32>()?.into_iter().map(f64::from));
    }
    Ok(out)
}

/// Evaluates quality metrics; feature distance needs a trained network.
pub struct QualitySuite {
    pub feature_net: Option<FeatureNet>,
}

impl QualitySuite {
    pub fn score(&self, metric: QualityMetric, x: &SpatialTensor, reference: &SpatialTensor) -> Result<Vec<f64>> {
        match metric {
            QualityMetric::PixelMse => pixel_mse(x, reference),
            QualityMetric::Psnr => psnr(x, reference),
            QualityMetric::FeatureDistance => match &self.feature_net {
                Some(net) => feature_distance(net, x, reference),
                None => Err(invalid("feature-distance needs a trained feature network")),
            },
        }
    }

    /// Mean over images of `|Q(x0, ref) - Q(x0*, ref)|`. Two infinite
    /// scores of the same sign count as no change.
    pub fn quality_delta(
        &self,
        metric: QualityMetric,
        x0: &SpatialTensor,
        x0_star: &SpatialTensor,
        reference: &SpatialTensor,
    ) -> Result<f64> {
        x0.require_same_shape(x0_star)?;
        let a = self.score(metric, x0, reference)?;
        let b = self.score(metric, x0_star, reference)?;
        let deltas: Vec<f64> = a.iter().zip(&b).map(|(p, q)| if p == q { 0.0 } else { (p - q).abs() }).collect();
        Ok(deltas.iter().sum::<f64>() / deltas.len().max(1) as f64)
    }

    pub fn quality_deltas(
        &self,
        metrics: &[QualityMetric],
        x0: &SpatialTensor,
        x0_star: &SpatialTensor,
        reference: &SpatialTensor,
    ) -> Result<BTreeMap<String, f64>> {
        metrics.iter().map(|&m| Ok((m.name().to_string(), self.quality_delta(m, x0, x0_star, reference)?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Domain;

    fn img(seed: u64) -> SpatialTensor {
        SpatialTensor::gaussian((3, 4, 4), &[seed, seed + 1], Domain::Pixel).unwrap().clip_pixels().unwrap()
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = img(1);
        assert!(psnr(&a, &a).unwrap().iter().all(|v| v.is_infinite() && *v > 0.0));
    }

    #[test]
    fn mse_symmetric_non_negative() {
        let (a, b) = (img(1), img(5));
        let ab = pixel_mse(&a, &b).unwrap();
        assert_eq!(ab, pixel_mse(&b, &a).unwrap());
        assert!(ab.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn quality_delta_identity_and_symmetry() {
        let suite = QualitySuite { feature_net: None };
        let (x, y, r) = (img(1), img(3), img(7));
        for m in [QualityMetric::PixelMse, QualityMetric::Psnr] {
            assert_eq!(suite.quality_delta(m, &x, &x, &r).unwrap(), 0.0);
            assert_eq!(suite.quality_delta(m, &x, &y, &r).unwrap(), suite.quality_delta(m, &y, &x, &r).unwrap());
        }
        assert_eq!(suite.quality_delta(QualityMetric::Psnr, &x, &x, &x).unwrap(), 0.0);
        assert!(suite.quality_delta(QualityMetric::FeatureDistance, &x, &y, &r).is_err());
    }

    #[test]
    fn metric_names_parse() {
        for m in builtin_quality_metrics() {
            assert_eq!(m.name().parse::<QualityMetric>().unwrap(), m);
        }
        assert!("lpips".parse::<QualityMetric>().is_err());
        assert!("sharpness".parse::<QualityMetric>().is_err());
    }
}
