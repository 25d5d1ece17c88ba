//! Batched `(N, C, H, W)` arrays tagged with the space they live in.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEVICE: Device = Device::Cpu;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Images, nominally in `[-1, 1]`.
    Pixel,
    /// Diffusion latents, unbounded.
    Latent,
}

/// A batch of `C x H x W` arrays. A single image is a batch of one.
#[derive(Debug, Clone)]
pub struct SpatialTensor {
    data: Tensor,
    domain: Domain,
}

impl SpatialTensor {
    pub fn new(data: Tensor, domain: Domain) -> Result<Self> {
        if data.rank() != 4 {
            return Err(invalid(format!("expected (N, C, H, W), got {:?}", data.dims())));
        }
        let data = if data.dtype() == DType::F32 { data } else { data.to_dtype(DType::F32)? };
        Ok(Self { data, domain })
    }

    pub fn from_vec(values: Vec<f32>, shape: (usize, usize, usize, usize), domain: Domain) -> Result<Self> {
        let (n, c, h, w) = shape;
        if values.len() != n * c * h * w {
            return Err(invalid(format!("{} values for shape {shape:?}", values.len())));
        }
        Self::new(Tensor::from_vec(values, (n, c, h, w), &DEVICE)?, domain)
    }

    pub fn zeros(shape: (usize, usize, usize, usize), domain: Domain) -> Result<Self> {
        Self::new(Tensor::zeros(shape, DType::F32, &DEVICE)?, domain)
    }

    /// One standard-normal `C x H x W` draw per seed.
    pub fn gaussian(chw: (usize, usize, usize), seeds: &[u64], domain: Domain) -> Result<Self> {
        let (c, h, w) = chw;
        let per = c * h * w;
        let mut values = Vec::with_capacity(per * seeds.len());
        for &seed in seeds {
            values.extend(gaussian_vec(seed, per));
        }
        Self::from_vec(values, (seeds.len(), c, h, w), domain)
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Shape of one item, `(C, H, W)`.
    pub fn item_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.dims();
        (c, h, w)
    }

    pub fn len(&self) -> usize {
        self.dims().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_data(&self, data: Tensor) -> Result<Self> {
        Self::new(data, self.domain)
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        self.with_data(self.data.narrow(0, start, len)?)
    }

    pub fn item(&self, i: usize) -> Result<Self> {
        self.slice(i, 1)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), indices.len(), &DEVICE)?;
        self.with_data(self.data.index_select(&idx, 0)?)
    }

    pub fn cat(parts: &[SpatialTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("cannot concatenate zero tensors"))?;
        if parts.iter().any(|p| p.domain != first.domain || p.item_shape() != first.item_shape()) {
            return Err(invalid("concatenated tensors must share domain and item shape"));
        }
        let datas: Vec<&Tensor> = parts.iter().map(|p| &p.data).collect();
        Self::new(Tensor::cat(&datas, 0)?, first.domain)
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.data.flatten_all()?.to_vec1::<f32>()?)
    }

    /// Values of item `i`, flattened `C x H x W`.
    pub fn item_vec(&self, i: usize) -> Result<Vec<f32>> {
        Ok(self.data.get(i)?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn max_abs(&self) -> Result<f32> {
        Ok(self.data.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?)
    }

    pub fn clip_pixels(&self) -> Result<Self> {
        self.with_data(self.data.clamp(-1f32, 1f32)?)
    }

    pub fn require_same_shape(&self, other: &SpatialTensor) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(invalid(format!("shape mismatch: {:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(())
    }

    /// Mean absolute difference per element.
    pub fn mean_abs_diff(&self, other: &SpatialTensor) -> Result<f32> {
        self.require_same_shape(other)?;
        Ok((&self.data - &other.data)?.abs()?.mean_all()?.to_scalar::<f32>()?)
    }

    pub fn max_abs_diff(&self, other: &SpatialTensor) -> Result<f32> {
        self.require_same_shape(other)?;
        Ok((&self.data - &other.data)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f32>()?)
    }
}

/// `n` standard-normal samples from a seeded ChaCha stream.
pub fn gaussian_vec(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Deterministic per-item seed derived from a base seed and an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_is_seeded() {
        let a = SpatialTensor::gaussian((2, 4, 4), &[1, 2], Domain::Latent).unwrap();
        let b = SpatialTensor::gaussian((2, 4, 4), &[1, 2], Domain::Latent).unwrap();
        assert_eq!(a.to_vec().unwrap(), b.to_vec().unwrap());
        assert_ne!(a.item_vec(0).unwrap(), a.item_vec(1).unwrap());
    }

    #[test]
    fn rejects_wrong_rank() {
        let t = Tensor::zeros((2, 3), DType::F32, &DEVICE).unwrap();
        assert!(SpatialTensor::new(t, Domain::Pixel).is_err());
    }

    #[test]
    fn derive_seed_spreads() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 0));
    }
}
