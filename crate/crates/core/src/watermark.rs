//! Ring keys in the centered Fourier spectrum of one latent channel.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectrum::{centered_fft2, centered_ifft2, mirror_index};
use crate::tensor::{gaussian_vec, SpatialTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// Mean absolute difference over real and imaginary parts together.
    #[default]
    Complex,
    /// Mean absolute difference of real parts only.
    RealPart,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KeyFile {
    format: String,
    version: u32,
    radii: Vec<usize>,
    values: Vec<[f64; 2]>,
    channel: usize,
    shape: [usize; 3],
    seed: u64,
    threshold: Option<f64>,
    distance: DistanceMode,
}

const KEY_FORMAT: &str = "ringlab-key";
const KEY_VERSION: u32 = 1;

/// Concentric rings of constant complex values on the carrier channel.
///
/// Positions in the upper half-plane (and the right half of the center row)
/// carry the ring value; their point reflections carry its conjugate, so the
/// embedded channel stays real. The zero-frequency bin keeps only the real part.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyKey {
    radii: Vec<usize>,
    values: Vec<Complex64>,
    channel: usize,
    shape: (usize, usize, usize),
    seed: u64,
    threshold: Option<f64>,
    distance: DistanceMode,
    /// Ring index per plane position, row-major.
    ring_of: Vec<Option<usize>>,
    positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub distance: f64,
    pub threshold: f64,
    pub decision: bool,
    pub score: f64,
}

impl DetectionResult {
    pub fn new(distance: f64, threshold: f64) -> Self {
        Self { distance, threshold, decision: distance <= threshold, score: -distance }
    }
}

/// Rounded Euclidean distance of `(y, x)` to the spectrum center.
pub fn rounded_radius(y: usize, x: usize, h: usize, w: usize) -> usize {
    let dy = y as f64 - (h / 2) as f64;
    let dx = x as f64 - (w / 2) as f64;
    (dy * dy + dx * dx).sqrt().round() as usize
}

/// Key generation.
pub fn generate_key(shape: (usize, usize, usize), radii: &[usize], channel: usize, seed: u64) -> Result<FrequencyKey> {
    let (c, h, w) = shape;
    if channel >= c {
        return Err(invalid(format!("carrier channel {channel} outside 0..{c}")));
    }
    if radii.windows(2).any(|p| p[1] <= p[0]) {
        return Err(invalid("ring radii must be strictly increasing"));
    }
    if let Some(&r) = radii.last() {
        if 2 * r >= h.min(w) {
            return Err(invalid(format!("radius {r} must be below min(H, W)/2 for a {h}x{w} plane")));
        }
    }
    let spec = centered_fft2(&gaussian_vec(seed, h * w), h, w);
    let values = radii.iter().map(|&r| spec[(h / 2) * w + w / 2 + r]).collect();
    FrequencyKey::from_parts(radii.to_vec(), values, channel, shape, seed)
}

impl FrequencyKey {
    pub fn from_parts(
        radii: Vec<usize>,
        values: Vec<Complex64>,
        channel: usize,
        shape: (usize, usize, usize),
        seed: u64,
    ) -> Result<Self> {
        let (_, h, w) = shape;
        if radii.len() != values.len() {
            return Err(invalid("one value per ring required"));
        }
        let ring_of: Vec<Option<usize>> = (0..h * w)
            .map(|i| {
                let r = rounded_radius(i / w, i % w, h, w);
                radii.iter().position(|&q| q == r)
            })
            .collect();
        let positions = (0..h * w).filter(|&i| ring_of[i].is_some()).collect();
        Ok(Self { radii, values, channel, shape, seed, threshold: None, distance: DistanceMode::default(), ring_of, positions })
    }

    pub fn radii(&self) -> &[usize] {
        &self.radii
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn channel(&self) -> usize {
        self.channel
    }

    /// `(C, H, W)` of the latent the key belongs to.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn set_threshold(&mut self, tau: f64) {
        self.threshold = Some(tau);
    }

    pub fn distance_mode(&self) -> DistanceMode {
        self.distance
    }

    pub fn set_distance_mode(&mut self, mode: DistanceMode) {
        self.distance = mode;
    }

    /// Boolean mask over the carrier plane, row-major.
    pub fn mask(&self) -> Vec<bool> {
        self.ring_of.iter().map(Option::is_some).collect()
    }

    pub fn ring_of(&self, pos: usize) -> Option<usize> {
        self.ring_of[pos]
    }

    /// Masked plane indices in row-major order.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Value written at each masked position, in [`Self::positions`] order.
    pub fn targets(&self) -> Vec<Complex64> {
        let (_, h, w) = self.shape;
        self.positions
            .iter()
            .map(|&p| {
                let v = self.values[self.ring_of[p].expect("masked")];
                let (y, x) = (p / w, p % w);
                let (my, mx) = mirror_index(y, x, h, w);
                if (my, mx) == (y, x) {
                    Complex64::new(v.re, 0.0)
                } else if y > h / 2 || (y == h / 2 && x > w / 2) {
                    v
                } else {
                    v.conj()
                }
            })
            .collect()
    }

    fn check(&self, x: &SpatialTensor) -> Result<()> {
        if x.item_shape() != self.shape {
            return Err(invalid(format!("key shape {:?} does not match latent {:?}", self.shape, x.item_shape())));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (c, h, w) = self.shape;
        let file = KeyFile {
            format: KEY_FORMAT.into(),
            version: KEY_VERSION,
            radii: self.radii.clone(),
            values: self.values.iter().map(|v| [v.re, v.im]).collect(),
            channel: self.channel,
            shape: [c, h, w],
            seed: self.seed,
            threshold: self.threshold,
            distance: self.distance,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: KeyFile = serde_json::from_str(&text)?;
        if f.format != KEY_FORMAT || f.version != KEY_VERSION {
            return Err(Error::Config(format!("{} is not a version {KEY_VERSION} key file", path.display())));
        }
        let [c, h, w] = f.shape;
        let values = f.values.iter().map(|&[re, im]| Complex64::new(re, im)).collect();
        let mut key = Self::from_parts(f.radii, values, f.channel, (c, h, w), f.seed)?;
        key.threshold = f.threshold;
        key.distance = f.distance;
        Ok(key)
    }
}

/// Writes the key into the carrier channel of every item.
pub fn embed_key(xt: &SpatialTensor, key: &FrequencyKey) -> Result<SpatialTensor> {
    key.check(xt)?;
    let (n, c, h, w) = xt.dims();
    let mut values = xt.to_vec()?;
    let targets = key.targets();
    let plane = h * w;
    for i in 0..n {
        let off = (i * c + key.channel) * plane;
        let mut spec = centered_fft2(&values[off..off + plane], h, w);
        for (&p, &v) in key.positions.iter().zip(&targets) {
            spec[p] = v;
        }
        for (dst, src) in values[off..off + plane].iter_mut().zip(centered_ifft2(&spec, h, w)) {
            *dst = src.re as f32;
        }
    }
    SpatialTensor::from_vec(values, (n, c, h, w), xt.domain())
}

/// Centered spectrum of the carrier channel at the masked positions, per item.
pub fn extract_key(x: &SpatialTensor, key: &FrequencyKey) -> Result<Vec<Vec<Complex64>>> {
    key.check(x)?;
    let (n, c, h, w) = x.dims();
    let values = x.to_vec()?;
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let off = (i * c + key.channel) * plane;
            let spec = centered_fft2(&values[off..off + plane], h, w);
            key.positions.iter().map(|&p| spec[p]).collect()
        })
        .collect())
}

/// Per-position mean L1 distance between extracted and target values.
pub fn key_distance(extracted: &[Complex64], targets: &[Complex64], mode: DistanceMode) -> f64 {
    assert_eq!(extracted.len(), targets.len(), "extracted/target length");
    if targets.is_empty() {
        return 0.0;
    }
    let m = targets.len() as f64;
    match mode {
        DistanceMode::Complex => {
            extracted.iter().zip(targets).map(|(a, b)| (a.re - b.re).abs() + (a.im - b.im).abs()).sum::<f64>() / (2.0 * m)
        }
        DistanceMode::RealPart => extracted.iter().zip(targets).map(|(a, b)| (a.re - b.re).abs()).sum::<f64>() / m,
    }
}

/// Key distances of latents that are already at step `T`.
pub fn latent_distances(x: &SpatialTensor, key: &FrequencyKey) -> Result<Vec<f64>> {
    let targets = key.targets();
    Ok(extract_key(x, key)?.iter().map(|e| key_distance(e, &targets, key.distance)).collect())
}

/// Empirical-quantile threshold: the largest observed distance `tau` such
/// that at most `floor(fpr * n)` negatives satisfy `d <= tau`. When none
/// qualifies the result lies strictly below every negative.
pub fn calibrate_threshold(negative_distances: &[f64], target_fpr: f64) -> Result<f64> {
    if negative_distances.is_empty() {
        return Err(invalid("cannot calibrate on an empty negative set"));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(invalid(format!("target FPR {target_fpr} outside [0, 1]")));
    }
    if negative_distances.iter().any(|d| d.is_nan()) {
        return Err(invalid("negative distances contain NaN"));
    }
    let n = negative_distances.len();
    if (n as f64) * target_fpr < 1.0 && target_fpr > 0.0 {
        log::warn!("{n} negatives are too few to resolve a false-positive rate of {target_fpr}");
    }
    let allowed = (target_fpr * n as f64).floor() as usize;
    let mut sorted = negative_distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    // count of d <= sorted[i] is the index one past the last equal value
    let mut best = None;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        if j + 1 <= allowed {
            best = Some(sorted[i]);
        } else {
            break;
        }
        i = j + 1;
    }
    Ok(best.unwrap_or_else(|| sorted[0].next_down()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Domain;

    #[test]
    fn same_seed_same_key() {
        let a = generate_key((4, 16, 16), &[3, 5], 3, 7).unwrap();
        let b = generate_key((4, 16, 16), &[3, 5], 3, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), generate_key((4, 16, 16), &[3, 5], 3, 8).unwrap().values());
    }

    #[test]
    fn radius_zero_is_dc_only() {
        let k = generate_key((4, 16, 16), &[0], 3, 1).unwrap();
        assert_eq!(k.positions(), &[8 * 16 + 8]);
        assert_eq!(k.targets()[0].im, 0.0);
    }

    #[test]
    fn invalid_keys() {
        assert!(generate_key((4, 16, 16), &[8], 3, 0).is_err());
        assert!(generate_key((4, 16, 16), &[5, 3], 3, 0).is_err());
        assert!(generate_key((4, 16, 16), &[3], 4, 0).is_err());
    }

    #[test]
    fn targets_are_hermitian() {
        let k = generate_key((4, 16, 16), &[1, 2, 4, 6], 0, 3).unwrap();
        let t = k.targets();
        for (i, &p) in k.positions().iter().enumerate() {
            let (my, mx) = mirror_index(p / 16, p % 16, 16, 16);
            let j = k.positions().iter().position(|&q| q == my * 16 + mx).unwrap();
            assert!((t[i] - t[j].conj()).norm() < 1e-12);
        }
    }

    #[test]
    fn embed_extract_round_trip_and_locality() {
        let k = generate_key((4, 16, 16), &[2, 4, 6], 3, 11).unwrap();
        let x = SpatialTensor::gaussian((4, 16, 16), &[1, 2], Domain::Latent).unwrap();
        let y = embed_key(&x, &k).unwrap();
        for got in extract_key(&y, &k).unwrap() {
            for (a, b) in got.iter().zip(k.targets()) {
                assert!((a - b).norm() < 1e-4);
            }
        }
        for i in 0..2 {
            for ch in 0..3 {
                assert_eq!(
                    y.data().get(i).unwrap().get(ch).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                    x.data().get(i).unwrap().get(ch).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
                );
            }
        }
        assert!(latent_distances(&y, &k).unwrap().iter().all(|&d| d < 1e-4));
    }

    #[test]
    fn empty_key_is_identity_and_zero_extracts_zero() {
        let k = generate_key((4, 16, 16), &[], 3, 0).unwrap();
        let x = SpatialTensor::gaussian((4, 16, 16), &[4], Domain::Latent).unwrap();
        assert!(embed_key(&x, &k).unwrap().max_abs_diff(&x).unwrap() < 1e-6);
        let k = generate_key((4, 16, 16), &[3], 3, 0).unwrap();
        let z = SpatialTensor::zeros((1, 4, 16, 16), Domain::Latent).unwrap();
        assert!(extract_key(&z, &k).unwrap()[0].iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let k = generate_key((4, 16, 16), &[3], 3, 0).unwrap();
        let x = SpatialTensor::gaussian((4, 8, 8), &[4], Domain::Latent).unwrap();
        assert!(embed_key(&x, &k).is_err());
        assert!(extract_key(&x, &k).is_err());
    }

    #[test]
    fn distance_modes() {
        let a = [Complex64::new(1.0, 2.0), Complex64::new(0.0, 0.0)];
        let b = [Complex64::new(0.0, 0.0), Complex64::new(1.0, -1.0)];
        assert!((key_distance(&a, &b, DistanceMode::Complex) - 5.0 / 4.0).abs() < 1e-12);
        assert!((key_distance(&a, &b, DistanceMode::RealPart) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_threshold(&[0.1, 0.2, 0.3, 0.4], 0.25).unwrap(), 0.1);
        let t = calibrate_threshold(&[0.3, 0.1, 0.2], 0.0).unwrap();
        assert!(t < 0.1);
        let t = calibrate_threshold(&[0.5; 4], 0.5).unwrap();
        assert!(t < 0.5);
        assert!(calibrate_threshold(&[], 0.1).is_err());
    }

    #[test]
    fn detection_result_contract() {
        let r = DetectionResult::new(0.3, 0.3);
        assert!(r.decision);
        assert_eq!(r.score, -0.3);
        assert!(!DetectionResult::new(0.1, 0.0).decision);
    }

    #[test]
    fn key_file_round_trip() {
        let mut k = generate_key((4, 16, 16), &[3, 5], 3, 9).unwrap();
        k.set_threshold(12.5);
        k.set_distance_mode(DistanceMode::RealPart);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("key.json");
        k.save(&path).unwrap();
        assert_eq!(FrequencyKey::load(&path).unwrap(), k);
    }
}
