//! Attacker-side binary classifiers that imitate the watermark detector.
//!
//! The spectrum modes see the centered FFT of codec latents; the complex
//! mode uses complex-valued convolutions realised as real convolutions with
//! block weights `[[Wr, -Wi], [Wi, Wr]]` acting on stacked `[re; im]`
//! channels, and classifies on the real part of complex logits.

use std::path::Path;

use candle_core::{Tensor, Var, D};
use candle_nn::optim::Optimizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::Codec;
use crate::diffusion::Condition;
use crate::error::{invalid, Error, Result};
use crate::nn::{conv_im2col, cross_entropy, permutation, Init, Linear, ParamStore};
use crate::spectrum::SpectralTransform;
use crate::tensor::{Domain, SpatialTensor};

pub const SURROGATE_KIND: &str = "surrogate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateMode {
    /// Complex-valued network on latent spectra.
    Spectrum,
    /// Real network on `[re; im]` stacked latent spectra.
    StackedSpectrum,
    /// Real network on raw pixels.
    Pixel,
}

impl SurrogateMode {
    pub fn is_spectral(self) -> bool {
        self != SurrogateMode::Pixel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GeneratedWm,
    GeneratedUnwm,
    Public,
}

/// Network input: real part and, for spectral modes, imaginary part.
#[derive(Debug, Clone)]
pub struct Features {
    pub re: Tensor,
    pub im: Option<Tensor>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.re.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item_shape(&self) -> Result<(usize, usize, usize)> {
        let (_, c, h, w) = self.re.dims4()?;
        Ok((c, h, w))
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), self.re.device())?;
        Ok(Self { re: self.re.index_select(&ids, 0)?, im: self.im.as_ref().map(|t| t.index_select(&ids, 0)).transpose()? })
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self { re: self.re.narrow(0, start, len)?, im: self.im.as_ref().map(|t| t.narrow(0, start, len)).transpose()? })
    }

    /// Mean masked magnitude per item over the given plane positions of one channel.
    pub fn mean_magnitude(&self, channel: usize, positions: &[usize]) -> Result<Vec<f64>> {
        let n = self.re.dim(0)?;
        let re = self.re.narrow(1, channel, 1)?.flatten_from(1)?.to_vec2::<f32>()?;
        let im = match &self.im {
            Some(t) => t.narrow(1, channel, 1)?.flatten_from(1)?.to_vec2::<f32>()?,
            None => vec![vec![0.0; re[0].len()]; n],
        };
        Ok((0..n)
            .map(|i| {
                positions.iter().map(|&p| f64::from(re[i][p]).hypot(f64::from(im[i][p]))).sum::<f64>() / positions.len().max(1) as f64
            })
            .collect())
    }
}

/// Centered 2D FFT per channel of a latent batch.
pub fn latent_spectrum(latents: &Tensor) -> Result<Features> {
    let (_, _, h, w) = latents.dims4()?;
    let (re, im) = SpectralTransform::new(h, w)?.forward(latents)?;
    Ok(Features { re, im: Some(im) })
}

/// `FFT(encode(image))`, detached.
pub fn spectrum_features(images: &SpatialTensor, codec: &Codec) -> Result<Features> {
    let z = codec.encode(images)?;
    let f = latent_spectrum(z.data())?;
    Ok(Features { re: f.re.detach(), im: f.im.map(|t| t.detach()) })
}

pub fn pixel_features(images: &SpatialTensor) -> Result<Features> {
    if images.domain() != Domain::Pixel {
        return Err(invalid("pixel features need pixel-domain input"));
    }
    Ok(Features { re: images.data().clone(), im: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub mode: SurrogateMode,
    /// Channels of the first stage (complex channels in spectrum mode).
    pub width: usize,
    /// Residual blocks per stage.
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            mode: SurrogateMode::Spectrum,
            width: 8,
            depth: 1,
            epochs: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("surrogate width, epochs, batch size and learning rate must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("surrogate train fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Convolution whose weight is either free or assembled from complex parts.
struct SConv {
    complex: Option<(Var, Var, Var, Var)>,
    real: Option<(Var, Var)>,
}

impl SConv {
    /// `cin`/`cout` count complex channels in complex mode, real otherwise.
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, complex: bool, gain: f64) -> Result<Self> {
        if complex {
            // complex He init: each part carries half the variance
            let std = gain * (1.0 / (9 * cin) as f64).sqrt();
            let init = if gain == 0.0 { Init::Zeros } else { Init::Normal(std) };
            let wr = store.add(&format!("{name}.wr"), &[cout, 9, cin], init)?;
            let wi = store.add(&format!("{name}.wi"), &[cout, 9, cin], init)?;
            let br = store.add(&format!("{name}.br"), &[cout], Init::Zeros)?;
            let bi = store.add(&format!("{name}.bi"), &[cout], Init::Zeros)?;
            Ok(Self { complex: Some((wr, wi, br, bi)), real: None })
        } else {
            let init = if gain == 0.0 { Init::Zeros } else { Init::Normal(gain * (2.0 / (9 * cin) as f64).sqrt()) };
            let w = store.add(&format!("{name}.weight"), &[cout, 9 * cin], init)?;
            let b = store.add(&format!("{name}.bias"), &[cout], Init::Zeros)?;
            Ok(Self { complex: None, real: Some((w, b)) })
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match (&self.complex, &self.real) {
            (Some((wr, wi, br, bi)), _) => {
                let cout = wr.dim(0)?;
                let top = Tensor::cat(&[wr.as_tensor(), &wi.neg()?], 2)?;
                let bottom = Tensor::cat(&[wi.as_tensor(), wr.as_tensor()], 2)?;
                let cin2 = top.dim(2)?;
                let w = Tensor::cat(&[&top, &bottom], 0)?.reshape((2 * cout, 9 * cin2))?;
                let b = Tensor::cat(&[br.as_tensor(), bi.as_tensor()], 0)?;
                conv_im2col(x, &w, &b, 3)
            }
            (None, Some((w, b))) => conv_im2col(x, w.as_tensor(), b.as_tensor(), 3),
            _ => unreachable!("conv has weights"),
        }
    }
}

struct Block {
    a: SConv,
    b: SConv,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.a.forward(x)?.relu()?;
        Ok((self.b.forward(&h)? + x)?.relu()?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateMeta {
    pub config: SurrogateConfig,
    pub input_shape: (usize, usize, usize),
    pub codec_hash: Option<String>,
    pub report: Option<SurrogateTrainReport>,
}

/// Residual CNN: stem, one stage at full resolution, a widening stage at
/// half resolution, extra pooling down to at most 4x4, then a linear head.
pub struct SurrogateModel {
    meta: SurrogateMeta,
    store: ParamStore,
    stem: SConv,
    stage1: Vec<Block>,
    widen: SConv,
    stage2: Vec<Block>,
    head: Linear,
    scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTrainReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub split_ratio: f64,
    pub train_size: usize,
    pub val_size: usize,
}

fn pooled(mut s: usize) -> usize {
    s /= 2;
    while s > 4 && s % 2 == 0 {
        s /= 2;
    }
    s
}

impl SurrogateModel {
    pub fn new(config: SurrogateConfig, input_shape: (usize, usize, usize)) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = input_shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(format!("surrogate input {h}x{w} must have even sides")));
        }
        let complex = config.mode == SurrogateMode::Spectrum;
        let cin = if config.mode == SurrogateMode::StackedSpectrum { 2 * c } else { c };
        // real channel multiplier of the activations
        let k = if complex { 2 } else { 1 };
        let width = if config.mode == SurrogateMode::StackedSpectrum { 2 * config.width } else { config.width };
        let mut s = ParamStore::new(config.seed);
        let stem = SConv::new(&mut s, "stem", cin, width, complex, 1.0)?;
        let mut stage1 = Vec::new();
        for i in 0..config.depth {
            stage1.push(Block {
                a: SConv::new(&mut s, &format!("s1.{i}.a"), width, width, complex, 1.0)?,
                b: SConv::new(&mut s, &format!("s1.{i}.b"), width, width, complex, 0.0)?,
            });
        }
        let widen = SConv::new(&mut s, "widen", width, 2 * width, complex, 1.0)?;
        let mut stage2 = Vec::new();
        for i in 0..config.depth {
            stage2.push(Block {
                a: SConv::new(&mut s, &format!("s2.{i}.a"), 2 * width, 2 * width, complex, 1.0)?,
                b: SConv::new(&mut s, &format!("s2.{i}.b"), 2 * width, 2 * width, complex, 0.0)?,
            });
        }
        let flat = k * 2 * width * pooled(h) * pooled(w);
        let head = Linear::new(&mut s, "head", flat, 2)?;
        let scale = if config.mode.is_spectral() { 1.0 / ((h * w) as f64).sqrt() } else { 1.0 };
        let meta = SurrogateMeta { config, input_shape, codec_hash: None, report: None };
        Ok(Self { meta, store: s, stem, stage1, widen, stage2, head, scale })
    }

    pub fn meta(&self) -> &SurrogateMeta {
        &self.meta
    }

    pub fn mode(&self) -> SurrogateMode {
        self.meta.config.mode
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.meta.input_shape
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn set_codec_hash(&mut self, hash: Option<String>) {
        self.meta.codec_hash = hash;
    }

    /// Two real logits per item (`[clean, watermarked]`).
    pub fn logits(&self, f: &Features) -> Result<Tensor> {
        let shape = f.item_shape()?;
        if shape != self.meta.input_shape {
            return Err(invalid(format!("surrogate expects {:?}, got {shape:?}", self.meta.input_shape)));
        }
        let x = match (self.mode().is_spectral(), &f.im) {
            (true, Some(im)) => Tensor::cat(&[&f.re, im], 1)?,
            (false, None) => f.re.clone(),
            (true, None) => return Err(invalid("spectral surrogate needs complex features")),
            (false, Some(_)) => return Err(invalid("pixel surrogate takes real features")),
        };
        let x = (x * self.scale)?;
        let mut h = self.stem.forward(&x)?.relu()?;
        for b in &self.stage1 {
            h = b.forward(&h)?;
        }
        h = self.widen.forward(&h.avg_pool2d(2)?)?.relu()?;
        for b in &self.stage2 {
            h = b.forward(&h)?;
        }
        while h.dim(2)? > 4 && h.dim(2)? % 2 == 0 {
            h = h.avg_pool2d(2)?;
        }
        self.head.forward(&h.flatten_from(1)?)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        checkpoint::save(path, SURROGATE_KIND, &self.meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path, SURROGATE_KIND)?;
        let meta: SurrogateMeta = ck.meta_as()?;
        let mut m = Self::new(meta.config.clone(), meta.input_shape)?;
        m.store.import(&ck.tensors)?;
        m.meta = meta;
        Ok(m)
    }
}

pub struct Classification {
    pub logits: Tensor,
    pub prob_watermarked: Tensor,
}

/// Softmax over the real logits; both outputs stay on the autograd graph.
pub fn classify(model: &SurrogateModel, features: &Features) -> Result<Classification> {
    let logits = model.logits(features)?;
    let prob = candle_nn::ops::softmax(&logits, D::Minus1)?.narrow(1, 1, 1)?.squeeze(1)?;
    Ok(Classification { logits, prob_watermarked: prob })
}

/// Watermark probabilities for a large feature set, evaluated in chunks.
pub fn predict_proba(model: &SurrogateModel, features: &Features) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(features.len());
    for start in (0..features.len()).step_by(128) {
        let part = features.slice(start, 128.min(features.len() - start))?;
        out.extend(classify(model, &part)?.prob_watermarked.detach().to_vec1::<f32>()?);
    }
    Ok(out)
}

fn accuracy(model: &SurrogateModel, features: &Features, labels: &[u32]) -> Result<f64> {
    Ok(accuracy_and_loss(model, features, labels)?.0)
}

/// Accuracy and mean cross-entropy.
fn accuracy_and_loss(model: &SurrogateModel, features: &Features, labels: &[u32]) -> Result<(f64, f64)> {
    let p = predict_proba(model, features)?;
    let correct = p.iter().zip(labels).filter(|(p, &l)| (**p > 0.5) == (l == 1)).count();
    let loss: f64 = p
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let q = if l == 1 { f64::from(p) } else { 1.0 - f64::from(p) };
            -q.max(1e-12).ln()
        })
        .sum();
    let n = labels.len().max(1) as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Labeled images with their origin.
#[derive(Debug, Clone)]
pub struct SurrogateDataset {
    pub images: SpatialTensor,
    pub labels: Vec<u32>,
    pub provenance: Vec<Provenance>,
    pub seeds: Vec<Option<u64>>,
    pub conds: Vec<Option<Condition>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub id: usize,
    pub label: u32,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub cond: Option<Condition>,
}

impl SurrogateDataset {
    pub fn new(
        images: SpatialTensor,
        provenance: Vec<Provenance>,
        seeds: Vec<Option<u64>>,
        conds: Vec<Option<Condition>>,
    ) -> Result<Self> {
        let n = images.len();
        if provenance.len() != n || seeds.len() != n || conds.len() != n {
            return Err(invalid("dataset columns differ in length"));
        }
        let labels = provenance.iter().map(|p| u32::from(*p == Provenance::GeneratedWm)).collect();
        Ok(Self { images, labels, provenance, seeds, conds })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> Vec<DatasetRow> {
        (0..self.len())
            .map(|i| DatasetRow {
                id: i,
                label: self.labels[i],
                provenance: self.provenance[i],
                seed: self.seeds[i],
                cond: self.conds[i],
            })
            .collect()
    }

    /// Rebuilds a dataset from images and manifest rows.
    pub fn from_rows(images: SpatialTensor, rows: &[DatasetRow]) -> Result<Self> {
        let ds = Self::new(
            images,
            rows.iter().map(|r| r.provenance).collect(),
            rows.iter().map(|r| r.seed).collect(),
            rows.iter().map(|r| r.cond).collect(),
        )?;
        if rows.iter().zip(&ds.labels).any(|(r, &l)| r.label != l) {
            return Err(invalid("manifest label disagrees with provenance"));
        }
        Ok(ds)
    }

    /// Inputs for a surrogate of the given mode; spectral modes encode with `codec`.
    pub fn features(&self, mode: SurrogateMode, codec: Option<&Codec>) -> Result<Features> {
        if mode.is_spectral() {
            spectrum_features(&self.images, codec.ok_or_else(|| invalid("spectral features need a codec"))?)
        } else {
            pixel_features(&self.images)
        }
    }
}

/// Trains from scratch with a seeded 7:3-style split and keeps the
/// parameters of the epoch with the best validation accuracy, ties going
/// to the lower validation loss.
pub fn train_surrogate(features: &Features, labels: &[u32], cfg: &SurrogateConfig) -> Result<(SurrogateModel, SurrogateTrainReport)> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(invalid("feature and label counts differ"));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(invalid("surrogate training needs both classes"));
    }
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5A77);
    let order = permutation(n, &mut rng);
    let n_train = ((n as f64) * cfg.train_fraction).round().clamp(1.0, (n - 1) as f64) as usize;
    let (train_idx, val_idx) = order.split_at(n_train);
    let train_f = features.select(train_idx)?;
    let val_f = features.select(val_idx)?;
    let train_y: Vec<u32> = train_idx.iter().map(|&i| labels[i]).collect();
    let val_y: Vec<u32> = val_idx.iter().map(|&i| labels[i]).collect();

    let model = SurrogateModel::new(cfg.clone(), features.item_shape()?)?;
    let mut opt = model.store.adam(cfg.learning_rate, (0.9, 0.999))?;
    let mut best = (f64::NEG_INFINITY, 0, model.store.snapshot()?, f64::INFINITY);
    for epoch in 0..cfg.epochs {
        for chunk in permutation(n_train, &mut rng).chunks(cfg.batch_size) {
            let x = train_f.select(chunk)?;
            let y: Vec<u32> = chunk.iter().map(|&i| train_y[i]).collect();
            let loss = cross_entropy(&model.logits(&x)?, &y)?;
            opt.backward_step(&loss)?;
        }
        let (val, val_loss) = accuracy_and_loss(&model, &val_f, &val_y)?;
        log::debug!("surrogate epoch {epoch}: val accuracy {val:.4}, loss {val_loss:.5}");
        if val > best.0 || (val == best.0 && val_loss < best.3) {
            best = (val, epoch, model.store.snapshot()?, val_loss);
        }
    }
    model.store.restore(&best.2)?;
    let report = SurrogateTrainReport {
        train_accuracy: accuracy(&model, &train_f, &train_y)?,
        val_accuracy: best.0,
        best_epoch: best.1,
        split_ratio: cfg.train_fraction,
        train_size: n_train,
        val_size: n - n_train,
    };
    let mut model = model;
    model.meta.report = Some(report.clone());
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_vec, DEVICE};

    fn feats(n: usize, seed: u64) -> Features {
        let re = Tensor::from_vec(gaussian_vec(seed, n * 2 * 64), (n, 2, 8, 8), &DEVICE).unwrap();
        let im = Tensor::from_vec(gaussian_vec(seed + 1, n * 2 * 64), (n, 2, 8, 8), &DEVICE).unwrap();
        Features { re, im: Some(im) }
    }

    fn cfg(mode: SurrogateMode) -> SurrogateConfig {
        SurrogateConfig { mode, width: 4, depth: 1, epochs: 2, ..Default::default() }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = SurrogateModel::new(cfg(SurrogateMode::Spectrum), (2, 8, 8)).unwrap();
        let out = classify(&m, &feats(3, 1)).unwrap();
        let p = candle_nn::ops::softmax(&out.logits, D::Minus1).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(p.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn complex_conv_matches_complex_arithmetic() {
        // A complex conv applied to i*x must equal i times the conv of x.
        let mut s = ParamStore::new(3);
        let conv = SConv::new(&mut s, "c", 2, 3, true, 1.0).unwrap();
        let f = feats(1, 5);
        let x = Tensor::cat(&[&f.re, f.im.as_ref().unwrap()], 1).unwrap();
        let ix = Tensor::cat(&[&f.im.as_ref().unwrap().neg().unwrap(), &f.re], 1).unwrap();
        let y = conv.forward(&x).unwrap();
        let yi = conv.forward(&ix).unwrap();
        // biases start at zero, so the conv is linear
        let (re, im) = (y.narrow(1, 0, 3).unwrap(), y.narrow(1, 3, 3).unwrap());
        let want = Tensor::cat(&[&im.neg().unwrap(), &re], 1).unwrap();
        let d = (yi - want).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-4, "{d}");
    }

    #[test]
    fn mode_mismatch_rejected() {
        let m = SurrogateModel::new(cfg(SurrogateMode::Pixel), (2, 8, 8)).unwrap();
        assert!(m.logits(&feats(1, 1)).is_err());
        let m = SurrogateModel::new(cfg(SurrogateMode::Spectrum), (2, 8, 8)).unwrap();
        let f = feats(1, 1);
        assert!(m.logits(&Features { re: f.re, im: None }).is_err());
        assert!(m.logits(&feats(1, 1).slice(0, 1).unwrap()).is_ok());
    }

    #[test]
    fn single_class_rejected() {
        assert!(train_surrogate(&feats(4, 1), &[1, 1, 1, 1], &cfg(SurrogateMode::Spectrum)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let f = feats(20, 7);
        let y: Vec<u32> = (0..20).map(|i| i % 2).collect();
        let (a, ra) = train_surrogate(&f, &y, &cfg(SurrogateMode::StackedSpectrum)).unwrap();
        let (b, rb) = train_surrogate(&f, &y, &cfg(SurrogateMode::StackedSpectrum)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.store().digest().unwrap(), b.store().digest().unwrap());
        assert_eq!(ra.train_size, 14);
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = feats(10, 2);
        let y: Vec<u32> = (0..10).map(|i| i % 2).collect();
        let (m, _) = train_surrogate(&f, &y, &cfg(SurrogateMode::Spectrum)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.safetensors");
        m.save(&p).unwrap();
        let back = SurrogateModel::load(&p).unwrap();
        assert_eq!(predict_proba(&m, &f).unwrap(), predict_proba(&back, &f).unwrap());
    }

    #[test]
    fn provenance_survives_manifest() {
        let imgs = SpatialTensor::zeros((3, 3, 4, 4), Domain::Pixel).unwrap();
        let ds = SurrogateDataset::new(
            imgs.clone(),
            vec![Provenance::GeneratedWm, Provenance::GeneratedUnwm, Provenance::Public],
            vec![Some(1), Some(1), None],
            vec![Some(Condition::Class(2)), Some(Condition::Class(2)), None],
        )
        .unwrap();
        let json = serde_json::to_string(&ds.rows()).unwrap();
        let rows: Vec<DatasetRow> = serde_json::from_str(&json).unwrap();
        let back = SurrogateDataset::from_rows(imgs, &rows).unwrap();
        assert_eq!(back.provenance, ds.provenance);
        assert_eq!(back.labels, vec![1, 0, 0]);
    }
}
