//! Experiment configuration (TOML). Every field has a default, so a config
//! file only lists what it changes. [`ExperimentConfig::validate`] runs
//! before any stage does work.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ringlab_core::codec::CodecVariant;
use ringlab_core::diffusion::ScheduleKind;
use ringlab_core::quality::QualityMetric;
use ringlab_core::watermark::DistanceMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSource {
    /// Procedural shapes generated from the seed.
    Synthetic,
    /// PNG files below `corpus.path`, one subdirectory per class.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    pub path: Option<PathBuf>,
    pub image_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { source: CorpusSource::Synthetic, path: None, image_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub diffusion_train: usize,
    pub codec_train: usize,
    pub public: usize,
    pub eval: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { diffusion_train: 1024, codec_train: 1024, public: 256, eval: 128 }
    }
}

impl SplitConfig {
    pub fn total(&self) -> usize {
        self.diffusion_train + self.codec_train + self.public + self.eval
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub base_width: usize,
    pub embed_dim: usize,
    pub groups: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_dropout: f64,
    pub dense_stride: usize,
    pub seed: u64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Linear,
            steps: 50,
            base_width: 16,
            embed_dim: 64,
            groups: 8,
            epochs: 10,
            batch_size: 32,
            learning_rate: 2e-3,
            cond_dropout: 0.2,
            dense_stride: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub latent_channels: usize,
    pub width: usize,
    pub groups: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub seed: u64,
    /// Channel width of the attacker's independently trained codec.
    pub alt_width: usize,
    pub alt_epochs: usize,
    /// Epochs of the brief fine-tune that produces the `finetuned` variant.
    pub finetune_epochs: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            width: 32,
            groups: 4,
            epochs: 10,
            batch_size: 32,
            learning_rate: 2e-3,
            kl_weight: 1e-4,
            seed: 0,
            alt_width: 16,
            alt_epochs: 10,
            finetune_epochs: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeySection {
    pub radii: Vec<usize>,
    pub channel: usize,
    pub seed: u64,
    pub distance: DistanceMode,
}

impl Default for KeySection {
    fn default() -> Self {
        Self { radii: vec![1, 2, 3], channel: 3, seed: 42, distance: DistanceMode::Complex }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Watermarked/clean pairs in the paired surrogate dataset.
    pub n_pairs: usize,
    /// Watermarked generations (and as many public images) in the public-mix dataset.
    pub n_public: usize,
    /// Watermarked and clean generations per seed for attack evaluation.
    pub n_eval: usize,
    /// Per-class size of the no-attack detection check.
    pub n_no_attack: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n_pairs: 150, n_public: 150, n_eval: 100, n_no_attack: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    pub width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub seed: u64,
    /// Use complex-valued weights; `false` selects the stacked real/imaginary fallback.
    pub complex: bool,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self { width: 8, depth: 1, epochs: 300, batch_size: 32, learning_rate: 1e-3, train_fraction: 0.7, seed: 0, complex: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisingSection {
    pub steps: usize,
    pub delta: f64,
    pub base_width: usize,
    pub epochs: usize,
    pub diffusion_steps: usize,
}

impl Default for NoisingSection {
    fn default() -> Self {
        Self { steps: 50, delta: 2.0, base_width: 8, epochs: 3, diffusion_steps: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub steps: usize,
    pub step_size: f64,
    pub betas: (f64, f64),
    /// Seeds for `cells`; `single_seed_cells` use the first one only.
    pub seeds: Vec<u64>,
    /// Budgets are integer intensity levels on the 0-255 scale.
    pub default_delta: f64,
    /// Level at which the latent budget equals `1 / p`.
    pub reference_delta: f64,
    pub sweep_deltas: Vec<f64>,
    pub cells: Vec<AttackCell>,
    pub single_seed_cells: Vec<AttackCell>,
    pub sweep_cells: Vec<AttackCell>,
    pub regeneration_noise: Vec<f64>,
    pub noising: NoisingSection,
}

impl Default for AttackSection {
    fn default() -> Self {
        let c = |s: &str| s.parse().expect("valid default cell");
        Self {
            steps: 200,
            step_size: 0.05,
            betas: (0.9, 0.999),
            seeds: vec![0, 1, 2],
            default_delta: 32.0,
            reference_delta: 32.0,
            sweep_deltas: vec![2.0, 4.0, 8.0, 16.0, 32.0],
            cells: vec![c("latent-pgd:public"), c("latent-pgd:paired"), c("pixel-pgd:public"), c("pixel-pgd:paired"), c("regeneration")],
            single_seed_cells: vec![
                c("latent-pgd:public:different-arch"),
                c("latent-pgd:public:finetuned"),
                c("latent-pgd:public:identity"),
                c("adversarial-noising"),
            ],
            sweep_cells: vec![c("latent-pgd:public"), c("pixel-pgd:public")],
            regeneration_noise: vec![0.25, 0.5, 1.0, 1.5, 2.0],
            noising: NoisingSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub quality_metrics: Vec<String>,
    pub target_fpr: f64,
    pub feature_net_epochs: usize,
    /// Steps at which carrier spectra are captured.
    pub spectrum_steps: Vec<usize>,
    /// Initial latents per class for the projection diagnostic.
    pub projection_samples: usize,
    pub diff_panels: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            quality_metrics: vec!["pixel-mse".into(), "psnr".into(), "feature-distance".into()],
            target_fpr: 0.01,
            feature_net_epochs: 4,
            spectrum_steps: vec![50, 40, 30, 20, 10, 0],
            projection_samples: 200,
            diff_panels: 4,
        }
    }
}

/// Pixel-space victim (no codec) for the codec ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelSpaceSection {
    pub enabled: bool,
    pub base_width: usize,
    pub epochs: usize,
    /// Carrier channel of the key in pixel space.
    pub channel: usize,
}

impl Default for PixelSpaceSection {
    fn default() -> Self {
        Self { enabled: true, base_width: 16, epochs: 10, channel: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub splits: SplitConfig,
    pub diffusion: DiffusionSection,
    pub codec: CodecSection,
    pub key: KeySection,
    pub datasets: DatasetSection,
    pub surrogate: SurrogateSection,
    pub attack: AttackSection,
    pub evaluation: EvaluationSection,
    pub pixel_space: PixelSpaceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/toy"),
            corpus: CorpusConfig::default(),
            splits: SplitConfig::default(),
            diffusion: DiffusionSection::default(),
            codec: CodecSection::default(),
            key: KeySection::default(),
            datasets: DatasetSection::default(),
            surrogate: SurrogateSection::default(),
            attack: AttackSection::default(),
            evaluation: EvaluationSection::default(),
            pixel_space: PixelSpaceSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackMethod {
    LatentPgd,
    PixelPgd,
    Regeneration,
    AdversarialNoising,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingData {
    Paired,
    Public,
}

/// One attack configuration: method, surrogate training data and the codec
/// the attacker uses (`identity` means the pixel-space victim).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttackCell {
    pub method: AttackMethod,
    pub data: TrainingData,
    pub codec: CodecVariant,
}

impl AttackCell {
    pub fn uses_surrogate(&self) -> bool {
        matches!(self.method, AttackMethod::LatentPgd | AttackMethod::PixelPgd)
    }
}

impl fmt::Display for AttackCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codec = match self.codec {
            CodecVariant::Same => "same",
            CodecVariant::Finetuned => "finetuned",
            CodecVariant::DifferentArch => "different-arch",
            CodecVariant::Identity => "identity",
        };
        match self.method {
            AttackMethod::LatentPgd => write!(f, "latent-pgd:{}:{codec}", data_name(self.data)),
            AttackMethod::PixelPgd => write!(f, "pixel-pgd:{}", data_name(self.data)),
            AttackMethod::Regeneration => write!(f, "regeneration"),
            AttackMethod::AdversarialNoising => write!(f, "adversarial-noising"),
        }
    }
}

fn data_name(d: TrainingData) -> &'static str {
    match d {
        TrainingData::Paired => "paired",
        TrainingData::Public => "public",
    }
}

impl FromStr for AttackCell {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let method = match parts[0] {
            "latent-pgd" => AttackMethod::LatentPgd,
            "pixel-pgd" => AttackMethod::PixelPgd,
            "regeneration" => AttackMethod::Regeneration,
            "adversarial-noising" => AttackMethod::AdversarialNoising,
            other => return Err(format!("unknown attack `{other}`")),
        };
        let data = match parts.get(1).copied() {
            None | Some("public") => TrainingData::Public,
            Some("paired") => TrainingData::Paired,
            Some(other) => return Err(format!("unknown training data `{other}` in `{s}`")),
        };
        let codec = match parts.get(2).copied() {
            None | Some("same") => CodecVariant::Same,
            Some("finetuned") => CodecVariant::Finetuned,
            Some("different-arch") => CodecVariant::DifferentArch,
            Some("identity") => CodecVariant::Identity,
            Some(other) => return Err(format!("unknown codec `{other}` in `{s}`")),
        };
        if parts.len() > 3 || (method != AttackMethod::LatentPgd && parts.len() > 2) {
            return Err(format!("too many fields in attack `{s}`"));
        }
        if !matches!(method, AttackMethod::LatentPgd | AttackMethod::PixelPgd) && parts.len() > 1 {
            return Err(format!("`{}` takes no surrogate options", parts[0]));
        }
        Ok(Self { method, data, codec })
    }
}

impl Serialize for AttackCell {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AttackCell {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `section.key=value` overrides (the value is parsed as TOML,
    /// falling back to a bare string).
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(&self).map_err(|e| bad(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| bad(format!("override `{o}` is not key=value")))?;
            let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut slot = &mut value;
            let keys: Vec<&str> = path.trim().split('.').collect();
            for (i, k) in keys.iter().enumerate() {
                let table = slot.as_table_mut().ok_or_else(|| bad(format!("`{path}` does not name a config field")))?;
                if i + 1 == keys.len() {
                    if !table.contains_key(*k) {
                        return Err(bad(format!("unknown config field `{path}`")));
                    }
                    table.insert((*k).to_string(), parsed.clone());
                    break;
                }
                slot = table.get_mut(*k).ok_or_else(|| bad(format!("unknown config section `{k}` in `{path}`")))?;
            }
        }
        value.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| bad(e.to_string()))
    }

    /// Hash of the resolved config, excluding the output location.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.codec.latent_channels, self.corpus.image_size / 2, self.corpus.image_size / 2)
    }

    pub fn pixel_shape(&self) -> (usize, usize, usize) {
        (3, self.corpus.image_size, self.corpus.image_size)
    }

    pub fn all_cells(&self) -> Vec<AttackCell> {
        let mut v: Vec<AttackCell> = self.attack.cells.iter().chain(&self.attack.single_seed_cells).chain(&self.attack.sweep_cells).copied().collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.source == CorpusSource::Folder && c.path.is_none() {
            return Err(bad("corpus.source = \"folder\" needs corpus.path"));
        }
        if c.image_size < 8 || c.image_size % 8 != 0 {
            return Err(bad("corpus.image_size must be a positive multiple of 8"));
        }
        let s = &self.splits;
        if s.diffusion_train == 0 || s.codec_train == 0 || s.eval == 0 {
            return Err(bad("diffusion_train, codec_train and eval splits must be non-empty"));
        }
        let d = &self.diffusion;
        if d.steps < 2 || d.epochs == 0 || d.batch_size == 0 || d.dense_stride == 0 || !(d.learning_rate > 0.0) {
            return Err(bad("diffusion steps >= 2 and positive epochs, batch size, stride and learning rate are required"));
        }
        if d.base_width == 0 || d.base_width % d.groups != 0 || d.embed_dim % 2 != 0 {
            return Err(bad("diffusion.base_width must be a positive multiple of diffusion.groups and embed_dim even"));
        }
        if !(0.0..=1.0).contains(&d.cond_dropout) {
            return Err(bad("diffusion.cond_dropout must lie in [0, 1]"));
        }
        let k = &self.codec;
        if k.latent_channels == 0 || k.width % k.groups != 0 || k.alt_width % k.groups != 0 || k.epochs == 0 || !(k.learning_rate > 0.0) {
            return Err(bad("codec widths must be multiples of codec.groups, with positive epochs and learning rate"));
        }
        if k.alt_width == k.width {
            return Err(bad("codec.alt_width must differ from codec.width"));
        }
        let key = &self.key;
        let (_, lh, lw) = self.latent_shape();
        if key.radii.is_empty() || key.radii.iter().any(|&r| r == 0 || 2 * r >= lh.min(lw)) {
            return Err(bad(format!("key radii must be in 1..{}", lh.min(lw).div_ceil(2))));
        }
        if key.channel >= k.latent_channels {
            return Err(bad(format!("key.channel {} outside the {} latent channels", key.channel, k.latent_channels)));
        }
        let ds = &self.datasets;
        if ds.n_pairs == 0 || ds.n_eval < 2 || ds.n_no_attack < 2 {
            return Err(bad("datasets need n_pairs >= 1, n_eval >= 2 and n_no_attack >= 2"));
        }
        if ds.n_public > s.public {
            return Err(bad(format!("datasets.n_public = {} exceeds the public split ({})", ds.n_public, s.public)));
        }
        let sg = &self.surrogate;
        if sg.width == 0 || sg.epochs == 0 || sg.batch_size == 0 || !(sg.learning_rate > 0.0) || !(sg.train_fraction > 0.0 && sg.train_fraction < 1.0) {
            return Err(bad("surrogate needs positive width, epochs, batch size, learning rate and a train fraction in (0, 1)"));
        }
        let a = &self.attack;
        if a.steps == 0 || !(a.step_size > 0.0) || a.seeds.is_empty() {
            return Err(bad("attack needs steps >= 1, step_size > 0 and at least one seed"));
        }
        if !(a.default_delta > 0.0) || !(a.reference_delta > 0.0) || a.sweep_deltas.iter().any(|&d| !(d > 0.0)) {
            return Err(bad("attack budgets must be positive"));
        }
        if a.regeneration_noise.iter().any(|&s| !(s >= 0.0)) {
            return Err(bad("regeneration noise levels must be non-negative"));
        }
        if self.all_cells().iter().any(|c| c.codec == CodecVariant::Identity) && !self.pixel_space.enabled {
            return Err(bad("identity-codec cells need pixel_space.enabled = true"));
        }
        if self.pixel_space.channel >= 3 {
            return Err(bad("pixel_space.channel must be 0, 1 or 2"));
        }
        if self.all_cells().iter().any(|c| c.method == AttackMethod::AdversarialNoising) {
            let n = &a.noising;
            if n.steps == 0 || n.diffusion_steps < 2 || n.epochs == 0 || n.base_width % d.groups != 0 {
                return Err(bad("attack.noising needs steps >= 1, diffusion_steps >= 2, epochs >= 1 and a width divisible by diffusion.groups"));
            }
        }
        let e = &self.evaluation;
        for m in &e.quality_metrics {
            m.parse::<QualityMetric>().map_err(|err| bad(err.to_string()))?;
        }
        if !(e.target_fpr > 0.0 && e.target_fpr < 1.0) {
            return Err(bad("evaluation.target_fpr must lie in (0, 1)"));
        }
        if e.spectrum_steps.iter().any(|&t| t > d.steps) {
            return Err(bad("evaluation.spectrum_steps must lie in 0..=diffusion.steps"));
        }
        if e.projection_samples < 10 {
            return Err(bad("evaluation.projection_samples must be at least 10"));
        }
        Ok(())
    }
}
