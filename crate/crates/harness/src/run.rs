//! Shared state of a pipeline run: resolved config, output root, stage
//! bookkeeping and loaders for upstream artifacts.

use std::path::{Path, PathBuf};

use ringlab_core::codec::{Codec, CodecVariant};
use ringlab_core::corpus::LabeledImages;
use ringlab_core::diffusion::{Condition, Denoiser};
use ringlab_core::surrogate::SurrogateModel;
use ringlab_core::tensor::{derive_seed, SpatialTensor};
use ringlab_core::watermark::FrequencyKey;

use crate::config::{AttackCell, AttackMethod, ExperimentConfig, TrainingData};
use crate::error::{HarnessError, Result};
use crate::manifest::{self, Recorder, RunManifest};
use crate::store;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    TrainCodec,
    TrainDiffusion,
    Generate,
    TrainSurrogate,
    Attack,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Prepare,
        Stage::TrainCodec,
        Stage::TrainDiffusion,
        Stage::Generate,
        Stage::TrainSurrogate,
        Stage::Attack,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainCodec => "train-codec",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::Generate => "generate",
            Stage::TrainSurrogate => "train-surrogate",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// The command line that runs this stage.
    pub fn command(self) -> String {
        format!("ringlab {}", self.id().replace('-', " "))
    }
}

// Seed streams; each artifact family draws from its own stream.
pub const STREAM_CORPUS: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_PAIRED: u64 = 3;
pub const STREAM_PUBLIC: u64 = 4;
pub const STREAM_EVAL: u64 = 5;
pub const STREAM_NO_ATTACK: u64 = 6;
pub const STREAM_ATTACK: u64 = 7;
pub const STREAM_DIAGNOSTIC: u64 = 8;
pub const STREAM_PIXEL: u64 = 9;

pub struct Run {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    hash: String,
}

/// Where the victim lives: latent diffusion behind a codec, or the
/// pixel-space model of the codec ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Latent,
    Pixel,
}

impl Space {
    pub fn dir(self) -> &'static str {
        match self {
            Space::Latent => "gen",
            Space::Pixel => "gen/pixel",
        }
    }
}

/// One attacked image set: a cell, its strength parameter and a seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackJob {
    pub cell: AttackCell,
    /// Budget level for gradient attacks, noise std for regeneration.
    pub param: f64,
    pub seed: u64,
}

impl AttackJob {
    pub fn space(&self) -> Space {
        if self.cell.codec == CodecVariant::Identity {
            Space::Pixel
        } else {
            Space::Latent
        }
    }

    pub fn rel_path(&self) -> String {
        format!("attacks/{}/p{}/s{}.safetensors", cell_slug(&self.cell), param_label(self.param), self.seed)
    }
}

pub fn cell_slug(cell: &AttackCell) -> String {
    cell.to_string().replace(':', "_")
}

pub fn param_label(v: f64) -> String {
    let s = format!("{v}");
    s.replace('.', "_")
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        let root = cfg.output_dir.clone();
        Ok(Self { cfg, root, hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Clears the previous outputs of `stage` and records the resolved config.
    pub fn begin(&self, stage: Stage) -> Result<Recorder> {
        let mp = manifest::manifest_path(&self.root, stage.id());
        if mp.exists() {
            let old: RunManifest = store::read_json(&mp)?;
            for f in &old.files {
                let p = self.root.join(&f.path);
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| HarnessError::io(&p, e))?;
                }
            }
        }
        let mut rec = Recorder::start(&self.root, stage.id(), &self.hash, self.cfg.attack.seeds.clone());
        let rel = format!("config/{}.toml", stage.id());
        store::write_bytes(&rec.path(&rel), self.cfg.to_toml()?.as_bytes())?;
        rec.add(&rel)?;
        log::info!("{}: started", stage.id());
        Ok(rec)
    }

    /// Path of an upstream artifact, or the error naming the stage that makes it.
    pub fn require(&self, rel: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(HarnessError::MissingUpstream { stage: producer.command(), path: p })
        }
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.load_split("diffusion_train")?.num_classes().max(1))
    }

    pub fn load_split(&self, name: &str) -> Result<LabeledImages> {
        let images = store::load_images(&self.require(&format!("data/{name}.safetensors"), Stage::Prepare)?)?;
        let rows = store::read_csv(&self.require("data/splits.csv", Stage::Prepare)?)?;
        let labels: Vec<u32> = rows
            .iter()
            .filter(|r| r.get("split").map(String::as_str) == Some(name))
            .map(|r| r["label"].parse().map_err(|_| HarnessError::Runtime("bad label in data/splits.csv".into())))
            .collect::<Result<_>>()?;
        Ok(LabeledImages::new(images, labels)?)
    }

    pub fn codec_rel(variant: CodecVariant) -> &'static str {
        match variant {
            CodecVariant::Same => "models/codec.safetensors",
            CodecVariant::Finetuned => "models/codec-finetuned.safetensors",
            CodecVariant::DifferentArch => "models/codec-different-arch.safetensors",
            CodecVariant::Identity => "",
        }
    }

    /// The victim's codec, or the attacker's variant of it.
    pub fn load_codec(&self, variant: CodecVariant) -> Result<Codec> {
        match variant {
            CodecVariant::Identity => Ok(Codec::identity(self.pixel_space_shape())),
            v => Ok(Codec::load(&self.require(Self::codec_rel(v), Stage::TrainCodec)?)?),
        }
    }

    /// Image shape of the pixel-space victim (half the corpus resolution).
    pub fn pixel_space_shape(&self) -> (usize, usize, usize) {
        let s = self.cfg.corpus.image_size / 2;
        (3, s, s)
    }

    pub fn victim_codec(&self, space: Space) -> Result<Codec> {
        match space {
            Space::Latent => self.load_codec(CodecVariant::Same),
            Space::Pixel => Ok(Codec::identity(self.pixel_space_shape())),
        }
    }

    pub fn denoiser_rel(space: Space) -> &'static str {
        match space {
            Space::Latent => "models/denoiser.safetensors",
            Space::Pixel => "models/pixel-denoiser.safetensors",
        }
    }

    pub fn load_denoiser(&self, space: Space) -> Result<Denoiser> {
        Ok(Denoiser::load(&self.require(Self::denoiser_rel(space), Stage::TrainDiffusion)?)?)
    }

    pub fn load_key(&self, space: Space) -> Result<FrequencyKey> {
        Ok(FrequencyKey::load(&self.require(&format!("{}/key.json", space.dir()), Stage::Generate)?)?)
    }

    pub fn load_generated(&self, space: Space, name: &str) -> Result<SpatialTensor> {
        store::load_images(&self.require(&format!("{}/{name}.safetensors", space.dir()), Stage::Generate)?)
    }

    pub fn surrogate_rel(name: &str) -> String {
        format!("models/surrogate-{name}.safetensors")
    }

    pub fn load_surrogate(&self, name: &str) -> Result<SurrogateModel> {
        Ok(SurrogateModel::load(&self.require(&Self::surrogate_rel(name), Stage::TrainSurrogate)?)?)
    }

    pub fn load_attacked(&self, job: &AttackJob) -> Result<SpatialTensor> {
        store::load_images(&self.require(&job.rel_path(), Stage::Attack)?)
    }

    /// Seed for item `i` of stream `stream`.
    pub fn seed_for(&self, stream: u64, i: u64) -> u64 {
        derive_seed(derive_seed(self.cfg.seed, stream), i)
    }

    pub fn seeds(&self, stream: u64, offset: u64, n: usize) -> Vec<u64> {
        (0..n as u64).map(|i| self.seed_for(stream, offset + i)).collect()
    }

    pub fn conditions(&self, n: usize, classes: usize) -> Vec<Condition> {
        (0..n).map(|i| Condition::Class((i % classes) as u32)).collect()
    }

    pub fn first_seed(&self) -> u64 {
        self.cfg.attack.seeds[0]
    }

    /// Every attacked set the config asks for, in a fixed order.
    pub fn attack_jobs(&self) -> Vec<AttackJob> {
        let a = &self.cfg.attack;
        let mut jobs = Vec::new();
        let mut push = |cell: AttackCell, seeds: &[u64], deltas: &[f64]| {
            let params: Vec<f64> = match cell.method {
                AttackMethod::Regeneration => a.regeneration_noise.clone(),
                AttackMethod::AdversarialNoising => vec![a.noising.delta],
                _ => deltas.to_vec(),
            };
            for &p in &params {
                for &s in seeds {
                    let job = AttackJob { cell, param: p, seed: s };
                    if !jobs.contains(&job) {
                        jobs.push(job);
                    }
                }
            }
        };
        let first = [a.seeds[0]];
        for &c in &a.cells {
            push(c, &a.seeds, &[a.default_delta]);
        }
        for &c in &a.single_seed_cells {
            push(c, &first, &[a.default_delta]);
        }
        for &c in &a.sweep_cells {
            push(c, &first, &a.sweep_deltas);
        }
        jobs
    }

    /// Seeds whose evaluation sets are needed in `space`.
    pub fn eval_seeds(&self, space: Space) -> Vec<u64> {
        let mut v: Vec<u64> = match space {
            Space::Latent => self.cfg.attack.seeds.clone(),
            Space::Pixel => self.attack_jobs().iter().filter(|j| j.space() == Space::Pixel).map(|j| j.seed).collect(),
        };
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn pixel_space_needed(&self) -> bool {
        self.cfg.pixel_space.enabled && self.attack_jobs().iter().any(|j| j.space() == Space::Pixel)
    }

    /// Surrogates needed by the attack cells, by name.
    pub fn surrogate_specs(&self) -> Vec<SurrogateSpec> {
        let mut v: Vec<SurrogateSpec> = self
            .cfg
            .all_cells()
            .iter()
            .filter(|c| c.uses_surrogate())
            .map(|c| SurrogateSpec::for_cell(c))
            .collect();
        v.sort_by(|a, b| a.name().cmp(&b.name()));
        v.dedup_by(|a, b| a.name() == b.name());
        v
    }

    pub fn noising_needed(&self) -> bool {
        self.cfg.all_cells().iter().any(|c| c.method == AttackMethod::AdversarialNoising)
    }
}

/// A surrogate detector the attacker trains: input kind, data and codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurrogateSpec {
    pub pixel: bool,
    pub data: TrainingData,
    pub codec: CodecVariant,
}

impl SurrogateSpec {
    pub fn for_cell(cell: &AttackCell) -> Self {
        let pixel = cell.method == AttackMethod::PixelPgd;
        Self { pixel, data: cell.data, codec: if pixel { CodecVariant::Same } else { cell.codec } }
    }

    pub fn name(&self) -> String {
        let data = match self.data {
            TrainingData::Paired => "paired",
            TrainingData::Public => "public",
        };
        if self.pixel {
            return format!("pixel-{data}");
        }
        let codec = match self.codec {
            CodecVariant::Same => "same",
            CodecVariant::Finetuned => "finetuned",
            CodecVariant::DifferentArch => "different-arch",
            CodecVariant::Identity => "identity",
        };
        format!("spectrum-{data}-{codec}")
    }

    pub fn space(&self) -> Space {
        if self.codec == CodecVariant::Identity {
            Space::Pixel
        } else {
            Space::Latent
        }
    }
}

pub fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}
