//! The pipeline stages. Each stage reads upstream artifacts, writes its own
//! outputs below the run root and records them in its manifest.

mod attack;
mod evaluate;
mod generate;
mod prepare;
mod report;
mod train;

pub use attack::attack;
pub use evaluate::evaluate;
pub use generate::generate;
pub use prepare::prepare;
pub use report::report;
pub use train::{train_codec, train_diffusion, train_surrogate};

use crate::error::Result;
use crate::manifest::RunManifest;
use crate::run::{Run, Stage};

pub fn run_stage(run: &Run, stage: Stage) -> Result<RunManifest> {
    match stage {
        Stage::Prepare => prepare(run),
        Stage::TrainCodec => train_codec(run),
        Stage::TrainDiffusion => train_diffusion(run),
        Stage::Generate => generate(run),
        Stage::TrainSurrogate => train_surrogate(run),
        Stage::Attack => attack(run),
        Stage::Evaluate => evaluate(run),
        Stage::Report => report(run),
    }
}

/// Runs every stage in order.
pub fn run_all(run: &Run) -> Result<Vec<RunManifest>> {
    Stage::ALL.iter().map(|&s| run_stage(run, s)).collect()
}
