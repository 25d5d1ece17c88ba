//! Config-driven experiment pipeline around `ringlab-core`: corpus splits,
//! model training, generation, attacks, evaluation and reports.

pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod run;
pub mod stages;
pub mod store;

use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use run::{Run, Stage};

/// Resolves the effective config: file (or defaults), then overrides, then
/// the `--seed` and `--out` flags.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}
