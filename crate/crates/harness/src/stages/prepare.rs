use ringlab_core::corpus::{split_indices, synthetic_corpus, LabeledImages};

use crate::config::CorpusSource;
use crate::error::{HarnessError, Result};
use crate::manifest::RunManifest;
use crate::run::{Run, Stage, STREAM_CORPUS, STREAM_SPLIT};
use crate::store;

pub const SPLITS: [&str; 4] = ["diffusion_train", "codec_train", "public", "eval"];

/// Loads the corpus and cuts it into disjoint seeded splits. Images not
/// claimed by any split are listed as `unused`.
pub fn prepare(run: &Run) -> Result<RunManifest> {
    let cfg = &run.cfg;
    let mut rec = run.begin(Stage::Prepare)?;
    let corpus = match cfg.corpus.source {
        CorpusSource::Synthetic => {
            synthetic_corpus(cfg.splits.total(), cfg.corpus.image_size, ringlab_core::tensor::derive_seed(cfg.seed, STREAM_CORPUS))?
        }
        CorpusSource::Folder => {
            let dir = cfg.corpus.path.as_ref().ok_or_else(|| HarnessError::Config("corpus.path is required".into()))?;
            let (images, labels) = store::load_image_folder(dir, cfg.corpus.image_size)?;
            LabeledImages::new(images, labels)?
        }
    };
    let s = &cfg.splits;
    let sizes = [s.diffusion_train, s.codec_train, s.public, s.eval];
    let parts = split_indices(corpus.len(), &sizes, ringlab_core::tensor::derive_seed(cfg.seed, STREAM_SPLIT))
        .map_err(|e| HarnessError::Config(format!("corpus of {} images: {e}", corpus.len())))?;
    let mut owner = vec!["unused"; corpus.len()];
    for (name, idx) in SPLITS.iter().zip(&parts) {
        for &i in idx {
            assert_eq!(owner[i], "unused", "image {i} assigned to two splits");
            owner[i] = name;
        }
        let rel = format!("data/{name}.safetensors");
        store::save_images(&rec.path(&rel), &corpus.subset(idx)?.images)?;
        rec.add(&rel)?;
    }
    let rows: Vec<Vec<String>> = SPLITS
        .iter()
        .zip(&parts)
        .flat_map(|(name, idx)| idx.iter().map(move |&i| (name, i)))
        .map(|(name, i)| vec![i.to_string(), name.to_string(), corpus.labels[i].to_string()])
        .chain(owner.iter().enumerate().filter(|(_, o)| **o == "unused").map(|(i, _)| vec![i.to_string(), "unused".into(), corpus.labels[i].to_string()]))
        .collect();
    store::write_csv(&rec.path("data/splits.csv"), &["index", "split", "label"], &rows)?;
    rec.add("data/splits.csv")?;
    let preview = corpus.subset(&parts[0][..parts[0].len().min(32)])?;
    store::save_grid(&rec.path("data/preview.png"), &preview.images, 8)?;
    rec.add("data/preview.png")?;
    rec.finish()
}
