//! Self-describing model container: safetensors payload plus JSON metadata.
//!
//! Header keys: `format` (always `ringlab`), `version`, `kind` (which model
//! family the parameters belong to) and `meta` (model-specific JSON).

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT: &str = "ringlab";
pub const VERSION: &str = "1";

pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }
}

pub fn to_bytes(kind: &str, meta: &impl Serialize, store: &ParamStore) -> Result<Vec<u8>> {
    let exported = store.export()?;
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = exported
        .into_iter()
        .map(|(n, s, v)| (n, s, v.iter().flat_map(|x| x.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F32, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut header = HashMap::new();
    header.insert("format".to_string(), FORMAT.to_string());
    header.insert("version".to_string(), VERSION.to_string());
    header.insert("kind".to_string(), kind.to_string());
    header.insert("meta".to_string(), serde_json::to_string(meta)?);
    safetensors::serialize(views, Some(header)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
    let (_, metadata) = SafeTensors::read_metadata(buf).map_err(bad)?;
    let header = metadata.metadata().clone().unwrap_or_default();
    if header.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Checkpoint("not a ringlab checkpoint".into()));
    }
    if header.get("version").map(String::as_str) != Some(VERSION) {
        return Err(Error::Checkpoint(format!("unsupported version {:?}", header.get("version"))));
    }
    let kind = header.get("kind").cloned().unwrap_or_default();
    let meta = serde_json::from_str(header.get("meta").map(String::as_str).unwrap_or("null"))?;
    let st = SafeTensors::deserialize(buf).map_err(bad)?;
    let mut tensors = Vec::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32")));
        }
        let values = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, view.shape().to_vec(), values));
    }
    Ok(Checkpoint { kind, meta, tensors })
}

/// Writes the container and returns the SHA-256 of the written bytes.
pub fn save(path: &Path, kind: &str, meta: &impl Serialize, store: &ParamStore) -> Result<String> {
    let bytes = to_bytes(kind, meta, store)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path, expected_kind: &str) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = from_bytes(&buf)?;
    if ck.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} checkpoint, expected {expected_kind}",
            path.display(),
            ck.kind
        )));
    }
    Ok(ck)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn round_trip_preserves_parameters_and_meta() {
        let mut store = ParamStore::new(3);
        Linear::new(&mut store, "fc", 5, 2).unwrap();
        let bytes = to_bytes("probe", &serde_json::json!({"seed": 3}), &store).unwrap();
        let ck = from_bytes(&bytes).unwrap();
        assert_eq!(ck.kind, "probe");
        assert_eq!(ck.meta["seed"], 3);
        let mut other = ParamStore::new(99);
        Linear::new(&mut other, "fc", 5, 2).unwrap();
        other.import(&ck.tensors).unwrap();
        assert_eq!(other.digest().unwrap(), store.digest().unwrap());
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(from_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn load_checks_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut store = ParamStore::new(0);
        Linear::new(&mut store, "fc", 2, 2).unwrap();
        save(&path, "codec", &serde_json::json!({}), &store).unwrap();
        assert!(load(&path, "codec").is_ok());
        assert!(matches!(load(&path, "denoiser"), Err(Error::Checkpoint(_))));
    }
}
