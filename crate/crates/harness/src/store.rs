//! On-disk artifacts: image tensors, PNG grids, CSV and JSON files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use ringlab_core::tensor::{Domain, SpatialTensor, DEVICE};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{HarnessError, Result};

/// Creates the parent directory of `path`.
pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(parent) => std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e)),
        None => Ok(()),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
}

/// Writes rows with a header; values are written exactly as given.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| HarnessError::Runtime(e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Runtime(e.to_string()))?;
    write_bytes(path, &bytes)
}

pub fn read_csv(path: &Path) -> Result<Vec<HashMap<String, String>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r.headers().map_err(|e| HarnessError::Runtime(e.to_string()))?.iter().map(str::to_string).collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| HarnessError::Runtime(e.to_string()))?;
        out.push(header.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
    }
    Ok(out)
}

/// Fixed-precision float formatting so reruns produce identical text.
pub fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

pub fn save_images(path: &Path, x: &SpatialTensor) -> Result<()> {
    let (n, c, h, w) = x.dims();
    let bytes: Vec<u8> = x.to_vec()?.iter().flat_map(|v| v.to_le_bytes()).collect();
    let view = TensorView::new(Dtype::F32, vec![n, c, h, w], &bytes).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let mut meta = HashMap::new();
    let domain = match x.domain() {
        Domain::Pixel => "pixel",
        Domain::Latent => "latent",
    };
    meta.insert("domain".to_string(), domain.to_string());
    let out = safetensors::serialize([("x", view)], Some(meta)).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    write_bytes(path, &out)
}

pub fn load_images(path: &Path) -> Result<SpatialTensor> {
    let buf = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let bad = |e: safetensors::SafeTensorError| HarnessError::Runtime(format!("{}: {e}", path.display()));
    let (_, meta) = SafeTensors::read_metadata(&buf).map_err(bad)?;
    let domain = match meta.metadata().as_ref().and_then(|m| m.get("domain")).map(String::as_str) {
        Some("latent") => Domain::Latent,
        _ => Domain::Pixel,
    };
    let st = SafeTensors::deserialize(&buf).map_err(bad)?;
    let view = st.tensor("x").map_err(bad)?;
    let values: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let t = Tensor::from_vec(values, view.shape(), &DEVICE).map_err(ringlab_core::Error::from)?;
    Ok(SpatialTensor::new(t, domain)?)
}

/// Tiles the first `cols * rows` images into one RGB PNG, mapping [-1, 1] to [0, 255].
/// Single-channel inputs are rendered as grey; only the first three channels are shown.
pub fn save_grid(path: &Path, x: &SpatialTensor, cols: usize) -> Result<()> {
    let (n, c, h, w) = x.dims();
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let values = x.to_vec()?;
    let pad = 1;
    let (gw, gh) = (cols * (w + pad) + pad, rows * (h + pad) + pad);
    let mut img = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([255, 255, 255]));
    for i in 0..n {
        let (ox, oy) = (pad + (i % cols) * (w + pad), pad + (i / cols) * (h + pad));
        for y in 0..h {
            for xx in 0..w {
                let px = |ch: usize| {
                    let v = values[((i * c + ch.min(c - 1)) * h + y) * w + xx];
                    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
                };
                img.put_pixel((ox + xx) as u32, (oy + y) as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    img.save(path).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
}

/// Renders a non-negative scalar map as a grey PNG scaled to its maximum.
pub fn save_heatmap(path: &Path, values: &[f64], h: usize, w: usize, zoom: usize) -> Result<()> {
    let max = values.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let zoom = zoom.max(1);
    let img = image::GrayImage::from_fn((w * zoom) as u32, (h * zoom) as u32, |x, y| {
        let v = values[(y as usize / zoom) * w + x as usize / zoom];
        image::Luma([((v / max).clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    img.save(path).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
}

/// Loads every PNG below `dir`; the label is the index of the first-level
/// subdirectory in sorted order (0 for files at the top level).
pub fn load_image_folder(dir: &Path, size: usize) -> Result<(SpatialTensor, Vec<u32>)> {
    let mut files: Vec<(PathBuf, u32)> = Vec::new();
    let entries = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(d)
            .map_err(|e| HarnessError::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let is_png = |p: &Path| p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let top = entries(dir)?;
    let mut class = 0u32;
    for p in &top {
        if p.is_dir() {
            for f in entries(p)? {
                if is_png(&f) {
                    files.push((f, class));
                }
            }
            class += 1;
        } else if is_png(p) {
            files.push((p.clone(), 0));
        }
    }
    if files.is_empty() {
        return Err(HarnessError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG images found")));
    }
    let mut values = Vec::with_capacity(files.len() * 3 * size * size);
    for (f, _) in &files {
        let img = image::open(f).map_err(|e| HarnessError::io(f, std::io::Error::other(e.to_string())))?.to_rgb8();
        let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    values.push(f32::from(img.get_pixel(x as u32, y as u32)[ch]) / 127.5 - 1.0);
                }
            }
        }
    }
    let labels = files.iter().map(|(_, l)| *l).collect();
    Ok((SpatialTensor::from_vec(values, (files.len(), 3, size, size), Domain::Pixel)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = SpatialTensor::gaussian((3, 4, 4), &[1, 2], Domain::Latent).unwrap();
        save_images(&dir.path().join("x.safetensors"), &x).unwrap();
        let y = load_images(&dir.path().join("x.safetensors")).unwrap();
        assert_eq!(y.domain(), Domain::Latent);
        assert_eq!(x.to_vec().unwrap(), y.to_vec().unwrap());
    }

    #[test]
    fn folder_loader_labels_subdirectories() {
        let dir = tempfile::tempdir().unwrap();
        for (k, name) in ["a", "b"].iter().enumerate() {
            let sub = dir.path().join(name);
            std::fs::create_dir_all(&sub).unwrap();
            let img = image::RgbImage::from_pixel(8, 8, image::Rgb([k as u8 * 200, 0, 255]));
            img.save(sub.join("0.png")).unwrap();
        }
        let (x, labels) = load_image_folder(dir.path(), 4).unwrap();
        assert_eq!(x.dims(), (2, 3, 4, 4));
        assert_eq!(labels, vec![0, 1]);
        assert!(x.max_abs().unwrap() <= 1.0);
    }

    #[test]
    fn missing_folder_is_io_error_with_path() {
        let err = load_image_folder(Path::new("/nonexistent/corpus"), 8).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/corpus"));
    }
}
