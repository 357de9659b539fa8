//! On-disk dataset form: `manifest.json` plus raw little-endian tensors.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, FactorSpec, Image, LabeledImage};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub count: usize,
    /// `count * channels * height * width` little-endian f32 values.
    pub pixels_file: String,
    /// `count * factors` little-endian u32 labels, row-major.
    pub labels_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub factors: Vec<FactorSpec>,
    pub count: usize,
    pub seed: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub splits: Vec<SplitEntry>,
    /// Free-form description of how the data was produced.
    #[serde(default)]
    pub generator: serde_json::Value,
}

/// Writes `dataset` as a single `train` split under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path, generator: serde_json::Value) -> Result<DatasetManifest> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (channels, height, width) = dataset.shape();
    let split = SplitEntry {
        name: "train".into(),
        count: dataset.len(),
        pixels_file: "train.f32".into(),
        labels_file: "train.labels.u32".into(),
    };

    let pixels_path = dir.join(&split.pixels_file);
    let file = fs::File::create(&pixels_path).map_err(|e| Error::io(&pixels_path, e))?;
    let mut w = BufWriter::new(file);
    for im in &dataset.images {
        for v in &im.pixels.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&pixels_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&pixels_path, e))?;

    let labels_path = dir.join(&split.labels_file);
    let mut labels = Vec::with_capacity(dataset.len() * dataset.factors.len() * 4);
    for im in &dataset.images {
        for &l in &im.factor_labels {
            labels.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        name: dataset.name.clone(),
        factors: dataset.factors.clone(),
        count: dataset.len(),
        seed: dataset.seed,
        channels,
        height,
        width,
        splits: vec![split],
        generator,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Reads a dataset directory written by [`save_dataset`], concatenating splits.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&raw)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: manifest_path,
            offset: 0,
            message: format!("unsupported format version {}", manifest.format_version),
        });
    }
    let (c, h, w) = (manifest.channels, manifest.height, manifest.width);
    let image_len = c * h * w;
    let nf = manifest.factors.len();
    let mut images = Vec::with_capacity(manifest.count);
    for split in &manifest.splits {
        let pixels_path = dir.join(&split.pixels_file);
        let bytes = fs::read(&pixels_path).map_err(|e| Error::io(&pixels_path, e))?;
        let expected = split.count * image_len * 4;
        if bytes.len() != expected {
            return Err(Error::Format {
                path: pixels_path,
                offset: bytes.len().min(expected) as u64,
                message: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        let labels_path = dir.join(&split.labels_file);
        let lbytes = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        if lbytes.len() != split.count * nf * 4 {
            return Err(Error::Format {
                path: labels_path,
                offset: lbytes.len().min(split.count * nf * 4) as u64,
                message: format!("expected {} bytes, found {}", split.count * nf * 4, lbytes.len()),
            });
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let labels: Vec<usize> = lbytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .collect();
        for i in 0..split.count {
            let sample_index = images.len();
            images.push(LabeledImage {
                pixels: Image::from_vec(c, h, w, values[i * image_len..(i + 1) * image_len].to_vec())?,
                factor_labels: labels[i * nf..(i + 1) * nf].to_vec(),
                sample_index,
            });
        }
    }
    let dataset = Dataset {
        name: manifest.name.clone(),
        factors: manifest.factors.clone(),
        images,
        seed: manifest.seed,
    };
    dataset.validate()?;
    Ok((dataset, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_trifeature, TrifeatureConfig};

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_trifeature(&TrifeatureConfig {
            shapes: 2,
            textures: 3,
            colors: 2,
            per_combo: 2,
            size: 16,
            seed: 5,
        })
        .unwrap();
        let m = save_dataset(&ds, dir.path(), serde_json::json!({"kind": "trifeature"})).unwrap();
        assert_eq!(m.count, 24);
        let (back, m2) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m, m2);
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingArtifact(_))));
    }
}
