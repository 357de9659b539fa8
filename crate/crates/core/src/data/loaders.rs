//! Readers and writers for the MNIST IDX and CIFAR-10 binary layouts.

use std::fs;
use std::path::Path;

use super::{Dataset, FactorSpec, Image, LabeledImage};
use crate::error::{Error, Result};

const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len(), "unexpected end of header"))
}

/// Parses an IDX file, returning its dimensions and the unsigned-byte payload.
fn read_idx(path: &Path, expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != expected_magic {
        return Err(format_err(
            path,
            0,
            format!("bad magic number {magic:#010x}, expected {expected_magic:#010x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|d| read_u32_be(&bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: need {} bytes, file has {}", header + payload, bytes.len()),
        ));
    }
    Ok((dims, bytes[header..header + payload].to_vec()))
}

/// Loads an IDX image file and its companion label file as single-channel
/// images scaled to `[0, 1]` under a `"digit"` factor.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    let (count, height, width) = (dims[0], dims[1], dims[2]);
    if ldims[0] != count {
        return Err(Error::Data(format!(
            "{count} images but {} labels",
            ldims[0]
        )));
    }
    let cardinality = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let plane = height * width;
    let images = (0..count)
        .map(|i| {
            let data = pixels[i * plane..(i + 1) * plane]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect();
            LabeledImage {
                pixels: Image {
                    channels: 1,
                    height,
                    width,
                    data,
                },
                factor_labels: vec![labels[i] as usize],
                sample_index: i,
            }
        })
        .collect();
    Ok(Dataset {
        name: "mnist".into(),
        factors: vec![FactorSpec::new("digit", cardinality)],
        images,
        seed: 0,
    })
}

/// Writes single-channel images and labels in IDX layout (pixels quantized to bytes).
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (channels, height, width) = dataset.shape();
    if channels != 1 {
        return Err(Error::Data(format!("IDX images need 1 channel, got {channels}")));
    }
    let mut img = Vec::with_capacity(16 + dataset.len() * height * width);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [dataset.len(), height, width] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for im in &dataset.images {
        img.extend(im.pixels.data.iter().map(|&v| quantize(v)));
        lab.push(im.factor_labels[0] as u8);
    }
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Loads one or more CIFAR-10 binary batch files (label byte + 3072 planar
/// RGB bytes per record) under an `"object"` factor.
pub fn load_cifar_binary(paths: &[&Path]) -> Result<Dataset> {
    let mut images = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|e| Error::io(*path, e))?;
        if bytes.is_empty() {
            return Err(format_err(path, 0, "empty file"));
        }
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
            return Err(format_err(
                path,
                offset,
                format!("truncated record: {} trailing bytes", bytes.len() % CIFAR_RECORD),
            ));
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(format_err(path, r * CIFAR_RECORD, format!("label {label} out of range")));
            }
            let data = record[1..].iter().map(|&b| b as f32 / 255.0).collect();
            let sample_index = images.len();
            images.push(LabeledImage {
                pixels: Image {
                    channels: 3,
                    height: CIFAR_SIDE,
                    width: CIFAR_SIDE,
                    data,
                },
                factor_labels: vec![label],
                sample_index,
            });
        }
    }
    Ok(Dataset {
        name: "cifar10".into(),
        factors: vec![FactorSpec::new("object", 10)],
        images,
        seed: 0,
    })
}

/// Writes 3x32x32 images in CIFAR-10 binary layout.
pub fn write_cifar_binary(dataset: &Dataset, path: &Path) -> Result<()> {
    if dataset.shape() != (3, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::Data(format!(
            "CIFAR records need 3x32x32 images, got {:?}",
            dataset.shape()
        )));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for im in &dataset.images {
        out.push(im.factor_labels[0] as u8);
        out.extend(im.pixels.data.iter().map(|&v| quantize(v)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_digits, SourceConfig};

    #[test]
    fn idx_round_trip_preserves_labels_and_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_digits(&SourceConfig { count: 12, size: 28, seed: 4 }).unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 12);
        assert_eq!(back.shape(), (1, 28, 28));
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert_eq!(a.factor_labels, b.factor_labels);
            for (x, y) in a.pixels.data.iter().zip(&b.pixels.data) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn idx_bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(&p, [0u8, 0, 8, 1, 0, 0, 0, 0]).unwrap();
        match read_idx(&p, IDX_IMAGES_MAGIC) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short");
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [2u32, 28, 28] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(&[0u8; 100]);
        assert!(matches!(read_idx(&p.with_file_name("missing"), IDX_IMAGES_MAGIC), Err(Error::Io { .. })));
        fs::write(&p, bytes).unwrap();
        match read_idx(&p, IDX_IMAGES_MAGIC) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 116),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty");
        fs::write(&p, []).unwrap();
        assert!(matches!(read_idx(&p, IDX_LABELS_MAGIC), Err(Error::Format { .. })));
        assert!(matches!(load_cifar_binary(&[&p]), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_records_parse_and_truncation_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for label in [3u8, 9] {
            bytes.push(label);
            bytes.extend((0..3072).map(|i| (i % 256) as u8));
        }
        fs::write(&p, &bytes).unwrap();
        let ds = load_cifar_binary(&[&p]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.images[1].factor_labels, vec![9]);
        assert_eq!(ds.images[0].pixels.at(0, 0, 1), 1.0 / 255.0);

        let out = dir.path().join("again.bin");
        write_cifar_binary(&ds, &out).unwrap();
        assert_eq!(fs::read(&out).unwrap(), bytes);

        bytes.extend_from_slice(&[1, 2, 3]);
        fs::write(&p, &bytes).unwrap();
        match load_cifar_binary(&[&p]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2 * 3073),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
