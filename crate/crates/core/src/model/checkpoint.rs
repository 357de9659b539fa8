//! Encoder checkpoints: a JSON manifest next to a raw parameter blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderSpec, EncoderState, LayerEntry, ParamLayout};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.f32";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub spec: EncoderSpec,
    pub step_count: u64,
    pub seed: u64,
    /// Offsets are in f32 elements into the blob.
    pub layers: Vec<LayerEntry>,
    pub param_count: usize,
    pub params_file: String,
}

/// Writes `state` into directory `dir`. Optimizer moments are not saved.
pub fn save_checkpoint(state: &EncoderState, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob: Vec<u8> = state.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    let blob_path = dir.join(PARAMS_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        spec: state.spec.clone(),
        step_count: state.step_count,
        seed: state.spec.seed,
        layers: state.layout.entries.clone(),
        param_count: state.params.len(),
        params_file: PARAMS_FILE.into(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a checkpoint directory back into an encoder with fresh optimizer
/// moments and the saved step count.
pub fn load_checkpoint(dir: &Path) -> Result<EncoderState> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            offset: 0,
            message: format!("unsupported checkpoint version {}", manifest.format_version),
        });
    }
    manifest.spec.validate()?;
    let layout = ParamLayout::for_spec(&manifest.spec);
    if layout.entries != manifest.layers || layout.total != manifest.param_count {
        return Err(Error::Format {
            path,
            offset: 0,
            message: "layer table does not match the encoder spec".into(),
        });
    }
    let blob_path = dir.join(&manifest.params_file);
    if !blob_path.exists() {
        return Err(Error::MissingArtifact(blob_path));
    }
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() != manifest.param_count * 4 {
        return Err(Error::Format {
            path: blob_path,
            offset: bytes.len() as u64,
            message: format!("expected {} bytes", manifest.param_count * 4),
        });
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut state = EncoderState::with_params(manifest.spec, params);
    state.step_count = manifest.step_count;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_encoder, InitMode};

    #[test]
    fn round_trip() {
        let spec = EncoderSpec {
            input_channels: 1,
            input_size: 8,
            conv_widths: vec![4],
            representation_dim: 4,
            projection_dim: 2,
            seed: 3,
        };
        let mut state = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
        state.step_count = 17;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.params, state.params);
        assert_eq!(back.step_count, 17);
        let fixed = init_encoder(&spec, &InitMode::FixedWeights(dir.path().to_path_buf()), None).unwrap();
        assert_eq!(fixed.params, state.params);
        assert_eq!(fixed.step_count, 0);
    }

    #[test]
    fn missing_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::MissingArtifact(_))));
        let spec = EncoderSpec {
            input_channels: 1,
            input_size: 8,
            conv_widths: vec![4],
            representation_dim: 4,
            projection_dim: 2,
            seed: 3,
        };
        let state = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
        save_checkpoint(&state, dir.path()).unwrap();
        let blob = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }
}
