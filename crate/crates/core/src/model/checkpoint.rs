//! Checkpoints: a JSON manifest plus a flat little-endian f32 file holding the
//! parameters followed by the momentum buffers. Tensor offsets in the manifest
//! count f32 elements from the start of that file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchDescriptor, Classifier, Network, Sgd, SgdConfig, TrainState};
use crate::error::{Error, Result};
use crate::rng::StreamState;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: ArchDescriptor,
    pub epoch: usize,
    #[serde(default)]
    pub stage: Option<usize>,
    #[serde(default)]
    pub label: Option<String>,
    pub optimizer: SgdConfig,
    pub rng: StreamState,
    pub tensors: Vec<TensorRecord>,
    pub param_file: String,
    pub param_checksum: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub state: TrainState,
}

impl Checkpoint {
    /// Write `path` (manifest) and a sibling `.f32` parameter file.
    pub fn write(
        state: &TrainState,
        path: impl AsRef<Path>,
        stage: Option<usize>,
        label: Option<&str>,
    ) -> Result<CheckpointManifest> {
        let path = path.as_ref();
        let params = state.model.params();
        let total = params.len();
        let mut tensors: Vec<TensorRecord> = params
            .entries()
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                offset: e.offset,
                shape: e.shape.clone(),
            })
            .collect();
        tensors.extend(params.entries().iter().map(|e| TensorRecord {
            name: format!("momentum/{}", e.name),
            offset: total + e.offset,
            shape: e.shape.clone(),
        }));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        let param_file = format!("{stem}.f32");
        let manifest = CheckpointManifest {
            architecture: state.model.descriptor().clone(),
            epoch: state.epoch,
            stage,
            label: label.map(String::from),
            optimizer: state.optimizer.config,
            rng: StreamState::capture(&state.rng),
            tensors,
            param_file: param_file.clone(),
            param_checksum: params.checksum(),
        };
        let mut bytes = Vec::with_capacity(total * 8);
        for v in params.data().iter().chain(&state.optimizer.buffer) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let bin = dir.join(&param_file);
        fs::write(&bin, bytes).map_err(|e| Error::file(&bin, e))?;
        fs::write(path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::file(path, e))?;
        Ok(manifest)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut model: Network<f32> = Network::zeroed(manifest.architecture.clone())?;
        let total = model.params().len();
        let dir = path.parent().unwrap_or(Path::new("."));
        let bin = dir.join(&manifest.param_file);
        let bytes = fs::read(&bin).map_err(|e| Error::file(&bin, e))?;
        if bytes.len() != total * 8 {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} bytes, architecture needs {}",
                bin.display(),
                bytes.len(),
                total * 8
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut buffer = vec![0.0; total];
        let entries = model.params().entries().to_vec();
        for e in &entries {
            for (prefix, base) in [("", 0), ("momentum/", total)] {
                let name = format!("{prefix}{}", e.name);
                let rec = manifest
                    .tensors
                    .iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks tensor `{name}`")))?;
                if rec.shape != e.shape || rec.offset + e.len() > values.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor `{name}` has shape {:?}, architecture expects {:?}",
                        rec.shape, e.shape
                    )));
                }
                let src = &values[rec.offset..rec.offset + e.len()];
                if base == 0 {
                    model.params_mut().data_mut()[e.offset..e.offset + e.len()].copy_from_slice(src);
                } else {
                    buffer[e.offset..e.offset + e.len()].copy_from_slice(src);
                }
            }
        }
        let state = TrainState {
            model,
            optimizer: Sgd {
                config: manifest.optimizer,
                buffer,
            },
            epoch: manifest.epoch,
            rng: manifest.rng.restore(),
        };
        if state.model.params().checksum() != manifest.param_checksum {
            return Err(Error::invalid(format!(
                "{}: parameter checksum mismatch",
                path.display()
            )));
        }
        Ok(Checkpoint { manifest, state })
    }
}
