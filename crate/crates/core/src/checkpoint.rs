//! Checkpoint container: a JSON manifest (configuration, vocabulary,
//! training digest, epoch, metric snapshot) followed by a named-tensor
//! archive, in one versioned little-endian file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::data::ActionVocabulary;
use crate::network::{BitConfig, BitModel, NetworkError};

const MAGIC: &[u8; 8] = b"BITCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("manifest does not match archive: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Summary metrics stored alongside the weights.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub acc: f64,
    pub edit: f64,
    pub f1_50: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: BitConfig,
    pub vocab: ActionVocabulary,
    pub train_config_digest: String,
    pub epoch: usize,
    pub metrics: MetricSnapshot,
    /// Tensor names with shapes, in archive order.
    pub tensors: Vec<(String, usize, usize)>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: BitModel,
}

/// Serialize the model parameters plus manifest.
pub fn save(
    path: &Path,
    model: &BitModel,
    vocab: &ActionVocabulary,
    train_config_digest: &str,
    epoch: usize,
    metrics: MetricSnapshot,
) -> Result<(), CheckpointError> {
    let io_err = |e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let store = model.store();
    let tensors: Vec<(String, usize, usize)> = store
        .ids()
        .map(|id| {
            let v = store.value(id);
            (store.name(id).to_string(), v.nrows(), v.ncols())
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        vocab: vocab.clone(),
        train_config_digest: train_config_digest.to_string(),
        epoch,
        metrics,
        tensors,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Format(e.to_string()))?;

    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    file.write_all(&(manifest_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&manifest_json).map_err(io_err)?;
    for id in store.ids() {
        let v = store.value(id);
        let mut bytes = Vec::with_capacity(v.len() * 8);
        for x in v.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        file.write_all(&bytes).map_err(io_err)?;
    }
    Ok(())
}

/// Load a checkpoint and rebuild the model from its embedded configuration,
/// verifying that names and shapes match the archive exactly.
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut file = fs::File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(io_err)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(io_err)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_json).map_err(io_err)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;

    let mut model = BitModel::new(manifest.config.clone(), 0)?;
    {
        let store = model.store();
        if store.len() != manifest.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "archive has {} tensors, reconstructed model has {}",
                manifest.tensors.len(),
                store.len()
            )));
        }
        for (id, (name, rows, cols)) in store.ids().zip(&manifest.tensors) {
            if store.name(id) != name {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor order mismatch: archive {name:?}, model {:?}",
                    store.name(id)
                )));
            }
            let v = store.value(id);
            if v.nrows() != *rows || v.ncols() != *cols {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor {name:?} has shape {}×{} in archive but {}×{} in model",
                    rows,
                    cols,
                    v.nrows(),
                    v.ncols()
                )));
            }
        }
    }
    for (name, rows, cols) in manifest.tensors.clone() {
        let mut bytes = vec![0u8; rows * cols * 8];
        file.read_exact(&mut bytes).map_err(io_err)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let matrix = Matrix::from_shape_vec((rows, cols), values)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        let id = model
            .store()
            .lookup(&name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {name:?}")))?;
        model.store_mut().set_value(id, matrix);
    }
    Ok(Checkpoint { manifest, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_branch::TransformerConfig;
    use crate::network::MatchingMode;

    fn config() -> BitConfig {
        BitConfig {
            num_blocks: 2,
            num_tokens: 4,
            hidden: 8,
            input_dim: 3,
            num_classes: 2,
            conv_layers: 2,
            conv_dropout: 0.0,
            dilation_base: 2,
            transformer: TransformerConfig {
                input_layers: 1,
                update_layers: 1,
                heads: 2,
                ffn_expansion: 2,
                dropout: 0.0,
            },
            downsample: vec![true],
            matching_mode: MatchingMode::OneToOne,
        }
    }

    #[test]
    fn save_load_round_trip_preserves_every_tensor() {
        let model = BitModel::new(config(), 9).unwrap();
        let vocab = ActionVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &vocab, "digest123", 7, MetricSnapshot::default()).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.manifest.epoch, 7);
        assert_eq!(loaded.manifest.train_config_digest, "digest123");
        assert_eq!(loaded.manifest.vocab, vocab);
        let a = model.store();
        let b = loaded.model.store();
        assert_eq!(a.len(), b.len());
        for (ia, ib) in a.ids().zip(b.ids()) {
            assert_eq!(a.name(ia), b.name(ib));
            assert_eq!(a.value(ia), b.value(ib));
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT________").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Format(_))));
    }
}
