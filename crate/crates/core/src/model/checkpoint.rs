//! Checkpoint files: a flat little-endian `f64` blob of every named
//! parameter plus a JSON manifest holding names, shapes, precision, the
//! model config and the vocabulary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::optim::ParamSet;

use super::encoders::{Model, ModelConfig, Vocab};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KOBOCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the value stream, in values (not bytes).
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub precision: String,
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Vec<ParamEntry>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(model: &Model, precision: &str, path: &Path) -> Result<()> {
    let mut bytes = CHECKPOINT_MAGIC.to_vec();
    let mut entries = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;

    let manifest = CheckpointManifest {
        format: "kobo-checkpoint-v1".into(),
        precision: precision.into(),
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        params: entries,
    };
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointManifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(CHECKPOINT_MAGIC) || (bytes.len() - 8) % 8 != 0 {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    manifest.vocab = manifest.vocab.rebuild_index();

    let mut params = ParamSet::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let slice = values.get(entry.offset..entry.offset + n).ok_or_else(|| {
            Error::format(
                path,
                format!("parameter {} runs past end of file", entry.name),
            )
        })?;
        params.insert(
            entry.name.clone(),
            Tensor::new(entry.shape.clone(), slice.to_vec())?,
        );
    }
    if params.num_values() != values.len() {
        return Err(Error::format(
            path,
            "manifest does not cover the whole file",
        ));
    }
    let model = Model {
        config: manifest.config.clone(),
        vocab: manifest.vocab.clone(),
        params,
    };
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_model() {
        let vocab = Vocab::from_texts(["no effusion ."]);
        let cfg = ModelConfig {
            feature_dim: 3,
            hidden_dim: 4,
            embed_dim: 2,
            vocab_size: vocab.len(),
        };
        let model = Model::init(cfg, vocab, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.bin");
        save_checkpoint(&model, "double", &p).unwrap();
        let (back, manifest) = load_checkpoint(&p).unwrap();
        assert_eq!(back, model);
        assert_eq!(manifest.precision, "double");
        assert_eq!(back.vocab.id("effusion"), model.vocab.id("effusion"));
        assert!(load_checkpoint(&manifest_path(&p)).is_err());
    }
}
