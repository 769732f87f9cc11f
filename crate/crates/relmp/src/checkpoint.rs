//! Checkpoint serialization: a JSON manifest (config, tensor names/shapes,
//! epoch, validation MRR, path vocabulary, relation names) next to one
//! little-endian 32-bit-float binary blob per tensor.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::RelationId;
use crate::model::ModelConfig;
use crate::params::ParameterStore;
use crate::paths::PathVocabulary;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    pub valid_mrr: Option<f64>,
    pub param_count: usize,
    pub tensors: Vec<TensorInfo>,
    pub vocabulary: Vec<Vec<RelationId>>,
    pub relations: Vec<String>,
}

/// A checkpoint loaded back into memory.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub store: ParameterStore,
    pub vocab: PathVocabulary,
}

fn tensor_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join("tensors").join(format!("{name}.bin"))
}

/// Write `store` under `dir` (created if needed).
pub fn save(
    dir: &Path,
    store: &ParameterStore,
    config: &ModelConfig,
    vocab: &PathVocabulary,
    relations: &[String],
    epoch: usize,
    valid_mrr: Option<f64>,
) -> Result<()> {
    fs::create_dir_all(dir.join("tensors")).map_err(|e| Error::io(dir, e))?;
    let tensors: Vec<TensorInfo> = store
        .tensors()
        .iter()
        .map(|t| TensorInfo {
            name: t.name.clone(),
            rows: t.rows,
            cols: t.cols,
        })
        .collect();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        epoch,
        valid_mrr,
        param_count: store.param_count(),
        tensors,
        vocabulary: vocab.paths().to_vec(),
        relations: relations.to_vec(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json).map_err(|e| Error::io(dir, e))?;

    for t in store.tensors() {
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for &x in &t.data {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let path = tensor_file(dir, &t.name);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Load a checkpoint directory.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let vocab = PathVocabulary::from_sorted(manifest.vocabulary.clone());

    // Materialize a store of the right shape, then overwrite tensor data.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut store = manifest.config.init_params(vocab.len(), &mut rng)?;
    {
        let mut tensors = store.tensors_mut();
        if tensors.len() != manifest.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "tensor count mismatch: manifest lists {}, config implies {}",
                manifest.tensors.len(),
                tensors.len()
            )));
        }
        for (tensor, info) in tensors.iter_mut().zip(&manifest.tensors) {
            if tensor.name != info.name || tensor.rows != info.rows || tensor.cols != info.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` ({}x{}) does not match manifest entry `{}` ({}x{})",
                    tensor.name, tensor.rows, tensor.cols, info.name, info.rows, info.cols
                )));
            }
            let path = tensor_file(dir, &info.name);
            let mut bytes = Vec::new();
            fs::File::open(&path)
                .map_err(|e| Error::io(&path, e))?
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(&path, e))?;
            if bytes.len() != info.rows * info.cols * 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor blob `{}` has {} bytes, expected {}",
                    info.name,
                    bytes.len(),
                    info.rows * info.cols * 4
                )));
            }
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                tensor.data[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            tensor.reset_state();
        }
    }
    Ok(Checkpoint {
        manifest,
        store,
        vocab,
    })
}

/// Hex-encoded SHA-256 of arbitrary bytes (used for config hashes).
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

use rand::SeedableRng;
