use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, Vocabulary};
use crate::numerics::{Scalar, Tensor};

const MANIFEST: &str = "manifest.json";
const DATA: &str = "weights.bin";
const FORMAT: &str = "c3-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    vocabulary: Option<Vocabulary>,
    fingerprint: String,
    tensors: Vec<TensorEntry>,
}

/// Writes `dir/manifest.json` and `dir/weights.bin` (little-endian `f64`).
pub fn save_checkpoint<S: Scalar>(
    params: &ModelParams<S>,
    vocabulary: Option<&Vocabulary>,
    dir: &Path,
) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(|e| ModelError::Io(format!("{}: {e}", dir.display())))?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in params.weights.named() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        config: params.config.clone(),
        vocabulary: vocabulary.cloned(),
        fingerprint: params.fingerprint(),
        tensors,
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| ModelError::Parse(e.to_string()))?;
    write(&dir.join(DATA), &bytes)?;
    write(&dir.join(MANIFEST), json.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    fs::write(path, bytes).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint and verifies its fingerprint. When `expected_vocab`
/// is given, the stored vocabulary must match it exactly.
pub fn load_checkpoint<S: Scalar>(
    dir: &Path,
    expected_vocab: Option<&Vocabulary>,
) -> Result<(ModelParams<S>, Option<Vocabulary>), ModelError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath)
        .map_err(|e| ModelError::Io(format!("{}: {e}", mpath.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| ModelError::Parse(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT {
        return Err(ModelError::Parse(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    if let (Some(want), Some(have)) = (expected_vocab, manifest.vocabulary.as_ref()) {
        if want.digest() != have.digest() {
            return Err(ModelError::VocabMismatch(format!(
                "checkpoint vocabulary has {} entries, expected {}",
                have.len(),
                want.len()
            )));
        }
    }
    let dpath = dir.join(DATA);
    let bytes =
        fs::read(&dpath).map_err(|e| ModelError::Io(format!("{}: {e}", dpath.display())))?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::Corruption(format!(
            "{} has {} bytes",
            dpath.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut params = ModelParams::<S>::init(&manifest.config, 0)?;
    let names: Vec<String> = params.weights.named().into_iter().map(|(n, _)| n).collect();
    if names.len() != manifest.tensors.len() {
        return Err(ModelError::Corruption(format!(
            "checkpoint lists {} tensors, configuration needs {}",
            manifest.tensors.len(),
            names.len()
        )));
    }
    for ((slot, entry), name) in params
        .weights
        .leaves_mut()
        .into_iter()
        .zip(&manifest.tensors)
        .zip(&names)
    {
        if &entry.name != name || entry.shape != slot.shape() {
            return Err(ModelError::Corruption(format!(
                "tensor {} {:?} does not match expected {name} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let end = entry.offset + slot.len();
        let Some(src) = values.get(entry.offset..end) else {
            return Err(ModelError::Corruption(format!(
                "tensor {name} runs past end of data"
            )));
        };
        *slot = Tensor::new(
            entry.shape.clone(),
            src.iter().map(|&v| S::lit(v)).collect(),
        )?;
    }
    if params.fingerprint() != manifest.fingerprint {
        return Err(ModelError::Corruption(format!(
            "fingerprint mismatch in {}",
            dir.display()
        )));
    }
    Ok((params, manifest.vocabulary))
}
