use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ContinualError, PromptBank};
use crate::numerics::Tensor;
use crate::seq2seq::{load_checkpoint, save_checkpoint, ModelError, PromptMatrix, Vocabulary};

const FORMAT: &str = "c3-bank-v1";
const BACKBONE_DIR: &str = "backbone";
const INIT_FILE: &str = "init.bin";

#[derive(Debug, Serialize, Deserialize)]
struct PromptEntry {
    task: usize,
    file: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    fingerprint: String,
    m: usize,
    d: usize,
    init_sha256: String,
    prompts: Vec<PromptEntry>,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> ContinualError + '_ {
    move |e| ContinualError::Io(format!("{}: {e}", path.display()))
}

fn to_bytes(t: &Tensor<f64>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the bank: `manifest.json`, the backbone checkpoint under
/// `backbone/`, `init.bin` and one `prompt_<i>.bin` per task.
pub fn save_bank(
    bank: &PromptBank,
    vocab: Option<&Vocabulary>,
    dir: &Path,
) -> Result<(), ContinualError> {
    bank.check_backbone()?;
    fs::create_dir_all(dir).map_err(io(dir))?;
    save_checkpoint(&bank.backbone, vocab, &dir.join(BACKBONE_DIR))?;
    let init = to_bytes(&bank.init.values);
    let path = dir.join(INIT_FILE);
    fs::write(&path, &init).map_err(io(&path))?;
    let mut prompts = Vec::new();
    for (&task, p) in &bank.prompts {
        let file = format!("prompt_{task}.bin");
        let bytes = to_bytes(&p.values);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(io(&path))?;
        prompts.push(PromptEntry {
            task,
            file,
            sha256: digest(&bytes),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        fingerprint: bank.fingerprint.clone(),
        m: bank.prompt_len(),
        d: bank.dim(),
        init_sha256: digest(&init),
        prompts,
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| ContinualError::Io(e.to_string()))?;
    let path = dir.join("manifest.json");
    fs::write(&path, json).map_err(io(&path))
}

fn read_prompt(
    path: &Path,
    task: usize,
    m: usize,
    d: usize,
    sha: &str,
) -> Result<PromptMatrix<f64>, ContinualError> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() != m * d * 8 {
        return Err(ContinualError::Corruption(format!(
            "{} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            m * d * 8
        )));
    }
    if digest(&bytes) != sha {
        return Err(ContinualError::Corruption(format!(
            "{} does not match its digest",
            path.display()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(PromptMatrix::new(task, Tensor::new(vec![m, d], values)?)?)
}

pub fn load_bank(dir: &Path, vocab: Option<&Vocabulary>) -> Result<PromptBank, ContinualError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| ContinualError::Corruption(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(ContinualError::Corruption(format!(
            "unknown bank format {:?}",
            manifest.format
        )));
    }
    let (backbone, _) =
        load_checkpoint::<f64>(&dir.join(BACKBONE_DIR), vocab).map_err(|e| match e {
            ModelError::Corruption(m) => ContinualError::Corruption(m),
            other => other.into(),
        })?;
    if backbone.fingerprint() != manifest.fingerprint {
        return Err(ContinualError::Corruption(format!(
            "backbone fingerprint {} differs from manifest {}",
            backbone.fingerprint(),
            manifest.fingerprint
        )));
    }
    if backbone.config.prompt_dim() != manifest.d {
        return Err(ContinualError::Corruption(format!(
            "prompt width {} for a d={} backbone",
            manifest.d,
            backbone.config.prompt_dim()
        )));
    }
    let (m, d) = (manifest.m, manifest.d);
    let init = read_prompt(&dir.join(INIT_FILE), 0, m, d, &manifest.init_sha256)?;
    let mut prompts = BTreeMap::new();
    for entry in &manifest.prompts {
        let p = read_prompt(&dir.join(&entry.file), entry.task, m, d, &entry.sha256)?;
        prompts.insert(entry.task, p);
    }
    Ok(PromptBank {
        fingerprint: manifest.fingerprint,
        backbone,
        init,
        prompts,
    })
}
