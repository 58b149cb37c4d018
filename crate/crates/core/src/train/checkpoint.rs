use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, TrainConfig};
use crate::captioning::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ReportModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_BLOB: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: TrainConfig,
    pub config_hash: String,
    pub vocabulary: Vec<String>,
    pub anatomy_labels: Vec<String>,
    pub parameters: Vec<ParamEntry>,
    pub step: u64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Hex SHA-256 of the blob.
    pub sha256: String,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: ReportModel,
    pub params: ParamStore<f32>,
}

pub fn save_checkpoint(
    dir: &Path,
    config: &TrainConfig,
    model: &ReportModel,
    params: &ParamStore<f32>,
    step: u64,
    best_epoch: usize,
    history: &[EpochRecord],
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    let mut parameters = Vec::with_capacity(params.len());
    for (_, name, t) in params.iter() {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        parameters.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() as u64 - offset,
        });
    }
    let manifest = CheckpointManifest {
        config: config.clone(),
        config_hash: config.hash(),
        vocabulary: model.vocab.tokens().to_vec(),
        anatomy_labels: model.anatomy_labels().to_vec(),
        parameters,
        step,
        best_epoch,
        history: history.to_vec(),
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    fs::write(dir.join(CHECKPOINT_BLOB), &blob)?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::CheckpointMismatch("config snapshot does not match its recorded hash".into()));
    }
    let blob = fs::read(dir.join(CHECKPOINT_BLOB))?;
    let expected: u64 = manifest.parameters.iter().map(|p| p.bytes).sum();
    if blob.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            actual: blob.len() as u64,
        });
    }
    let actual = hex::encode(Sha256::digest(&blob));
    if actual != manifest.sha256 {
        return Err(Error::Checksum {
            expected: manifest.sha256.clone(),
            actual,
        });
    }
    let vocab = Vocabulary::from_tokens(manifest.vocabulary.clone())?;
    let (model, mut params) = ReportModel::new::<f32>(
        manifest.config.model.clone(),
        vocab,
        manifest.anatomy_labels.clone(),
        manifest.config.seed,
    )?;
    if params.len() != manifest.parameters.len() {
        return Err(Error::CheckpointMismatch(format!(
            "architecture has {} parameters, checkpoint has {}",
            params.len(),
            manifest.parameters.len()
        )));
    }
    for entry in &manifest.parameters {
        let id = params
            .id(&entry.name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("unexpected parameter `{}`", entry.name)))?;
        let count: usize = entry.shape.iter().product();
        if entry.bytes != count as u64 * 4 || entry.offset + entry.bytes > blob.len() as u64 {
            return Err(Error::CheckpointMismatch(format!("bad byte span for `{}`", entry.name)));
        }
        let bytes = &blob[entry.offset as usize..(entry.offset + entry.bytes) as usize];
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params
            .set(id, Tensor::new(entry.shape.clone(), values)?)
            .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    }
    Ok(Checkpoint {
        manifest,
        model,
        params,
    })
}
