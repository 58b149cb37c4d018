use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::{Example, Finding};
use crate::error::{Error, Result};
use crate::fusion::FeatureBundle;
use crate::tensor::Tensor;

pub const FEATURES_MANIFEST: &str = "features.json";
pub const FEATURES_BLOB: &str = "features.bin";
pub const REPORTS_FILE: &str = "reports.jsonl";

/// Describes a blob of `count` bundles, each `(N + 2) × d` little-endian
/// f32 values: the `N` region rows, then frontal, then lateral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub count: usize,
    pub n_regions: usize,
    pub dim: usize,
    pub anatomy_labels: Vec<String>,
    pub ids: Vec<String>,
    /// Byte offset of each bundle in the blob.
    pub offsets: Vec<u64>,
    /// Hex SHA-256 of the blob.
    pub sha256: String,
}

impl FeatureManifest {
    pub fn bundle_bytes(&self) -> u64 {
        ((self.n_regions + 2) * self.dim * 4) as u64
    }

    pub fn blob_bytes(&self) -> u64 {
        self.count as u64 * self.bundle_bytes()
    }
}

pub fn write_features(
    manifest_path: &Path,
    blob_path: &Path,
    ids: &[String],
    bundles: &[FeatureBundle<f32>],
) -> Result<FeatureManifest> {
    if ids.len() != bundles.len() {
        return Err(Error::Data(format!("{} ids for {} bundles", ids.len(), bundles.len())));
    }
    let first = bundles.first().ok_or(Error::EmptyCorpus)?;
    let (n, d) = (first.n_regions(), first.dim());
    let mut blob = Vec::with_capacity(bundles.len() * (n + 2) * d * 4);
    let mut offsets = Vec::with_capacity(bundles.len());
    for (id, b) in ids.iter().zip(bundles) {
        if b.n_regions() != n || b.dim() != d || b.anatomy_labels != first.anatomy_labels {
            return Err(Error::Data(format!("bundle `{id}` does not share the layout of the first bundle")));
        }
        offsets.push(blob.len() as u64);
        for v in b.regions.data().iter().chain(b.frontal.data()).chain(b.lateral.data()) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = FeatureManifest {
        count: bundles.len(),
        n_regions: n,
        dim: d,
        anatomy_labels: first.anatomy_labels.clone(),
        ids: ids.to_vec(),
        offsets,
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    fs::write(blob_path, &blob)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads and verifies a feature blob, returning the bundles in manifest order.
pub fn load_features(manifest_path: &Path, blob_path: &Path) -> Result<(FeatureManifest, Vec<FeatureBundle<f32>>)> {
    let manifest: FeatureManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.anatomy_labels.len() != manifest.n_regions {
        return Err(Error::Data(format!(
            "manifest lists {} anatomy labels for {} regions",
            manifest.anatomy_labels.len(),
            manifest.n_regions
        )));
    }
    if manifest.ids.len() != manifest.count || manifest.offsets.len() != manifest.count {
        return Err(Error::Data(format!(
            "manifest count {} disagrees with {} ids and {} offsets",
            manifest.count,
            manifest.ids.len(),
            manifest.offsets.len()
        )));
    }
    let blob = fs::read(blob_path)?;
    if blob.len() as u64 != manifest.blob_bytes() {
        return Err(Error::Truncated {
            expected: manifest.blob_bytes(),
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
    let (n, d) = (manifest.n_regions, manifest.dim);
    let step = manifest.bundle_bytes();
    let mut bundles = Vec::with_capacity(manifest.count);
    for (i, &offset) in manifest.offsets.iter().enumerate() {
        if offset != i as u64 * step {
            return Err(Error::Data(format!("bundle {i} has offset {offset}, expected {}", i as u64 * step)));
        }
        let bytes = &blob[offset as usize..(offset + step) as usize];
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        bundles.push(FeatureBundle::new(
            Tensor::new(vec![n, d], values[..n * d].to_vec())?,
            Tensor::row_vector(values[n * d..(n + 1) * d].to_vec()),
            Tensor::row_vector(values[(n + 1) * d..].to_vec()),
            manifest.anatomy_labels.clone(),
        )?);
    }
    Ok((manifest, bundles))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: String,
    pub report: String,
    #[serde(default)]
    pub latent: Vec<Finding>,
}

pub fn write_reports(path: &Path, records: &[ReportRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<ReportRecord>> {
    let mut records = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// Writes features and reports for `examples` into `dir`.
pub fn save_dataset(dir: &Path, examples: &[Example]) -> Result<FeatureManifest> {
    fs::create_dir_all(dir)?;
    let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
    let bundles: Vec<_> = examples.iter().map(|e| e.bundle.clone()).collect();
    let manifest = write_features(&dir.join(FEATURES_MANIFEST), &dir.join(FEATURES_BLOB), &ids, &bundles)?;
    let records: Vec<ReportRecord> = examples
        .iter()
        .map(|e| ReportRecord {
            id: e.id.clone(),
            report: e.report.clone(),
            latent: e.latent.clone(),
        })
        .collect();
    write_reports(&dir.join(REPORTS_FILE), &records)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Example>> {
    let (manifest, bundles) = load_features(&dir.join(FEATURES_MANIFEST), &dir.join(FEATURES_BLOB))?;
    let mut reports: std::collections::HashMap<String, ReportRecord> = read_reports(&dir.join(REPORTS_FILE))?
        .into_iter()
        .map(|r| (r.id.clone(), r))
        .collect();
    manifest
        .ids
        .into_iter()
        .zip(bundles)
        .map(|(id, bundle)| {
            let r = reports
                .remove(&id)
                .ok_or_else(|| Error::Data(format!("no report for example `{id}`")))?;
            Ok(Example {
                id,
                bundle,
                report: r.report,
                latent: r.latent,
            })
        })
        .collect()
}
