//! On-disk dataset format.
//!
//! Per-sample file: 16-byte magic/version header, a length-prefixed JSON
//! metadata block, then the raw tensors as little-endian f32 in declared
//! order (sketch, edge, spatial_ref, target). The directory-level
//! `manifest.json` lists every file with its SHA-256 digest and split flag.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BoundarySample, DataError, Result, SourceGeometrySpec};
use crate::tensor::Tensor;

const SAMPLE_MAGIC: &[u8; 8] = b"FGSAMPLE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSplit {
    Train,
    Heldout,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub split: SampleSplit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub sample_count: usize,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn train_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(|e| e.split == SampleSplit::Train)
    }

    pub fn heldout_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(|e| e.split == SampleSplit::Heldout)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleMeta {
    height: usize,
    width: usize,
    geometry: SourceGeometrySpec,
    seed: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Serialize a sample to bytes (the digest in the manifest covers exactly
/// these bytes).
pub fn encode_sample(sample: &BoundarySample) -> Result<Vec<u8>> {
    let meta = SampleMeta {
        height: sample.height(),
        width: sample.width(),
        geometry: sample.geometry,
        seed: sample.seed,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in [&sample.sketch, &sample.edge, &sample.spatial_ref, &sample.target] {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_sample(bytes: &[u8]) -> Result<BoundarySample> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(DataError::Corruption(format!(
                "truncated sample file: wanted {n} more bytes, have {}",
                cur.len()
            )));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };

    let magic = take(8)?;
    if magic != SAMPLE_MAGIC {
        return Err(DataError::Format("bad sample magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DataError::Format(format!(
            "sample format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    take(4)?; // reserved
    let json_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let meta: SampleMeta = serde_json::from_slice(take(json_len)?)?;
    let (h, w) = (meta.height, meta.width);

    let mut read_tensor = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = take(4 * n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data)
            .map_err(|e| DataError::Corruption(format!("tensor decode: {e}")))
    };

    let sketch = read_tensor(&[h, w])?;
    let edge = read_tensor(&[h, w])?;
    let spatial_ref = read_tensor(&[3, h, w])?;
    let target = read_tensor(&[3, h, w])?;
    if !cur.is_empty() {
        return Err(DataError::Corruption(format!(
            "{} trailing bytes after sample payload",
            cur.len()
        )));
    }
    Ok(BoundarySample { sketch, edge, spatial_ref, target, geometry: meta.geometry, seed: meta.seed })
}

/// Write a sample file and return its content digest.
pub fn write_sample(sample: &BoundarySample, path: &Path) -> Result<String> {
    let bytes = encode_sample(sample)?;
    let digest = sha256_hex(&bytes);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(digest)
}

pub fn read_sample(path: &Path) -> Result<BoundarySample> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_sample(&bytes)
}

/// Read a sample through its manifest entry, rejecting digest mismatches.
pub fn read_sample_verified(dataset_dir: &Path, entry: &ManifestEntry) -> Result<BoundarySample> {
    let path = dataset_dir.join(&entry.file);
    let mut bytes = Vec::new();
    fs::File::open(&path)?.read_to_end(&mut bytes)?;
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return Err(DataError::Corruption(format!(
            "digest mismatch for {}: manifest {} vs file {}",
            entry.file, entry.sha256, digest
        )));
    }
    decode_sample(&bytes)
}

pub fn write_manifest(manifest: &DatasetManifest, dataset_dir: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    let mut f = fs::File::create(dataset_dir.join("manifest.json"))?;
    f.write_all(&json)?;
    Ok(())
}

pub fn read_manifest(dataset_dir: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(dataset_dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::Format(format!(
            "manifest format version {}, expected {FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    if manifest.sample_count != manifest.samples.len() {
        return Err(DataError::Corruption(format!(
            "manifest count {} vs {} listed samples",
            manifest.sample_count,
            manifest.samples.len()
        )));
    }
    Ok(manifest)
}
