//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.json` plus one binary blob per
//! modality and a labels blob. Blobs are little-endian f32 with a fixed
//! 8-field u32 header: magic, version, count, T, d, element width, endian
//! flag (1 = little), reserved. The manifest records shapes, per-sample
//! lengths, the 70/15/15 split indices, SHA-256 checksums of each blob,
//! and an echo of the generating spec.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::numcore::{rng_from_seed, Scalar, Tensor};
use crate::{Error, Result};

use super::synth::{synthesize, SyntheticData, SyntheticSpec};
use super::{ModalityBatch, Modality, Split};

/// Blob header magic; reads as the bytes "FINE" on disk.
pub const BLOB_MAGIC: u32 = u32::from_le_bytes(*b"FINE");
const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestModality {
    pub t: usize,
    pub d: usize,
    pub file: String,
    pub sha256: String,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestLabels {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_samples: usize,
    pub label_min: f64,
    pub label_max: f64,
    pub modalities: HashMap<String, ManifestModality>,
    pub labels: ManifestLabels,
    pub split: HashMap<String, Vec<usize>>,
    pub spec: SyntheticSpec,
}

fn encode_blob(count: usize, t: usize, d: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(values.len(), count * t * d);
    let header: [u32; 8] = [
        BLOB_MAGIC,
        BLOB_VERSION,
        count as u32,
        t as u32,
        d as u32,
        4,
        1,
        0,
    ];
    let mut bytes = Vec::with_capacity(32 + values.len() * 4);
    for h in header {
        bytes.extend_from_slice(&h.to_le_bytes());
    }
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode_blob(bytes: &[u8], what: &str) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < 32 {
        return Err(Error::CorruptDataset(format!("{what}: truncated header")));
    }
    let mut header = [0u32; 8];
    for (i, h) in header.iter_mut().enumerate() {
        *h = u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    }
    if header[0] != BLOB_MAGIC || header[1] != BLOB_VERSION {
        return Err(Error::CorruptDataset(format!("{what}: bad magic/version")));
    }
    if header[5] != 4 || header[6] != 1 {
        return Err(Error::CorruptDataset(format!(
            "{what}: unsupported element width or endianness"
        )));
    }
    let (count, t, d) = (header[2] as usize, header[3] as usize, header[4] as usize);
    let expect = 32 + count * t * d * 4;
    if bytes.len() != expect {
        return Err(Error::CorruptDataset(format!(
            "{what}: {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let values = bytes[32..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((count, t, d, values))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generate a dataset from `spec` and write it under `out`.
pub fn generate(spec: &SyntheticSpec, out: &Path) -> Result<Manifest> {
    let data = synthesize(spec)?;
    write_dataset(&data, out)
}

fn write_dataset(data: &SyntheticData, out: &Path) -> Result<Manifest> {
    fs::create_dir_all(out)?;
    let spec = &data.spec;
    let shapes = spec.shapes();

    let mut modalities = HashMap::new();
    for m in Modality::ALL {
        let idx = m.index();
        let shape = shapes[idx];
        let values: Vec<f32> = data.feats[idx].iter().map(|&v| v as f32).collect();
        let bytes = encode_blob(spec.n_samples, shape.t, shape.d, &values);
        let file = format!("{}.bin", m.name());
        fs::write(out.join(&file), &bytes)?;
        modalities.insert(
            m.name().to_string(),
            ManifestModality {
                t: shape.t,
                d: shape.d,
                file,
                sha256: sha256_hex(&bytes),
                lengths: data.lens[idx].clone(),
            },
        );
    }

    let label_values: Vec<f32> = data.labels.iter().map(|&v| v as f32).collect();
    let label_bytes = encode_blob(spec.n_samples, 1, 1, &label_values);
    fs::write(out.join("labels.bin"), &label_bytes)?;

    let mut split = HashMap::new();
    for (s, idxs) in [Split::Train, Split::Val, Split::Test].iter().zip(&data.split) {
        split.insert(s.name().to_string(), idxs.clone());
    }

    let manifest = Manifest {
        version: 1,
        n_samples: spec.n_samples,
        label_min: spec.label_min,
        label_max: spec.label_max,
        modalities,
        labels: ManifestLabels {
            file: "labels.bin".into(),
            sha256: sha256_hex(&label_bytes),
        },
        split,
        spec: spec.clone(),
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// A fully loaded, checksum-verified dataset.
pub struct Dataset {
    pub manifest: Manifest,
    /// Per modality: flat n x T x d values.
    pub feats: [Vec<f32>; 3],
    pub lens: [Vec<usize>; 3],
    pub labels: Vec<f32>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_bytes = fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut feats: [Vec<f32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut lens: [Vec<usize>; 3] = Default::default();
    for m in Modality::ALL {
        let entry = manifest
            .modalities
            .get(m.name())
            .ok_or_else(|| Error::CorruptDataset(format!("manifest missing {}", m.name())))?;
        let bytes = fs::read(dir.join(&entry.file))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::CorruptDataset(format!(
                "checksum mismatch for {}",
                entry.file
            )));
        }
        let (count, t, d, values) = decode_blob(&bytes, &entry.file)?;
        if count != manifest.n_samples || t != entry.t || d != entry.d {
            return Err(Error::CorruptDataset(format!(
                "{}: header disagrees with manifest",
                entry.file
            )));
        }
        if entry.lengths.len() != count || entry.lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::CorruptDataset(format!(
                "{}: invalid lengths",
                entry.file
            )));
        }
        feats[m.index()] = values;
        lens[m.index()] = entry.lengths.clone();
    }

    let label_bytes = fs::read(dir.join(&manifest.labels.file))?;
    if sha256_hex(&label_bytes) != manifest.labels.sha256 {
        return Err(Error::CorruptDataset("checksum mismatch for labels".into()));
    }
    let (count, _, _, labels) = decode_blob(&label_bytes, "labels")?;
    if count != manifest.n_samples {
        return Err(Error::CorruptDataset("labels count mismatch".into()));
    }

    for s in ["train", "val", "test"] {
        if !manifest.split.contains_key(s) {
            return Err(Error::CorruptDataset(format!("manifest missing split {s}")));
        }
    }

    Ok(Dataset {
        manifest,
        feats,
        lens,
        labels,
    })
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> &[usize] {
        &self.manifest.split[split.name()]
    }

    /// Batch a split. `shuffle_seed = None` keeps manifest order; otherwise
    /// the order is a seeded permutation. Every sample appears exactly once;
    /// the last batch may be short.
    pub fn batches<S: Scalar>(
        &self,
        split: Split,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> Result<Vec<ModalityBatch<S>>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut order: Vec<usize> = self.split_indices(split).to_vec();
        if let Some(seed) = shuffle_seed {
            use rand::Rng as _;
            let mut rng = rng_from_seed(seed);
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        order
            .chunks(batch_size)
            .map(|chunk| self.gather_batch(chunk))
            .collect()
    }

    fn gather_batch<S: Scalar>(&self, indices: &[usize]) -> Result<ModalityBatch<S>> {
        let b = indices.len();
        let mut feats: Vec<Tensor<S>> = Vec::with_capacity(3);
        let mut lens: [Vec<usize>; 3] = Default::default();
        for m in Modality::ALL {
            let idx = m.index();
            let entry = &self.manifest.modalities[m.name()];
            let (t, d) = (entry.t, entry.d);
            let mut buf = Vec::with_capacity(b * t * d);
            for &i in indices {
                buf.extend(
                    self.feats[idx][i * t * d..(i + 1) * t * d]
                        .iter()
                        .map(|&v| S::from_f64(v as f64)),
                );
                lens[idx].push(self.lens[idx][i]);
            }
            feats.push(Tensor::from_vec(&[b, t, d], buf)?);
        }
        let label_values: Vec<f64> = indices.iter().map(|&i| self.labels[i] as f64).collect();
        let labels = Tensor::from_vec(
            &[b],
            label_values.iter().map(|&v| S::from_f64(v)).collect(),
        )?;
        let mut it = feats.into_iter();
        Ok(ModalityBatch {
            feats: [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
            lens,
            labels,
            label_values,
            indices: indices.to_vec(),
        })
    }
}
