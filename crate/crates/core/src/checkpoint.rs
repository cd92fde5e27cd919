//! Parameter checkpoints: one raw little-endian `f64` array per store plus a
//! JSON manifest with names, shapes and a CRC32 of the array.
//!
//! A training run is laid out as `teacher/`, `student/`, `stats/` and
//! `discs/` under one output directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::data::{ModalityShape, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{Auxiliary, ModelConfig, NetworkBundle, Role};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.f64";

pub const TEACHER_DIR: &str = "teacher";
pub const STUDENT_DIR: &str = "student";
pub const STATS_DIR: &str = "stats";
pub const DISCS_DIR: &str = "discs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Architecture needed to rebuild a network before loading its values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub role: Role,
    pub task: TaskKind,
    pub shapes: [ModalityShape; 3],
    pub config: ModelConfig,
}

impl BundleMeta {
    pub fn of(bundle: &NetworkBundle) -> Self {
        Self { role: bundle.role, task: bundle.task, shapes: bundle.shapes, config: bundle.config }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<BundleMeta>,
    /// Embedding size the auxiliary networks were built for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    pub checksum: u32,
}

fn write_store(store: &ParamStore, dir: &Path, bundle: Option<BundleMeta>, d_model: Option<usize>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() });
    }
    let manifest = CheckpointManifest { format_version: CHECKPOINT_VERSION, bundle, d_model, tensors, checksum: crc32fast::hash(&bytes) };
    fs::write(dir.join(PARAMS), &bytes)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::InvalidConfig(format!("checkpoint format {} (expected {CHECKPOINT_VERSION})", manifest.format_version)));
    }
    Ok(manifest)
}

/// Overwrites every parameter of `store` from the checkpoint in `dir`. Names
/// and shapes must match exactly.
fn read_store_into(store: &mut ParamStore, dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
    let path: PathBuf = dir.join(PARAMS);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path)?;
    let expected_len: usize = manifest.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if bytes.len() != expected_len {
        return Err(Error::Shape(format!("{PARAMS}: manifest implies {expected_len} bytes, found {}", bytes.len())));
    }
    let actual = crc32fast::hash(&bytes);
    if actual != manifest.checksum {
        return Err(Error::Checksum { file: PARAMS.into(), expected: manifest.checksum, actual });
    }
    if manifest.tensors.len() != store.len() {
        return Err(Error::Shape(format!("checkpoint has {} tensors, model has {}", manifest.tensors.len(), store.len())));
    }
    let mut offset = 0;
    for entry in &manifest.tensors {
        let id = store.find(&entry.name).ok_or_else(|| Error::Shape(format!("model has no parameter {}", entry.name)))?;
        if store.get(id).shape() != (entry.rows, entry.cols) {
            return Err(Error::Shape(format!(
                "{}: checkpoint [{}, {}], model {:?}",
                entry.name,
                entry.rows,
                entry.cols,
                store.get(id).shape()
            )));
        }
        let n = entry.rows * entry.cols;
        let values: Vec<f64> = bytes[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint parameter {}", entry.name)));
        }
        *store.get_mut(id) = Tensor::from_vec(entry.rows, entry.cols, values);
        offset += n * 8;
    }
    Ok(())
}

pub fn save_bundle(bundle: &NetworkBundle, dir: &Path) -> Result<()> {
    write_store(&bundle.store, dir, Some(BundleMeta::of(bundle)), None)
}

pub fn load_bundle(dir: &Path) -> Result<NetworkBundle> {
    let manifest = read_manifest(dir)?;
    let meta = manifest.bundle.ok_or_else(|| Error::InvalidConfig(format!("{} is not a network checkpoint", dir.display())))?;
    // Initial values are overwritten; the seed only has to be fixed.
    let mut bundle = NetworkBundle::new(meta.role, meta.task, meta.shapes, &meta.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    read_store_into(&mut bundle.store, dir, &manifest)?;
    Ok(bundle)
}

/// Writes `stats/` and `discs/` under `root`.
pub fn save_auxiliary(aux: &Auxiliary, d_model: usize, root: &Path) -> Result<()> {
    write_store(&aux.stats_store, &root.join(STATS_DIR), None, Some(d_model))?;
    write_store(&aux.disc_store, &root.join(DISCS_DIR), None, Some(d_model))
}

pub fn load_auxiliary(root: &Path) -> Result<Auxiliary> {
    let stats = read_manifest(&root.join(STATS_DIR))?;
    let discs = read_manifest(&root.join(DISCS_DIR))?;
    let d = match (stats.d_model, discs.d_model) {
        (Some(a), Some(b)) if a == b => a,
        _ => return Err(Error::InvalidConfig("auxiliary checkpoints disagree on the embedding size".into())),
    };
    let mut aux = Auxiliary::new(d, &mut ChaCha8Rng::seed_from_u64(0));
    read_store_into(&mut aux.stats_store, &root.join(STATS_DIR), &stats)?;
    read_store_into(&mut aux.disc_store, &root.join(DISCS_DIR), &discs)?;
    Ok(aux)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn bundle() -> NetworkBundle {
        let shapes = [ModalityShape { seq_len: 4, dim: 3 }, ModalityShape { seq_len: 4, dim: 2 }, ModalityShape { seq_len: 4, dim: 2 }];
        let config = ModelConfig { encoder: EncoderConfig { d_model: 4, ff_dim: 8, layers: 1, ..Default::default() }, ..Default::default() };
        NetworkBundle::new(Role::Teacher, TaskKind::Classification { num_classes: 2 }, shapes, &config, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap()
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert!(back.store.bit_identical(&b.store));
        assert_eq!(BundleMeta::of(&back), BundleMeta::of(&b));
    }

    #[test]
    fn corruption_and_mismatch_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle(), dir.path()).unwrap();
        let path = dir.path().join(PARAMS);
        let mut bytes = fs::read(&path).unwrap();
        bytes[17] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Checksum { .. })));
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Shape(_))));
        assert!(matches!(load_bundle(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn auxiliary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let aux = Auxiliary::new(4, &mut ChaCha8Rng::seed_from_u64(3));
        save_auxiliary(&aux, 4, dir.path()).unwrap();
        let back = load_auxiliary(dir.path()).unwrap();
        assert!(back.stats_store.bit_identical(&aux.stats_store));
        assert!(back.disc_store.bit_identical(&aux.disc_store));
    }
}
