//! Multimodal samples, the synthetic generator and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json`, one little-endian row-major
//! `f32` file per (split, modality) named `<split>_<modality>.f32`, and a
//! label file per split (`<split>_labels.f32` for regression scores,
//! `<split>_labels.i32` for class indices). The manifest records the CRC32
//! of every data file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Language,
    Audio,
    Visual,
}

impl ModalityKind {
    /// Canonical order: language, audio, visual.
    pub const ALL: [ModalityKind; 3] = [ModalityKind::Language, ModalityKind::Audio, ModalityKind::Visual];

    pub fn index(self) -> usize {
        match self {
            ModalityKind::Language => 0,
            ModalityKind::Audio => 1,
            ModalityKind::Visual => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Language => "language",
            ModalityKind::Audio => "audio",
            ModalityKind::Visual => "visual",
        }
    }

    pub fn letter(self) -> char {
        match self {
            ModalityKind::Language => 'l',
            ModalityKind::Audio => 'a',
            ModalityKind::Visual => 'v',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskKind {
    Regression,
    Classification { num_classes: usize },
}

impl TaskKind {
    /// Width of the prediction head.
    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification { num_classes } => num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Score(f64),
    Class(usize),
}

impl Label {
    /// Real-valued view used by the sign-based binary metrics: scores pass
    /// through, class 0 maps to -1 and any other class to +1.
    pub fn as_signed(self) -> f64 {
        match self {
            Label::Score(s) => s,
            Label::Class(0) => -1.0,
            Label::Class(_) => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityShape {
    pub seq_len: usize,
    pub dim: usize,
}

/// Three aligned feature sequences plus a label. `features[m]` is
/// `[seq_len, dim]` for modality `ModalityKind::ALL[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub features: [Tensor; 3],
    pub label: Label,
}

impl MultimodalSample {
    pub fn modality(&self, kind: ModalityKind) -> &Tensor {
        &self.features[kind.index()]
    }

    pub fn modality_mut(&mut self, kind: ModalityKind) -> &mut Tensor {
        &mut self.features[kind.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitInfo {
    pub name: String,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub task: TaskKind,
    pub language: ModalityShape,
    pub audio: ModalityShape,
    pub visual: ModalityShape,
    pub splits: Vec<SplitInfo>,
    /// Seed of the synthetic generator, if the data is synthetic.
    pub seed: Option<u64>,
    /// CRC32 per data file name; filled in when the dataset is saved.
    #[serde(default)]
    pub checksums: BTreeMap<String, u32>,
}

impl DatasetManifest {
    pub fn shape(&self, kind: ModalityKind) -> ModalityShape {
        match kind {
            ModalityKind::Language => self.language,
            ModalityKind::Audio => self.audio,
            ModalityKind::Visual => self.visual,
        }
    }

    pub fn shapes(&self) -> [ModalityShape; 3] {
        [self.language, self.audio, self.visual]
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported format version {}", self.format_version)));
        }
        for kind in ModalityKind::ALL {
            let s = self.shape(kind);
            if s.seq_len == 0 || s.dim == 0 {
                return Err(Error::Shape(format!("{} has zero-sized shape {:?}", kind.name(), s)));
            }
        }
        if let TaskKind::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(Error::InvalidConfig("classification needs at least 2 classes".into()));
            }
        }
        for s in &self.splits {
            if s.n_samples == 0 {
                return Err(Error::InvalidConfig(format!("split {} is empty", s.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub samples: Vec<MultimodalSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[MultimodalSample]> {
        self.splits.iter().find(|s| s.name == name).map(|s| s.samples.as_slice())
    }

    pub fn task(&self) -> TaskKind {
        self.manifest.task
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSize {
    pub name: String,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub splits: Vec<SplitSize>,
    pub language: ModalityShape,
    pub audio: ModalityShape,
    pub visual: ModalityShape,
    pub task: TaskKind,
    /// Regression labels lie in `(-score_range, score_range)`.
    pub score_range: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// Dimension of the shared sentiment factor.
    pub shared_dim: usize,
    /// Dimension of each modality's private factor.
    pub private_dim: usize,
    /// Overrides the seed of the private-factor and noise streams only.
    pub nuisance_seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            splits: vec![
                SplitSize { name: "train".into(), n_samples: 512 },
                SplitSize { name: "test".into(), n_samples: 256 },
            ],
            language: ModalityShape { seq_len: 20, dim: 16 },
            audio: ModalityShape { seq_len: 20, dim: 12 },
            visual: ModalityShape { seq_len: 20, dim: 8 },
            task: TaskKind::Classification { num_classes: 2 },
            score_range: 3.0,
            noise_scale: 0.1,
            seed: 0,
            shared_dim: 2,
            private_dim: 2,
            nuisance_seed: None,
        }
    }
}

impl SyntheticConfig {
    pub fn shapes(&self) -> [ModalityShape; 3] {
        [self.language, self.audio, self.visual]
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.is_empty() || self.splits.iter().any(|s| s.n_samples == 0) {
            return Err(Error::InvalidConfig("zero samples requested".into()));
        }
        if self.shapes().iter().any(|s| s.seq_len == 0 || s.dim == 0) {
            return Err(Error::InvalidConfig("all sequence lengths and feature dims must be >= 1".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        if self.shared_dim == 0 {
            return Err(Error::InvalidConfig("shared_dim must be >= 1".into()));
        }
        match self.task {
            TaskKind::Classification { num_classes } if num_classes < 2 => {
                Err(Error::InvalidConfig(format!("num_classes must be >= 2, got {num_classes}")))
            }
            TaskKind::Regression if !(self.score_range > 0.0) => {
                Err(Error::InvalidConfig("score_range must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

const STREAM_PROJECTION: u64 = 0;
const STREAM_SHARED: u64 = 1;
const STREAM_PRIVATE: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Per-run affine maps of the synthetic generative model.
///
/// Frame `t` of modality `m` is
/// `env_shared[m][t] * (s A_m) + env_private[m][t] * (n_m B_m) + c_m + noise`,
/// where `s` is the shared sentiment factor and `n_m` the modality's private
/// factor.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    config: SyntheticConfig,
    shared_maps: [Tensor; 3],
    private_maps: [Tensor; 3],
    offsets: [Tensor; 3],
    env_shared: [Vec<f64>; 3],
    env_private: [Vec<f64>; 3],
}

/// Latent factors of one synthetic sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub shared: Vec<f64>,
    pub private: [Vec<f64>; 3],
}

impl SyntheticModel {
    pub fn new(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, STREAM_PROJECTION);
        let scale = 1.0 / ((config.shared_dim + config.private_dim.max(1)) as f64).sqrt();
        let shapes = config.shapes();
        let mk = |f: &mut dyn FnMut(usize) -> Tensor| -> [Tensor; 3] { [f(0), f(1), f(2)] };
        let shared_maps = mk(&mut |m| Tensor::randn(config.shared_dim, shapes[m].dim, scale * 2.0, &mut rng));
        let private_maps = mk(&mut |m| Tensor::randn(config.private_dim, shapes[m].dim, scale * 2.0, &mut rng));
        let offsets = mk(&mut |m| Tensor::randn(1, shapes[m].dim, 0.1, &mut rng));
        let mut env = |m: usize| -> Vec<f64> { (0..shapes[m].seq_len).map(|_| rng.random_range(0.5..1.5)).collect() };
        let env_shared = [env(0), env(1), env(2)];
        let env_private = [env(0), env(1), env(2)];
        Ok(Self { config: config.clone(), shared_maps, private_maps, offsets, env_shared, env_private })
    }

    /// Noiseless features for given latents.
    pub fn compose(&self, latents: &Latents) -> [Tensor; 3] {
        let shapes = self.config.shapes();
        let build = |m: usize| {
            let s = Tensor::row_vector(&latents.shared).matmul(&self.shared_maps[m]);
            let n = if self.config.private_dim == 0 {
                Tensor::zeros(1, shapes[m].dim)
            } else {
                Tensor::row_vector(&latents.private[m]).matmul(&self.private_maps[m])
            };
            let mut x = Tensor::zeros(shapes[m].seq_len, shapes[m].dim);
            for t in 0..shapes[m].seq_len {
                let (gs, gp) = (self.env_shared[m][t], self.env_private[m][t]);
                for (j, v) in x.row_mut(t).iter_mut().enumerate() {
                    *v = gs * s.data()[j] + gp * n.data()[j] + self.offsets[m].data()[j];
                }
            }
            x
        };
        [build(0), build(1), build(2)]
    }

    /// The label as a function of the shared factor alone.
    pub fn label(&self, shared: &[f64]) -> Label {
        let u = shared[0].tanh();
        match self.config.task {
            TaskKind::Regression => Label::Score(f64::from((self.config.score_range * u) as f32)),
            TaskKind::Classification { num_classes } => {
                let k = ((u + 1.0) / 2.0 * num_classes as f64).floor() as usize;
                Label::Class(k.min(num_classes - 1))
            }
        }
    }

    /// Draws all samples, returning them with their latents.
    pub fn sample_all(&self) -> (Vec<Split>, Vec<Vec<Latents>>) {
        let cfg = &self.config;
        let nuisance = cfg.nuisance_seed.unwrap_or(cfg.seed);
        let mut shared_rng = stream(cfg.seed, STREAM_SHARED);
        let mut private_rng = stream(nuisance, STREAM_PRIVATE);
        let mut noise_rng = stream(nuisance, STREAM_NOISE);
        let mut splits = Vec::new();
        let mut all_latents = Vec::new();
        for sz in &cfg.splits {
            let mut samples = Vec::with_capacity(sz.n_samples);
            let mut latents = Vec::with_capacity(sz.n_samples);
            for _ in 0..sz.n_samples {
                let shared: Vec<f64> = (0..cfg.shared_dim).map(|_| StandardNormal.sample(&mut shared_rng)).collect();
                let mut draw = || -> Vec<f64> { (0..cfg.private_dim).map(|_| StandardNormal.sample(&mut private_rng)).collect() };
                let private = [draw(), draw(), draw()];
                let lat = Latents { shared, private };
                let mut features = self.compose(&lat);
                for x in &mut features {
                    for v in x.data_mut() {
                        let z: f64 = StandardNormal.sample(&mut noise_rng);
                        *v = f64::from((*v + cfg.noise_scale * z) as f32);
                    }
                }
                samples.push(MultimodalSample { features, label: self.label(&lat.shared) });
                latents.push(lat);
            }
            splits.push(Split { name: sz.name.clone(), samples });
            all_latents.push(latents);
        }
        (splits, all_latents)
    }
}

/// Generates a synthetic dataset whose features are affine in a shared
/// sentiment factor and per-modality private factors. Identical configs give
/// bit-identical datasets. All values are representable as `f32`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    let model = SyntheticModel::new(config)?;
    let (splits, _) = model.sample_all();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        task: config.task,
        language: config.language,
        audio: config.audio,
        visual: config.visual,
        splits: config.splits.iter().map(|s| SplitInfo { name: s.name.clone(), n_samples: s.n_samples }).collect(),
        seed: Some(config.seed),
        checksums: BTreeMap::new(),
    };
    Ok(Dataset { manifest, splits })
}

pub fn modality_file(split: &str, kind: ModalityKind) -> String {
    format!("{split}_{}.f32", kind.name())
}

pub fn label_file(split: &str, task: TaskKind) -> String {
    match task {
        TaskKind::Regression => format!("{split}_labels.f32"),
        TaskKind::Classification { .. } => format!("{split}_labels.i32"),
    }
}

pub(crate) fn f32_bytes(values: impl Iterator<Item = f64>) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("array written to disk".into()));
        }
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(bytes)
}

pub(crate) fn parse_f32(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Shape(format!("{what}: byte length {} is not a multiple of 4", bytes.len())));
    }
    bytes
        .chunks_exact(4)
        .map(|c| {
            let v = f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            if v.is_finite() { Ok(v) } else { Err(Error::NonFinite(what.to_string())) }
        })
        .collect()
}

/// Writes the dataset and returns the manifest as written, checksums included.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    dataset.manifest.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = dataset.manifest.clone();
    manifest.checksums.clear();
    for split in &dataset.splits {
        let info = manifest
            .splits
            .iter()
            .find(|s| s.name == split.name)
            .ok_or_else(|| Error::Shape(format!("split {} missing from manifest", split.name)))?;
        if info.n_samples != split.samples.len() {
            return Err(Error::Shape(format!("split {}: manifest {} samples, data {}", split.name, info.n_samples, split.samples.len())));
        }
        for kind in ModalityKind::ALL {
            let shape = manifest.shape(kind);
            for s in &split.samples {
                if s.modality(kind).shape() != (shape.seq_len, shape.dim) {
                    return Err(Error::Shape(format!("{} sample shape {:?} != manifest {:?}", kind.name(), s.modality(kind).shape(), shape)));
                }
            }
            let bytes = f32_bytes(split.samples.iter().flat_map(|s| s.modality(kind).data().iter().copied()))?;
            write_checked(dir, &modality_file(&split.name, kind), &bytes, &mut manifest.checksums)?;
        }
        let mut label_bytes = Vec::new();
        for s in &split.samples {
            match (s.label, manifest.task) {
                (Label::Score(v), TaskKind::Regression) => label_bytes.extend(f32_bytes(std::iter::once(v))?),
                (Label::Class(c), TaskKind::Classification { num_classes }) if c < num_classes => {
                    label_bytes.extend_from_slice(&(c as i32).to_le_bytes())
                }
                (l, t) => return Err(Error::Label(format!("label {l:?} does not fit task {t:?}"))),
            }
        }
        write_checked(dir, &label_file(&split.name, manifest.task), &label_bytes, &mut manifest.checksums)?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

fn write_checked(dir: &Path, name: &str, bytes: &[u8], sums: &mut BTreeMap<String, u32>) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    sums.insert(name.to_string(), crc32fast::hash(bytes));
    Ok(())
}

fn read_checked(dir: &Path, name: &str, expected_len: usize, manifest: &DatasetManifest) -> Result<Vec<u8>> {
    let path: PathBuf = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path)?;
    if bytes.len() != expected_len {
        return Err(Error::Shape(format!("{name}: expected {expected_len} bytes from manifest shape, found {}", bytes.len())));
    }
    let expected = *manifest
        .checksums
        .get(name)
        .ok_or_else(|| Error::InvalidConfig(format!("manifest has no checksum for {name}")))?;
    let actual = crc32fast::hash(&bytes);
    if actual != expected {
        return Err(Error::Checksum { file: name.to_string(), expected, actual });
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::MissingFile(mpath));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
    manifest.validate()?;
    let mut splits = Vec::new();
    for info in &manifest.splits {
        let n = info.n_samples;
        let mut per_modality = Vec::with_capacity(3);
        for kind in ModalityKind::ALL {
            let shape = manifest.shape(kind);
            let name = modality_file(&info.name, kind);
            let bytes = read_checked(dir, &name, n * shape.seq_len * shape.dim * 4, &manifest)?;
            per_modality.push(parse_f32(&bytes, &name)?);
        }
        let lname = label_file(&info.name, manifest.task);
        let lbytes = read_checked(dir, &lname, n * 4, &manifest)?;
        let labels: Vec<Label> = match manifest.task {
            TaskKind::Regression => parse_f32(&lbytes, &lname)?.into_iter().map(Label::Score).collect(),
            TaskKind::Classification { num_classes } => lbytes
                .chunks_exact(4)
                .map(|c| {
                    let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                    if v < 0 || v as usize >= num_classes {
                        Err(Error::Label(format!("{lname}: class {v} outside 0..{num_classes}")))
                    } else {
                        Ok(Label::Class(v as usize))
                    }
                })
                .collect::<Result<_>>()?,
        };
        let samples = (0..n)
            .map(|i| {
                let take = |m: usize| {
                    let s = manifest.shapes()[m];
                    let sz = s.seq_len * s.dim;
                    Tensor::from_vec(s.seq_len, s.dim, per_modality[m][i * sz..(i + 1) * sz].to_vec())
                };
                MultimodalSample { features: [take(0), take(1), take(2)], label: labels[i] }
            })
            .collect();
        splits.push(Split { name: info.name.clone(), samples });
    }
    Ok(Dataset { manifest, splits })
}
