//! Modality stochastic missing: frame-level drops within a modality and
//! removal of whole modalities, both realized as zero vectors.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{ModalityKind, MultimodalSample};
use crate::error::{Error, Result};

/// Available-modality subset used at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TestingCondition {
    L,
    A,
    V,
    LA,
    LV,
    AV,
    LAV,
}

impl TestingCondition {
    /// Report column order: the six missing conditions, then complete.
    pub const ALL: [TestingCondition; 7] = [Self::L, Self::A, Self::V, Self::LA, Self::LV, Self::AV, Self::LAV];
    pub const MISSING: [TestingCondition; 6] = [Self::L, Self::A, Self::V, Self::LA, Self::LV, Self::AV];

    pub fn retained(self) -> [bool; 3] {
        match self {
            Self::L => [true, false, false],
            Self::A => [false, true, false],
            Self::V => [false, false, true],
            Self::LA => [true, true, false],
            Self::LV => [true, false, true],
            Self::AV => [false, true, true],
            Self::LAV => [true, true, true],
        }
    }

    pub fn contains(self, kind: ModalityKind) -> bool {
        self.retained()[kind.index()]
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::L => "l",
            Self::A => "a",
            Self::V => "v",
            Self::LA => "la",
            Self::LV => "lv",
            Self::AV => "av",
            Self::LAV => "lav",
        }
    }

    pub fn from_retained(retained: [bool; 3]) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.retained() == retained)
    }
}

impl fmt::Display for TestingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestingCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown testing condition {s:?} (expected l, a, v, la, lv, av or lav)")))
    }
}

impl Serialize for TestingCondition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TestingCondition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-sample missingness description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingSpec {
    /// Fraction of frames dropped in each retained modality.
    pub intra_ratio: [f64; 3],
    pub retained: [bool; 3],
    pub seed: u64,
}

impl MissingSpec {
    pub fn uniform(ratio: f64, condition: TestingCondition, seed: u64) -> Self {
        Self { intra_ratio: [ratio; 3], retained: condition.retained(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.intra_ratio.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidConfig(format!("intra-modality ratio {p} outside [0, 1]")));
        }
        if !self.retained.iter().any(|&r| r) {
            return Err(Error::InvalidConfig("retained modality set is empty".into()));
        }
        Ok(())
    }
}

/// Number of frames zeroed for ratio `p` over `seq_len` frames:
/// `round(p * seq_len)` with halves rounded away from zero.
pub fn dropped_frames(p: f64, seq_len: usize) -> usize {
    ((p * seq_len as f64).round() as usize).min(seq_len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub sample: MultimodalSample,
    /// `true` where the frame was kept.
    pub frame_mask: [Vec<bool>; 3],
}

/// Applies `spec` to a copy of `sample`.
pub fn apply_msm(sample: &MultimodalSample, spec: &MissingSpec) -> Result<MaskedSample> {
    spec.validate()?;
    let mut out = sample.clone();
    let mut masks: [Vec<bool>; 3] = Default::default();
    for kind in ModalityKind::ALL {
        let m = kind.index();
        let x = out.modality_mut(kind);
        let t = x.rows();
        if !spec.retained[m] {
            x.data_mut().fill(0.0);
            masks[m] = vec![false; t];
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(m as u64);
        let mut mask = vec![true; t];
        for frame in index::sample(&mut rng, t, dropped_frames(spec.intra_ratio[m], t)) {
            mask[frame] = false;
            x.row_mut(frame).fill(0.0);
        }
        masks[m] = mask;
    }
    Ok(MaskedSample { sample: out, frame_mask: masks })
}

/// Zeroes every modality outside `condition`; retained ones are untouched.
pub fn condition_mask(sample: &MultimodalSample, condition: TestingCondition) -> MultimodalSample {
    let mut out = sample.clone();
    for kind in ModalityKind::ALL {
        if !condition.contains(kind) {
            out.modality_mut(kind).data_mut().fill(0.0);
        }
    }
    out
}

/// Training-time sampling of missingness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsmPolicy {
    /// Candidate intra-modality ratios, drawn uniformly.
    pub ratios: Vec<f64>,
    /// Candidate retained subsets, drawn uniformly.
    pub conditions: Vec<TestingCondition>,
}

impl Default for MsmPolicy {
    fn default() -> Self {
        Self { ratios: (0..=7).map(|i| i as f64 / 10.0).collect(), conditions: TestingCondition::ALL.to_vec() }
    }
}

impl MsmPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.conditions.is_empty() {
            return Err(Error::InvalidConfig("MSM policy needs at least one ratio and one condition".into()));
        }
        if self.ratios.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("MSM ratios must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MissingSpec {
        let p = self.ratios[rng.random_range(0..self.ratios.len())];
        let c = self.conditions[rng.random_range(0..self.conditions.len())];
        MissingSpec::uniform(p, c, rng.random())
    }
}
