//! Hierarchical representation learning for multimodal sentiment analysis
//! under uncertain missing modalities.
//!
//! A teacher network is trained on complete language/audio/visual inputs; a
//! structurally identical student is trained on inputs with randomly missing
//! frames and modalities. Each network factorizes every modality into a
//! sentiment-relevant and a modality-specific part ([`frf`]), fuses them into
//! a multi-scale stack ([`fusion`]), and the student is aligned to the teacher
//! per scale by mutual-information maximization ([`hmi`]) and adversarial
//! training ([`hal`]), plus logit distillation ([`trainer`]).

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frf;
pub mod fusion;
pub mod hal;
pub mod hmi;
pub mod msm;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use data::{Dataset, Label, ModalityKind, ModalityShape, MultimodalSample, SyntheticConfig, TaskKind};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use eval::{ConditionReport, Metric, SweepReport};
pub use msm::{MissingSpec, MsmPolicy, TestingCondition};
pub use tensor::Tensor;
pub use trainer::{Ablation, LossBreakdown, ModelConfig, NetworkBundle, Role, TrainConfig};
