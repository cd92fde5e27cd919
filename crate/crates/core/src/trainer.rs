//! Teacher pretraining and student distillation.
//!
//! The teacher sees complete inputs and minimizes `task + FRF`. The student
//! sees inputs with stochastic missingness and minimizes
//! `task + FRF + HMI + HAL(gen) + KL` against the frozen teacher, while the
//! per-scale discriminators are updated in an alternating schedule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{clip_global_norm, ParamStore, Tape, Var};
use crate::data::{Dataset, Label, ModalityKind, ModalityShape, MultimodalSample, TaskKind};
use crate::encoder::{EncoderConfig, ModalityEncoder};
use crate::error::{Error, Result};
use crate::frf::{DistanceKind, FactorizedPair, FrfParams};
use crate::fusion::{Fusion, ScaleCombine, ScaleStack, ScaleValues};
use crate::hal::{loss_hal_discriminator, loss_hal_generator, ScaleDiscriminators};
use crate::hmi::{derangement, loss_hmi, HmiNets};
use crate::msm::{apply_msm, condition_mask, MissingSpec, MsmPolicy, TestingCondition};
use crate::nn::{Adam, AdamConfig, Linear};
use crate::tensor::Tensor;

// Stream ids carved out of one seed so every consumer of randomness is
// independent of how much randomness the others consume.
const STREAM_TEACHER_INIT: u64 = 0;
const STREAM_TEACHER_SHUFFLE: u64 = 1;
const STREAM_TEACHER_DROPOUT: u64 = 2;
const STREAM_STUDENT_INIT: u64 = 10;
const STREAM_STUDENT_SHUFFLE: u64 = 11;
const STREAM_STUDENT_DROPOUT: u64 = 12;
const STREAM_MSM: u64 = 13;
const STREAM_DERANGE: u64 = 14;
const STREAM_AUX_INIT: u64 = 15;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// Architecture shared by teacher and student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub distance: DistanceKind,
    /// Regress the factorization losses onto detached `Z` / `Q` values.
    pub detach_frf_targets: bool,
    pub scale_combine: ScaleCombine,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            distance: DistanceKind::Euclidean,
            detach_frf_targets: true,
            scale_combine: ScaleCombine::Mean,
        }
    }
}

/// Every trainable piece of one network.
#[derive(Debug, Clone)]
pub struct NetworkBundle {
    pub role: Role,
    pub task: TaskKind,
    pub shapes: [ModalityShape; 3],
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: [ModalityEncoder; 3],
    pub frf: FrfParams,
    pub fusion: Fusion,
    pub head: Linear,
}

/// Handles to the intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub z: [Var; 3],
    pub pairs: [FactorizedPair; 3],
    pub stack: ScaleStack,
    pub logits: Var,
}

/// Linear head on `H~` producing `K` logits or one regression score.
pub fn classify(tape: &mut Tape, store: &ParamStore, head: &Linear, h_tilde: Var) -> Var {
    debug_assert_eq!(tape.shape(h_tilde).1, head.in_dim);
    head.forward(tape, store, h_tilde)
}

impl NetworkBundle {
    pub fn new<R: Rng + ?Sized>(
        role: Role,
        task: TaskKind,
        shapes: [ModalityShape; 3],
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if let TaskKind::Classification { num_classes } = task {
            if num_classes < 2 {
                return Err(Error::InvalidConfig("classification needs at least 2 classes".into()));
            }
        }
        let d = config.encoder.d_model;
        let mut store = ParamStore::new();
        let mut build = |m: ModalityKind, store: &mut ParamStore| {
            let s = shapes[m.index()];
            ModalityEncoder::new(store, &format!("encoder.{}", m.name()), s.dim, s.seq_len, &config.encoder, rng)
        };
        let encoders = [
            build(ModalityKind::Language, &mut store)?,
            build(ModalityKind::Audio, &mut store)?,
            build(ModalityKind::Visual, &mut store)?,
        ];
        let frf = FrfParams::new(&mut store, "frf", d, config.distance, config.detach_frf_targets, rng);
        let fusion = Fusion::new(&mut store, "fusion", d, config.scale_combine, rng);
        let head = Linear::new(&mut store, "head", 3 * d, task.output_dim(), rng);
        Ok(Self { role, task, shapes, config: *config, store, encoders, frf, fusion, head })
    }

    pub fn d_model(&self) -> usize {
        self.config.encoder.d_model
    }

    /// Same architecture, task and input shapes.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.task == other.task && self.shapes == other.shapes && self.config == other.config
    }

    /// `inputs[m]` is `[batch * seq_len_m, dim_m]`. Dropout is active iff
    /// `rng` is given.
    pub fn forward(&self, tape: &mut Tape, inputs: &[Tensor; 3], mut rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        let mut z = Vec::with_capacity(3);
        for (enc, x) in self.encoders.iter().zip(inputs) {
            let x = tape.constant(x.clone());
            z.push(enc.forward(tape, &self.store, x, rng.as_deref_mut())?.z);
        }
        let z = [z[0], z[1], z[2]];
        let pairs = self.frf.factorize_all(tape, &self.store, &z);
        let stack = self.fusion.forward(tape, &self.store, &pairs)?;
        let logits = classify(tape, &self.store, &self.head, stack.h_tilde);
        Ok(Forward { z, pairs, stack, logits })
    }
}

/// Row-stacked inputs and labels of a group of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: [Tensor; 3],
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a MultimodalSample>) -> Result<Self> {
        let samples: Vec<&MultimodalSample> = samples.into_iter().collect();
        if samples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let inputs = [0, 1, 2].map(|m| Tensor::vcat(&samples.iter().map(|s| &s.features[m]).collect::<Vec<_>>()));
        Ok(Self { inputs, labels: samples.iter().map(|s| s.label).collect() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean cross-entropy (classification) or mean squared error (regression).
pub fn loss_task(tape: &mut Tape, logits: Var, labels: &[Label], task: TaskKind) -> Result<Var> {
    let (b, k) = tape.shape(logits);
    if b != labels.len() || b == 0 {
        return Err(Error::Shape(format!("{b} prediction rows for {} labels", labels.len())));
    }
    if k != task.output_dim() {
        return Err(Error::Shape(format!("head width {k}, task expects {}", task.output_dim())));
    }
    match task {
        TaskKind::Classification { .. } => {
            let mut onehot = Tensor::zeros(b, k);
            for (i, label) in labels.iter().enumerate() {
                match *label {
                    Label::Class(c) if c < k => onehot.set(i, c, 1.0),
                    other => return Err(Error::Label(format!("{other:?} at row {i} for a {k}-class task"))),
                }
            }
            let log_p = tape.log_softmax_rows(logits);
            let onehot = tape.constant(onehot);
            let picked = tape.mul(log_p, onehot);
            let s = tape.sum(picked);
            Ok(tape.scale(s, -1.0 / b as f64))
        }
        TaskKind::Regression => {
            let mut target = Tensor::zeros(b, 1);
            for (i, label) in labels.iter().enumerate() {
                match *label {
                    Label::Score(s) if s.is_finite() => target.set(i, 0, s),
                    other => return Err(Error::Label(format!("{other:?} at row {i} for a regression task"))),
                }
            }
            let target = tape.constant(target);
            let diff = tape.sub(logits, target);
            let sq = tape.square(diff);
            Ok(tape.mean(sq))
        }
    }
}

fn softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let mut out = x.map(|v| v / temperature);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Consistency between teacher and student predictions. Classification uses
/// `KL(softmax(t / T) || softmax(s / T))` averaged over the batch; regression
/// the mean squared difference. The teacher side is a plain tensor, so no
/// gradient can reach it.
pub fn loss_kl(tape: &mut Tape, teacher: &Tensor, student: Var, task: TaskKind, temperature: f64) -> Result<Var> {
    if teacher.shape() != tape.shape(student) {
        return Err(Error::Shape(format!("teacher logits {:?} vs student {:?}", teacher.shape(), tape.shape(student))));
    }
    let b = teacher.rows() as f64;
    match task {
        TaskKind::Classification { .. } => {
            let p = softmax_rows(teacher, temperature);
            let entropy_part: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>() / b;
            let scaled = tape.scale(student, 1.0 / temperature);
            let log_q = tape.log_softmax_rows(scaled);
            let p = tape.constant(p);
            let cross = tape.mul(log_q, p);
            let cross = tape.sum(cross);
            let cross = tape.scale(cross, 1.0 / b);
            Ok(tape.rsub_scalar(entropy_part, cross))
        }
        TaskKind::Regression => {
            let t = tape.constant(teacher.clone());
            let diff = tape.sub(student, t);
            let sq = tape.square(diff);
            Ok(tape.mean(sq))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_frf: bool,
    pub use_hmi: bool,
    pub use_hal: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_frf: true, use_hmi: true, use_hal: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub task: f64,
    pub frf: f64,
    pub hmi: f64,
    pub hal: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { task: 1.0, frf: 1.0, hmi: 1.0, hal: 1.0, kl: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Student, statistics networks and teacher.
    pub lr: f64,
    pub disc_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub weights: LossWeights,
    pub msm: MsmPolicy,
    pub kl_temperature: f64,
    pub grad_clip: f64,
    /// Discriminator updates per student update.
    pub disc_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            disc_lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            ablation: Ablation::default(),
            weights: LossWeights::default(),
            msm: MsmPolicy::default(),
            kl_temperature: 1.0,
            grad_clip: 5.0,
            disc_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("disc_lr", self.disc_lr), ("kl_temperature", self.kl_temperature), ("grad_clip", self.grad_clip)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        let w = self.weights;
        if [w.task, w.frf, w.hmi, w.hal, w.kl].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        self.msm.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrfBreakdown {
    #[serde(rename = "self")]
    pub self_term: f64,
    pub cross: f64,
    pub recon: f64,
    pub total: f64,
}

/// Weighted loss contributions; `total` is their sum. `hal_disc` is the
/// discriminator objective (the quantity the discriminators maximize) and is
/// not part of `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub frf: FrfBreakdown,
    pub hmi: f64,
    pub hal_gen: f64,
    pub hal_disc: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.task + self.frf.total + self.hmi + self.hal_gen + self.kl
    }

    pub fn is_finite(&self) -> bool {
        [
            self.task,
            self.frf.self_term,
            self.frf.cross,
            self.frf.recon,
            self.frf.total,
            self.hmi,
            self.hal_gen,
            self.hal_disc,
            self.kl,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn mean(records: &[LossBreakdown]) -> LossBreakdown {
        let n = records.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for r in records {
            m.task += r.task / n;
            m.frf.self_term += r.frf.self_term / n;
            m.frf.cross += r.frf.cross / n;
            m.frf.recon += r.frf.recon / n;
            m.frf.total += r.frf.total / n;
            m.hmi += r.hmi / n;
            m.hal_gen += r.hal_gen / n;
            m.hal_disc += r.hal_disc / n;
            m.kl += r.kl / n;
            m.total += r.total / n;
        }
        m
    }
}

/// One history line: per-step means over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub role: Role,
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
}

/// A loss on the tape together with its reported breakdown.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub forward: Forward,
    pub breakdown: LossBreakdown,
}

fn frf_term(tape: &mut Tape, net: &NetworkBundle, fwd: &Forward, weight: f64, breakdown: &mut LossBreakdown) -> Var {
    let l = net.frf.loss_frf(tape, &net.store, &fwd.z, &fwd.pairs);
    breakdown.frf = FrfBreakdown {
        self_term: weight * tape.item(l.trans.self_term),
        cross: weight * tape.item(l.trans.cross_term),
        recon: weight * tape.item(l.recon),
        total: weight * tape.item(l.total),
    };
    tape.scale(l.total, weight)
}

/// `w_task L_task + w_frf L_FRF` on complete inputs.
pub fn teacher_objective(
    tape: &mut Tape,
    teacher: &NetworkBundle,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Objective> {
    let fwd = teacher.forward(tape, &batch.inputs, rng)?;
    let mut breakdown = LossBreakdown::default();
    let task = loss_task(tape, fwd.logits, &batch.labels, teacher.task)?;
    breakdown.task = cfg.weights.task * tape.item(task);
    let mut terms = vec![tape.scale(task, cfg.weights.task)];
    terms.push(frf_term(tape, teacher, &fwd, cfg.weights.frf, &mut breakdown));
    let total = tape.add_all(&terms);
    breakdown.total = tape.item(total);
    Ok(Objective { total, forward: fwd, breakdown })
}

/// What the student is distilled towards: the teacher's scale groups and
/// logits on complete inputs, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub e: ScaleValues,
    pub logits: Tensor,
}

/// Runs the teacher in evaluation mode on `inputs`.
pub fn teacher_targets(teacher: &NetworkBundle, inputs: &[Tensor; 3]) -> Result<TeacherTargets> {
    let mut tape = Tape::new();
    let fwd = teacher.forward(&mut tape, inputs, None)?;
    Ok(TeacherTargets { e: ScaleValues::from_stack(&tape, &fwd.stack), logits: tape.value(fwd.logits).clone() })
}

/// Statistics networks and discriminators that live alongside the student.
#[derive(Debug, Clone)]
pub struct Auxiliary {
    pub stats_store: ParamStore,
    pub stats: HmiNets,
    pub disc_store: ParamStore,
    pub discs: ScaleDiscriminators,
}

impl Auxiliary {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut stats_store = ParamStore::new();
        let stats = HmiNets::new(&mut stats_store, d, rng);
        let mut disc_store = ParamStore::new();
        let discs = ScaleDiscriminators::new(&mut disc_store, d, rng);
        Self { stats_store, stats, disc_store, discs }
    }
}

/// Everything one student step consumes besides parameters.
#[derive(Debug, Clone, Copy)]
pub struct StudentBatch<'a> {
    /// Inputs after missingness was applied.
    pub inputs: &'a [Tensor; 3],
    pub labels: &'a [Label],
    pub teacher: &'a TeacherTargets,
    /// Marginal shuffles for the three MI bounds.
    pub perms: &'a [Vec<usize>; 3],
}

/// `L_total` for the student with ablated terms removed. Gradients reach the
/// student and the statistics networks; teacher values and discriminators
/// enter as constants.
pub fn student_objective(
    tape: &mut Tape,
    student: &NetworkBundle,
    aux: &Auxiliary,
    batch: &StudentBatch<'_>,
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Objective> {
    let w = cfg.weights;
    let flags = cfg.ablation;
    let fwd = student.forward(tape, batch.inputs, rng)?;
    let mut breakdown = LossBreakdown::default();

    let task = loss_task(tape, fwd.logits, batch.labels, student.task)?;
    breakdown.task = w.task * tape.item(task);
    let mut terms = vec![tape.scale(task, w.task)];

    if flags.use_frf {
        terms.push(frf_term(tape, student, &fwd, w.frf, &mut breakdown));
    }
    if flags.use_hmi || flags.use_hal {
        let teacher_e = batch.teacher.e.to_constants(tape);
        if flags.use_hmi {
            let l = loss_hmi(tape, &aux.stats_store, &aux.stats, &teacher_e, &fwd.stack.e, batch.perms)?;
            breakdown.hmi = w.hmi * tape.item(l);
            terms.push(tape.scale(l, w.hmi));
        }
        if flags.use_hal {
            let l = loss_hal_generator(tape, &aux.disc_store, &aux.discs, &fwd.stack.e)?;
            breakdown.hal_gen = w.hal * tape.item(l);
            terms.push(tape.scale(l, w.hal));
        }
    }
    let kl = loss_kl(tape, &batch.teacher.logits, fwd.logits, student.task, cfg.kl_temperature)?;
    breakdown.kl = w.kl * tape.item(kl);
    terms.push(tape.scale(kl, w.kl));

    let total = tape.add_all(&terms);
    breakdown.total = tape.item(total);
    Ok(Objective { total, forward: fwd, breakdown })
}

fn train_split(dataset: &Dataset) -> Result<&[MultimodalSample]> {
    match dataset.split("train") {
        Some(s) if !s.is_empty() => Ok(s),
        _ => Err(Error::Empty("dataset has no training samples")),
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    // A trailing singleton cannot form marginal pairs; fold it into the
    // previous batch.
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn diverged(epoch: usize, step: usize, what: &str, b: &LossBreakdown) -> Error {
    Error::Diverged { epoch, step, detail: format!("non-finite {what}: {b:?}") }
}

/// Trains a teacher on complete inputs.
pub fn train_teacher(dataset: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<(NetworkBundle, Vec<EpochRecord>)> {
    cfg.validate()?;
    let train = train_split(dataset)?;
    let mut teacher =
        NetworkBundle::new(Role::Teacher, dataset.task(), dataset.manifest.shapes(), model, &mut stream(cfg.seed, STREAM_TEACHER_INIT))?;
    let mut opt = Adam::new(cfg.adam(), &teacher.store);
    let mut shuffle = stream(cfg.seed, STREAM_TEACHER_SHUFFLE);
    let mut dropout = stream(cfg.seed, STREAM_TEACHER_DROPOUT);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut records = Vec::new();
        for (step, idx) in batches(train.len(), cfg.batch_size, &mut shuffle).into_iter().enumerate() {
            let batch = Batch::from_samples(idx.iter().map(|&i| &train[i]))?;
            let mut tape = Tape::new();
            let obj = match teacher_objective(&mut tape, &teacher, &batch, cfg, Some(&mut dropout)) {
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged { epoch, step, detail: format!("non-finite {what}") })
                }
                other => other?,
            };
            if !obj.breakdown.is_finite() {
                return Err(diverged(epoch, step, "teacher loss", &obj.breakdown));
            }
            tape.backward(obj.total);
            let mut grads = tape.grads_for(&teacher.store);
            clip_global_norm(&mut [&mut grads], cfg.grad_clip);
            opt.step(&mut teacher.store, &grads);
            records.push(obj.breakdown);
        }
        history.push(EpochRecord { role: Role::Teacher, epoch, steps: records.len(), loss: LossBreakdown::mean(&records) });
    }
    Ok((teacher, history))
}

/// Output of student training.
#[derive(Debug, Clone)]
pub struct StudentRun {
    pub student: NetworkBundle,
    pub aux: Auxiliary,
    pub history: Vec<EpochRecord>,
}

/// Draws one missingness spec per sample and applies it.
pub fn mask_batch(samples: &[&MultimodalSample], policy: &MsmPolicy, rng: &mut ChaCha8Rng) -> Result<Vec<MultimodalSample>> {
    samples.iter().map(|s| apply_msm(s, &policy.sample(rng)).map(|m| m.sample)).collect()
}

/// Distills a student from a frozen teacher under stochastic missingness.
pub fn train_student(dataset: &Dataset, teacher: &NetworkBundle, cfg: &TrainConfig) -> Result<StudentRun> {
    cfg.validate()?;
    let train = train_split(dataset)?;
    if teacher.role != Role::Teacher {
        return Err(Error::InvalidConfig("student training needs a teacher bundle".into()));
    }
    if teacher.task != dataset.task() || teacher.shapes != dataset.manifest.shapes() {
        return Err(Error::InvalidConfig("teacher was built for a different task or input shape".into()));
    }
    let mut init = stream(cfg.seed, STREAM_STUDENT_INIT);
    let mut student = NetworkBundle::new(Role::Student, teacher.task, teacher.shapes, &teacher.config, &mut init)?;
    if !student.same_structure(teacher) {
        return Err(Error::InvalidConfig("teacher and student structures differ".into()));
    }
    let mut aux = Auxiliary::new(student.d_model(), &mut stream(cfg.seed, STREAM_AUX_INIT));
    let mut opt_student = Adam::new(cfg.adam(), &student.store);
    let mut opt_stats = Adam::new(cfg.adam(), &aux.stats_store);
    let mut opt_disc = Adam::new(AdamConfig { lr: cfg.disc_lr, ..AdamConfig::default() }, &aux.disc_store);
    let mut shuffle = stream(cfg.seed, STREAM_STUDENT_SHUFFLE);
    let mut dropout = stream(cfg.seed, STREAM_STUDENT_DROPOUT);
    let mut msm = stream(cfg.seed, STREAM_MSM);
    let mut derange = stream(cfg.seed, STREAM_DERANGE);

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut records = Vec::new();
        for (step, idx) in batches(train.len(), cfg.batch_size, &mut shuffle).into_iter().enumerate() {
            let complete: Vec<&MultimodalSample> = idx.iter().map(|&i| &train[i]).collect();
            let full = Batch::from_samples(complete.iter().copied())?;
            let targets = teacher_targets(teacher, &full.inputs)?;
            let masked = Batch::from_samples(&mask_batch(&complete, &cfg.msm, &mut msm)?)?;
            let perms = [0, 1, 2].map(|_| derangement(full.len(), &mut derange));
            let sb = StudentBatch { inputs: &masked.inputs, labels: &masked.labels, teacher: &targets, perms: &perms };

            let mut tape = Tape::new();
            let obj = match student_objective(&mut tape, &student, &aux, &sb, cfg, Some(&mut dropout)) {
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged { epoch, step, detail: format!("non-finite {what}") })
                }
                other => other?,
            };
            let mut breakdown = obj.breakdown;
            if !breakdown.is_finite() {
                return Err(diverged(epoch, step, "student loss", &breakdown));
            }
            tape.backward(obj.total);
            let mut g_student = tape.grads_for(&student.store);
            let mut g_stats = tape.grads_for(&aux.stats_store);
            clip_global_norm(&mut [&mut g_student, &mut g_stats], cfg.grad_clip);
            opt_student.step(&mut student.store, &g_student);
            if cfg.ablation.use_hmi {
                opt_stats.step(&mut aux.stats_store, &g_stats);
            }

            if cfg.ablation.use_hal {
                let student_e = ScaleValues::from_stack(&tape, &obj.forward.stack);
                for _ in 0..cfg.disc_steps {
                    let mut dtape = Tape::new();
                    let t = targets.e.to_constants(&mut dtape);
                    let s = student_e.to_constants(&mut dtape);
                    let objective = loss_hal_discriminator(&mut dtape, &aux.disc_store, &aux.discs, &t, &s)?;
                    breakdown.hal_disc = dtape.item(objective);
                    let loss = dtape.neg(objective);
                    dtape.backward(loss);
                    let mut g = dtape.grads_for(&aux.disc_store);
                    clip_global_norm(&mut [&mut g], cfg.grad_clip);
                    opt_disc.step(&mut aux.disc_store, &g);
                }
                if !breakdown.hal_disc.is_finite() {
                    return Err(diverged(epoch, step, "discriminator objective", &breakdown));
                }
            }
            records.push(breakdown);
        }
        history.push(EpochRecord { role: Role::Student, epoch, steps: records.len(), loss: LossBreakdown::mean(&records) });
    }
    Ok(StudentRun { student, aux, history })
}

/// How test inputs are degraded before prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Masking {
    Condition(TestingCondition),
    Spec(MissingSpec),
}

/// Evaluation-mode logits `[n, K]` (or `[n, 1]`) for `samples` under
/// `masking`.
pub fn predict(bundle: &NetworkBundle, samples: &[MultimodalSample], masking: Masking) -> Result<Tensor> {
    const CHUNK: usize = 256;
    if samples.is_empty() {
        return Err(Error::Empty("no samples to predict"));
    }
    let mut out = Vec::new();
    for chunk in samples.chunks(CHUNK) {
        let masked: Vec<MultimodalSample> = match masking {
            Masking::Condition(c) => chunk.iter().map(|s| condition_mask(s, c)).collect(),
            Masking::Spec(spec) => chunk.iter().map(|s| apply_msm(s, &spec).map(|m| m.sample)).collect::<Result<_>>()?,
        };
        let batch = Batch::from_samples(&masked)?;
        let mut tape = Tape::new();
        let fwd = bundle.forward(&mut tape, &batch.inputs, None)?;
        out.push(tape.value(fwd.logits).clone());
    }
    Ok(Tensor::vcat(&out.iter().collect::<Vec<_>>()))
}
