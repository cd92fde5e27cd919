//! Metrics, the seven-condition grid and the intra-modality ratio sweep.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Label, MultimodalSample, TaskKind};
use crate::error::{Error, Result};
use crate::msm::{apply_msm, MissingSpec, TestingCondition};
use crate::tensor::Tensor;
use crate::trainer::{predict, Batch, Masking, NetworkBundle};

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    match (tp + fp, tp + fn_) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
    }
}

/// F1 of the positive class after binarizing both sides by sign. A score of
/// exactly zero counts as negative.
pub fn metric_f1_binary(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("F1 needs at least one prediction"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > 0.0, l > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

pub fn metric_mae(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("MAE needs at least one prediction"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    Ok(scores.iter().zip(labels).map(|(s, l)| (s - l).abs()).sum::<f64>() / scores.len() as f64)
}

/// One-vs-rest F1 per class from argmax predictions.
pub fn metric_f1_per_class(logits: &Tensor, labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("per-class F1 needs K >= 2, got {k}")));
    }
    if labels.is_empty() {
        return Err(Error::Empty("per-class F1 needs at least one prediction"));
    }
    if logits.shape() != (labels.len(), k) {
        return Err(Error::Shape(format!("logits {:?} for {} labels and {k} classes", logits.shape(), labels.len())));
    }
    let pred = logits.argmax_rows();
    Ok((0..k)
        .map(|c| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (&p, &l) in pred.iter().zip(labels) {
                match (p == c, l == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            f1_from_counts(tp, fp, fn_)
        })
        .collect())
}

/// Metric reported by the grid and sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Positive-class F1 on signed scores; for two-class heads the score is
    /// `logit_1 - logit_0`.
    #[default]
    F1Binary,
    Mae,
    Accuracy,
    /// Mean of the per-class F1 values.
    MacroF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::F1Binary => "F1",
            Metric::Mae => "MAE",
            Metric::Accuracy => "Acc",
            Metric::MacroF1 => "macro-F1",
        }
    }

    /// Whether larger values are better.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Mae)
    }

    pub fn evaluate(self, outputs: &Tensor, labels: &[Label], task: TaskKind) -> Result<f64> {
        if outputs.rows() != labels.len() {
            return Err(Error::Shape(format!("{} outputs for {} labels", outputs.rows(), labels.len())));
        }
        match (self, task) {
            (Metric::F1Binary, TaskKind::Regression) => {
                let truth: Vec<f64> = labels.iter().map(|l| l.as_signed()).collect();
                metric_f1_binary(outputs.data(), &truth)
            }
            (Metric::F1Binary, TaskKind::Classification { num_classes: 2 }) => {
                let scores: Vec<f64> = (0..outputs.rows()).map(|r| outputs.get(r, 1) - outputs.get(r, 0)).collect();
                let truth: Vec<f64> = labels.iter().map(|l| l.as_signed()).collect();
                metric_f1_binary(&scores, &truth)
            }
            (Metric::Mae, TaskKind::Regression) => {
                let truth: Vec<f64> = labels.iter().map(|l| l.as_signed()).collect();
                metric_mae(outputs.data(), &truth)
            }
            (Metric::Accuracy, _) => accuracy(outputs, labels, task),
            (Metric::MacroF1, TaskKind::Classification { num_classes }) => {
                let f1 = metric_f1_per_class(outputs, &class_labels(labels)?, num_classes)?;
                Ok(f1.iter().sum::<f64>() / f1.len() as f64)
            }
            (m, t) => Err(Error::InvalidConfig(format!("metric {m:?} is not defined for task {t:?}"))),
        }
    }
}

fn class_labels(labels: &[Label]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| match *l {
            Label::Class(c) => Ok(c),
            other => Err(Error::Label(format!("{other:?} where a class was expected"))),
        })
        .collect()
}

/// Argmax accuracy for classification; sign agreement for regression.
pub fn accuracy(outputs: &Tensor, labels: &[Label], task: TaskKind) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy needs at least one prediction"));
    }
    let hits = match task {
        TaskKind::Classification { .. } => {
            let truth = class_labels(labels)?;
            outputs.argmax_rows().iter().zip(&truth).filter(|(p, t)| p == t).count()
        }
        TaskKind::Regression => {
            outputs.data().iter().zip(labels).filter(|(&s, l)| (s > 0.0) == (l.as_signed() > 0.0)).count()
        }
    };
    Ok(hits as f64 / labels.len() as f64)
}

/// Metric for every testing condition, plus the mean over the six
/// missing-modality conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub metric: Metric,
    /// In `TestingCondition::ALL` order.
    pub values: Vec<ConditionValue>,
    pub avg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionValue {
    pub condition: TestingCondition,
    pub value: f64,
}

impl ConditionReport {
    pub fn from_values(metric: Metric, values: [f64; 7]) -> Self {
        let avg = values[..6].iter().sum::<f64>() / 6.0;
        let values = TestingCondition::ALL.iter().zip(values).map(|(&condition, value)| ConditionValue { condition, value }).collect();
        Self { metric, values, avg }
    }

    pub fn value(&self, condition: TestingCondition) -> Option<f64> {
        self.values.iter().find(|v| v.condition == condition).map(|v| v.value)
    }

    pub fn complete(&self) -> Option<f64> {
        self.value(TestingCondition::LAV)
    }

    /// `(label, value)` for the 8 report columns: six missing conditions,
    /// `Avg.`, then complete.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let mut cols: Vec<(String, f64)> =
            TestingCondition::MISSING.iter().map(|&c| (column_label(c), self.value(c).unwrap_or(f64::NAN))).collect();
        cols.push(("Avg.".into(), self.avg));
        cols.push((column_label(TestingCondition::LAV), self.complete().unwrap_or(f64::NAN)));
        cols
    }

    pub fn validate(&self) -> Result<()> {
        let conds: Vec<TestingCondition> = self.values.iter().map(|v| v.condition).collect();
        if conds != TestingCondition::ALL {
            return Err(Error::InvalidConfig("condition report must list all seven conditions in order".into()));
        }
        let mean = self.values[..6].iter().map(|v| v.value).sum::<f64>() / 6.0;
        if (mean - self.avg).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("Avg. {} disagrees with the six-condition mean {mean}", self.avg)));
        }
        Ok(())
    }
}

fn column_label(c: TestingCondition) -> String {
    let letters: Vec<String> = c.name().chars().map(String::from).collect();
    format!("{{{}}}", letters.join(","))
}

/// Fixed-width table of one or more condition reports, one row each.
pub fn condition_table(rows: &[(&str, &ConditionReport)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = rows.first() else { return out };
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let _ = write!(out, "{:width$}", "model");
    for (label, _) in first.columns() {
        let _ = write!(out, " {label:>8}");
    }
    out.push('\n');
    for (name, report) in rows {
        let _ = write!(out, "{name:width$}");
        for (_, v) in report.columns() {
            let _ = write!(out, " {v:>8.4}");
        }
        out.push('\n');
    }
    out
}

/// Evaluates `bundle` under each of the seven conditions.
pub fn run_condition_grid(bundle: &NetworkBundle, samples: &[MultimodalSample], metric: Metric) -> Result<ConditionReport> {
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let values = std::thread::scope(|scope| {
        let handles: Vec<_> = TestingCondition::ALL
            .iter()
            .map(|&c| {
                let labels = &labels;
                scope.spawn(move || {
                    let out = predict(bundle, samples, Masking::Condition(c))?;
                    metric.evaluate(&out, labels, bundle.task)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("condition worker panicked")).collect::<Result<Vec<f64>>>()
    })?;
    Ok(ConditionReport::from_values(metric, values.try_into().expect("seven conditions")))
}

/// The 11 ratios `0.0, 0.1, ..., 1.0`.
pub fn sweep_ratios() -> [f64; 11] {
    std::array::from_fn(|i| i as f64 / 10.0)
}

/// Mask draws averaged per ratio.
pub const SWEEP_DRAWS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric: Metric,
    pub condition: TestingCondition,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p: f64,
    pub value: f64,
    /// Metric of each mask draw.
    pub draws: [f64; SWEEP_DRAWS],
}

impl SweepReport {
    pub fn validate(&self) -> Result<()> {
        let ps: Vec<f64> = self.points.iter().map(|p| p.p).collect();
        if ps.len() != 11 || ps.iter().zip(sweep_ratios()).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::InvalidConfig("sweep must cover exactly p = 0.0, 0.1, ..., 1.0".into()));
        }
        Ok(())
    }

    pub fn value_at(&self, p: f64) -> Option<f64> {
        self.points.iter().find(|pt| (pt.p - p).abs() < 1e-12).map(|pt| pt.value)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>5} {:>8}\n", "p", self.metric.name());
        for pt in &self.points {
            let _ = writeln!(out, "{:>5.1} {:>8.4}", pt.p, pt.value);
        }
        out
    }
}

/// Drops `round(p T)` frames in every retained modality of every sample
/// (independent frames per sample), for each `p` of the grid, averaging
/// [`SWEEP_DRAWS`] mask draws.
pub fn run_ratio_sweep(
    bundle: &NetworkBundle,
    samples: &[MultimodalSample],
    metric: Metric,
    condition: TestingCondition,
    seed: u64,
) -> Result<SweepReport> {
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let mut points = Vec::with_capacity(11);
    for (i, p) in sweep_ratios().into_iter().enumerate() {
        let mut draws = [0.0; SWEEP_DRAWS];
        for (j, slot) in draws.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((i * SWEEP_DRAWS + j) as u64);
            let masked = samples
                .iter()
                .map(|s| apply_msm(s, &MissingSpec::uniform(p, condition, rng.random())).map(|m| m.sample))
                .collect::<Result<Vec<_>>>()?;
            let out = predict(bundle, &masked, Masking::Condition(TestingCondition::LAV))?;
            *slot = metric.evaluate(&out, &labels, bundle.task)?;
        }
        points.push(SweepPoint { p, value: draws.iter().sum::<f64>() / SWEEP_DRAWS as f64, draws });
    }
    Ok(SweepReport { metric, condition, seed, points })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cross-modality agreement of the sentiment-relevant representations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizationSignal {
    /// Mean cosine between `Q_a` and `Q_b` (`a != b`) of the same sample.
    pub within: f64,
    /// Mean cosine between `Q_a` of one sample and `Q_b` (`a != b`) of a
    /// different sample.
    pub across: f64,
}

impl FactorizationSignal {
    pub fn margin(&self) -> f64 {
        self.within - self.across
    }
}

/// Computes [`FactorizationSignal`] on complete inputs, in evaluation mode.
pub fn factorization_signal(bundle: &NetworkBundle, samples: &[MultimodalSample]) -> Result<FactorizationSignal> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Empty("factorization signal needs at least two samples"));
    }
    let batch = Batch::from_samples(samples)?;
    let mut tape = Tape::new();
    let fwd = bundle.forward(&mut tape, &batch.inputs, None)?;
    let q: Vec<&Tensor> = fwd.pairs.iter().map(|p| tape.value(p.q)).collect();
    let (mut within, mut across) = (0.0, 0.0);
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                continue;
            }
            for i in 0..n {
                for j in 0..n {
                    let c = cosine(q[a].row(i), q[b].row(j));
                    if i == j {
                        within += c;
                    } else {
                        across += c;
                    }
                }
            }
        }
    }
    Ok(FactorizationSignal { within: within / (6 * n) as f64, across: across / (6 * n * (n - 1)) as f64 })
}
