#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use hrlf_core::autograd::{Grads, ParamStore};
use hrlf_core::{EncoderConfig, ModalityShape, ModelConfig, NetworkBundle, Role, TaskKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely (so a relative
/// tolerance `r` means an absolute `r * FD_FLOOR` there). The five-point
/// stencil carries about `1.5e-16 |f| / h`, i.e. ~1e-10, of round-off.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Default, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub nonzero: usize,
    /// Parameter, entry, analytic and numeric value of the worst entry.
    pub worst: String,
}

impl FdReport {
    pub fn merge(self, other: Self) -> Self {
        let worst = if other.max_rel > self.max_rel { other.worst } else { self.worst };
        Self { checked: self.checked + other.checked, max_rel: self.max_rel.max(other.max_rel), nonzero: self.nonzero + other.nonzero, worst }
    }
}

/// Moves every parameter off the zero-bias initialization. With all biases
/// at zero a row whose hidden units are all dead maps to exactly zero and
/// sits on the next ReLU's kink, where finite differences see half a slope.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let (r, c) = t.shape();
        t.add_assign(&Tensor::randn(r, c, 0.1, &mut rng));
    }
}

/// Compares `analytic` against five-point central differences of `value` for up to
/// `per_tensor` entries of every tensor in the store picked out by `store`.
pub fn fd_compare<S>(
    state: &mut S,
    store: fn(&mut S) -> &mut ParamStore,
    analytic: &Grads,
    per_tensor: usize,
    value: impl Fn(&S) -> f64,
) -> FdReport {
    let ids: Vec<_> = store(state).ids().collect();
    let mut report = FdReport::default();
    for id in ids {
        let n = store(state).get(id).len();
        let stride = (n / per_tensor.max(1)).max(1);
        for k in (0..n).step_by(stride).take(per_tensor) {
            let orig = store(state).get(id).data()[k];
            let mut at = |offset: f64| {
                store(state).get_mut(id).data_mut()[k] = orig + offset;
                value(state)
            };
            let (p1, m1, p2, m2) = (at(FD_STEP), at(-FD_STEP), at(2.0 * FD_STEP), at(-2.0 * FD_STEP));
            store(state).get_mut(id).data_mut()[k] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
            let a = analytic.get(id).data()[k];
            report.checked += 1;
            if a.abs() > FD_FLOOR {
                report.nonzero += 1;
            }
            let e = rel_err(a, numeric);
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("{}[{k}]: analytic {a:.6e}, numeric {numeric:.6e}", store(state).name(id));
            }
        }
    }
    report
}

pub fn tiny_shapes() -> [ModalityShape; 3] {
    [ModalityShape { seq_len: 5, dim: 3 }, ModalityShape { seq_len: 5, dim: 2 }, ModalityShape { seq_len: 5, dim: 2 }]
}

pub fn tiny_model(detach: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { d_model: 4, ff_dim: 8, layers: 1, heads: 2, ..Default::default() },
        detach_frf_targets: detach,
        ..Default::default()
    }
}

pub fn tiny_bundle(role: Role, detach: bool, seed: u64) -> NetworkBundle {
    let mut b = NetworkBundle::new(role, TaskKind::Classification { num_classes: 2 }, tiny_shapes(), &tiny_model(detach), &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    jitter(&mut b.store, seed ^ 0x9e37);
    b
}
