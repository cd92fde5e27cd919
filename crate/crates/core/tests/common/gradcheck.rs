//! Finite-difference checks of every loss, at d = 4 and batch 4. Each
//! function returns the comparison report; callers decide the tolerance.

use hrlf_core::autograd::{ParamStore, Tape, Var};
use hrlf_core::encoder::ModalityEncoder;
use hrlf_core::frf::FrfTargets;
use hrlf_core::hal::{loss_hal_discriminator, loss_hal_generator};
use hrlf_core::hmi::{derangement, loss_hmi};
use hrlf_core::trainer::{loss_kl, loss_task, student_objective, teacher_targets, Auxiliary, StudentBatch, TeacherTargets};
use hrlf_core::{Label, NetworkBundle, Role, TaskKind, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fd_compare, jitter, tiny_bundle, tiny_model, tiny_shapes, FdReport};

pub const B: usize = 4;
const PER_TENSOR: usize = 6;
const TASK: TaskKind = TaskKind::Classification { num_classes: 2 };

fn inputs(seed: u64) -> [Tensor; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tiny_shapes().map(|s| Tensor::randn(B * s.seq_len, s.dim, 1.0, &mut rng))
}

fn labels(seed: u64) -> Vec<Label> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l: Vec<Label> = (0..B).map(|_| Label::Class(rng.random_range(0..2))).collect();
    l[0] = Label::Class(0);
    l[1] = Label::Class(1);
    l
}

fn perms(seed: u64) -> [Vec<usize>; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [derangement(B, &mut rng), derangement(B, &mut rng), derangement(B, &mut rng)]
}

struct Net(NetworkBundle);

fn net_store(n: &mut Net) -> &mut ParamStore {
    &mut n.0.store
}

fn check_bundle(net: NetworkBundle, loss: impl Fn(&mut Tape, &NetworkBundle) -> Var) -> FdReport {
    let mut tape = Tape::new();
    let l = loss(&mut tape, &net);
    tape.backward(l);
    let grads = tape.grads_for(&net.store);
    let mut state = Net(net);
    fd_compare(&mut state, net_store, &grads, PER_TENSOR, |s| {
        let mut tape = Tape::new();
        let l = loss(&mut tape, &s.0);
        tape.item(l)
    })
}

pub fn encoder() -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = tiny_model(false).encoder;
    let mut store = ParamStore::new();
    let enc = ModalityEncoder::new(&mut store, "enc", 3, 5, &cfg, &mut rng).unwrap();
    jitter(&mut store, 99);
    let x = Tensor::randn(B * 5, 3, 1.0, &mut rng);
    let probe = Tensor::randn(B, 4, 1.0, &mut rng);
    let loss = |tape: &mut Tape, store: &ParamStore| {
        let xv = tape.constant(x.clone());
        let z = enc.forward(tape, store, xv, None).unwrap().z;
        let p = tape.constant(probe.clone());
        let m = tape.mul(z, p);
        tape.sum(m)
    };
    let mut tape = Tape::new();
    let l = loss(&mut tape, &store);
    tape.backward(l);
    let grads = tape.grads_for(&store);
    fn id(s: &mut ParamStore) -> &mut ParamStore {
        s
    }
    fd_compare(&mut store, id, &grads, PER_TENSOR, |s| {
        let mut tape = Tape::new();
        let l = loss(&mut tape, s);
        tape.item(l)
    })
}

/// `L_FRF` with the targets attached, the exact gradient of the loss.
pub fn frf_live() -> FdReport {
    let x = inputs(2);
    check_bundle(tiny_bundle(Role::Teacher, false, 3), |tape, net| {
        let fwd = net.forward(tape, &x, None).unwrap();
        net.frf.loss_frf(tape, &net.store, &fwd.z, &fwd.pairs).total
    })
}

/// With detached targets the training gradient is the gradient of the FRF
/// loss against targets frozen at the current parameters.
pub fn frf_frozen_targets() -> FdReport {
    let x = inputs(4);
    let net = tiny_bundle(Role::Teacher, true, 5);
    let targets = {
        let mut tape = Tape::new();
        let fwd = net.forward(&mut tape, &x, None).unwrap();
        FrfTargets::capture(&tape, &fwd.z, &fwd.pairs)
    };
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, &x, None).unwrap();
    let l = net.frf.loss_frf(&mut tape, &net.store, &fwd.z, &fwd.pairs).total;
    tape.backward(l);
    let grads = tape.grads_for(&net.store);
    let mut state = Net(net);
    fd_compare(&mut state, net_store, &grads, PER_TENSOR, |s| {
        let mut tape = Tape::new();
        let fwd = s.0.forward(&mut tape, &x, None).unwrap();
        let l = s.0.frf.loss_frf_with_targets(&mut tape, &s.0.store, &fwd.pairs, &targets).total;
        tape.item(l)
    })
}

pub fn task() -> FdReport {
    let x = inputs(6);
    let y = labels(6);
    check_bundle(tiny_bundle(Role::Student, false, 7), |tape, net| {
        let fwd = net.forward(tape, &x, None).unwrap();
        loss_task(tape, fwd.logits, &y, TASK).unwrap()
    })
}

pub fn kl(temperature: f64) -> FdReport {
    let x = inputs(6);
    let teacher_logits = Tensor::randn(B, 2, 2.0, &mut ChaCha8Rng::seed_from_u64(8));
    check_bundle(tiny_bundle(Role::Student, false, 9), |tape, net| {
        let fwd = net.forward(tape, &x, None).unwrap();
        loss_kl(tape, &teacher_logits, fwd.logits, TASK, temperature).unwrap()
    })
}

fn teacher_for(x: &[Tensor; 3]) -> TeacherTargets {
    teacher_targets(&tiny_bundle(Role::Teacher, false, 10), x).unwrap()
}

struct Pair {
    student: NetworkBundle,
    aux: Auxiliary,
}

fn pair_student(p: &mut Pair) -> &mut ParamStore {
    &mut p.student.store
}

fn pair_stats(p: &mut Pair) -> &mut ParamStore {
    &mut p.aux.stats_store
}

fn pair_discs(p: &mut Pair) -> &mut ParamStore {
    &mut p.aux.disc_store
}

fn pair(seed: u64) -> Pair {
    let mut aux = Auxiliary::new(4, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    jitter(&mut aux.stats_store, seed + 2);
    jitter(&mut aux.disc_store, seed + 3);
    Pair { student: tiny_bundle(Role::Student, false, seed), aux }
}

/// Gradient of `loss` w.r.t. each listed store of the pair.
fn check_pair(mut p: Pair, stores: &[fn(&mut Pair) -> &mut ParamStore], loss: impl Fn(&mut Tape, &Pair) -> Var) -> FdReport {
    let mut tape = Tape::new();
    let l = loss(&mut tape, &p);
    tape.backward(l);
    let mut total = FdReport::default();
    for &store in stores {
        let grads = tape.grads_for(store(&mut p));
        total = total.merge(fd_compare(&mut p, store, &grads, PER_TENSOR, |s| {
            let mut tape = Tape::new();
            let l = loss(&mut tape, s);
            tape.item(l)
        }));
    }
    total
}

/// Student and statistics networks.
pub fn hmi() -> FdReport {
    let x = inputs(11);
    let t = teacher_for(&x);
    let perms = perms(12);
    check_pair(pair(13), &[pair_student, pair_stats], |tape, p| {
        let fwd = p.student.forward(tape, &x, None).unwrap();
        let te = t.e.to_constants(tape);
        loss_hmi(tape, &p.aux.stats_store, &p.aux.stats, &te, &fwd.stack.e, &perms).unwrap()
    })
}

pub fn hal_generator() -> FdReport {
    let x = inputs(14);
    check_pair(pair(15), &[pair_student], |tape, p| {
        let fwd = p.student.forward(tape, &x, None).unwrap();
        loss_hal_generator(tape, &p.aux.disc_store, &p.aux.discs, &fwd.stack.e).unwrap()
    })
}

pub fn hal_discriminator() -> FdReport {
    let x = inputs(14);
    let t = teacher_for(&x);
    let student_e = {
        let p = pair(15);
        let mut tape = Tape::new();
        let fwd = p.student.forward(&mut tape, &x, None).unwrap();
        fwd.stack.e.map(|v| tape.value(v).clone())
    };
    check_pair(pair(15), &[pair_discs], |tape, p| {
        let te = t.e.to_constants(tape);
        let se = [0, 1, 2].map(|i| tape.constant(student_e[i].clone()));
        loss_hal_discriminator(tape, &p.aux.disc_store, &p.aux.discs, &te, &se).unwrap()
    })
}

/// The assembled student objective, FRF targets attached.
pub fn total() -> FdReport {
    let x = inputs(16);
    let y = labels(16);
    let t = teacher_for(&x);
    let perms = perms(17);
    let cfg = TrainConfig::default();
    check_pair(pair(18), &[pair_student, pair_stats], |tape, p| {
        let sb = StudentBatch { inputs: &x, labels: &y, teacher: &t, perms: &perms };
        student_objective(tape, &p.student, &p.aux, &sb, &cfg, None).unwrap().total
    })
}
