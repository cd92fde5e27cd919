//! Hierarchical mutual-information maximization between same-scale teacher
//! and student representations, using the Jensen-Shannon lower bound
//!
//! ```text
//! MI(x, y) = E_joint[-sp(-T(x, y))] + E_marginal[-sp(T(x, y'))],   sp(w) = log(1 + e^w)
//! ```
//!
//! with marginal pairs formed by a fixed-point-free in-batch shuffle.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::scale_dims;
use crate::nn::Mlp;

/// Scores a pair `(x, y)` with a 2-layer MLP over `x || y`.
#[derive(Debug, Clone)]
pub struct StatisticsNet {
    pub dim: usize,
    pub mlp: Mlp,
}

impl StatisticsNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self { dim, mlp: Mlp::new(store, name, &[2 * dim, hidden, 1], false, rng) }
    }

    /// Scores `[batch, 1]`.
    pub fn score(&self, tape: &mut Tape, store: &ParamStore, x: Var, y: Var) -> Var {
        let cat = tape.hcat(&[x, y]);
        self.mlp.forward(tape, store, cat)
    }
}

/// Uniform random permutation of `0..n` with no fixed points (`n >= 2`).
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    assert!(n >= 2, "a derangement needs at least two elements");
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Jensen-Shannon MI lower bound between row-aligned batches `x` and `y`.
/// `perm` pairs `x_b` with `y_perm[b]` for the product-of-marginals term and
/// must have no fixed points.
pub fn mi_lower_bound(tape: &mut Tape, store: &ParamStore, net: &StatisticsNet, x: Var, y: Var, perm: &[usize]) -> Result<Var> {
    let (bx, dx) = tape.shape(x);
    let (by, dy) = tape.shape(y);
    if bx != by || dx != dy || dx != net.dim {
        return Err(Error::Shape(format!("MI bound inputs [{bx}, {dx}] and [{by}, {dy}] for a dim-{} statistics net", net.dim)));
    }
    if bx < 2 {
        return Err(Error::Empty("MI bound needs a batch of at least 2 to form marginal pairs"));
    }
    if perm.len() != bx || perm.iter().enumerate().any(|(i, &p)| i == p || p >= bx) {
        return Err(Error::InvalidConfig("marginal shuffle must be a derangement of the batch".into()));
    }
    let joint = net.score(tape, store, x, y);
    let y_shuffled = tape.gather_rows(y, perm);
    let marginal = net.score(tape, store, x, y_shuffled);
    let neg_joint = tape.neg(joint);
    let sp_joint = tape.softplus(neg_joint);
    let sp_marg = tape.softplus(marginal);
    let a = tape.mean(sp_joint);
    let b = tape.mean(sp_marg);
    let s = tape.add(a, b);
    Ok(tape.neg(s))
}

/// One statistics network per scale, dims `[3d, 2d, d]`, hidden width `4d`.
#[derive(Debug, Clone)]
pub struct HmiNets {
    pub nets: [StatisticsNet; 3],
}

impl HmiNets {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        let dims = scale_dims(d);
        Self { nets: [0, 1, 2].map(|i| StatisticsNet::new(store, &format!("stats{}", i + 1), dims[i], 4 * d, rng)) }
    }
}

/// `-(MI(E1t, E1s) + MI(E2t, E2s) + MI(E3t, E3s))`. Teacher inputs should be
/// constants on the tape.
pub fn loss_hmi(
    tape: &mut Tape,
    store: &ParamStore,
    nets: &HmiNets,
    teacher: &[Var; 3],
    student: &[Var; 3],
    perms: &[Vec<usize>; 3],
) -> Result<Var> {
    let mut bounds = Vec::with_capacity(3);
    for i in 0..3 {
        if tape.shape(teacher[i]) != tape.shape(student[i]) {
            return Err(Error::Shape(format!(
                "scale {} teacher {:?} vs student {:?}",
                i + 1,
                tape.shape(teacher[i]),
                tape.shape(student[i])
            )));
        }
        bounds.push(mi_lower_bound(tape, store, &nets.nets[i], teacher[i], student[i], &perms[i])?);
    }
    let s = tape.add_all(&bounds);
    Ok(tape.neg(s))
}
