//! Hierarchical adversarial alignment of student and teacher scale groups.
//!
//! Per scale `i` a discriminator `D_i` separates teacher representations
//! (label 1) from student representations (label 0). The discriminators
//! ascend `sum_i log D_i(E_i^t) + log(1 - D_i(E_i^s))`; the student descends
//! the non-saturating surrogate `sum_i -log D_i(E_i^s)`.

use rand::Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::scale_dims;
use crate::nn::Mlp;

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub dim: usize,
    pub mlp: Mlp,
}

impl Discriminator {
    /// `dim -> 2 dim -> 1`, ReLU hidden layer, sigmoid head.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self { dim, mlp: Mlp::new(store, name, &[dim, 2 * dim, 1], false, rng) }
    }

    /// Clamped probability that each row is a teacher representation, `[batch, 1]`.
    pub fn prob(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let logit = self.mlp.forward(tape, store, x);
        let p = tape.sigmoid(logit);
        tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    }

    /// As [`Discriminator::prob`] with the discriminator's parameters frozen.
    pub fn prob_frozen(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let logit = self.mlp.forward_frozen(tape, store, x);
        let p = tape.sigmoid(logit);
        tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct ScaleDiscriminators {
    pub discs: [Discriminator; 3],
}

impl ScaleDiscriminators {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        let dims = scale_dims(d);
        Self { discs: [0, 1, 2].map(|i| Discriminator::new(store, &format!("disc{}", i + 1), dims[i], rng)) }
    }
}

fn check_dims(tape: &Tape, discs: &ScaleDiscriminators, xs: &[Var; 3]) -> Result<()> {
    for (i, (&x, d)) in xs.iter().zip(&discs.discs).enumerate() {
        if tape.shape(x).1 != d.dim {
            return Err(Error::Shape(format!("scale {} has width {}, discriminator expects {}", i + 1, tape.shape(x).1, d.dim)));
        }
    }
    Ok(())
}

/// `sum_i mean log(1 - D_i(E_i^s)) + mean log D_i(E_i^t)`, the quantity the
/// discriminators maximize. Pass student representations as constants.
pub fn loss_hal_discriminator(
    tape: &mut Tape,
    store: &ParamStore,
    discs: &ScaleDiscriminators,
    teacher: &[Var; 3],
    student: &[Var; 3],
) -> Result<Var> {
    check_dims(tape, discs, teacher)?;
    check_dims(tape, discs, student)?;
    let mut terms = Vec::with_capacity(6);
    for i in 0..3 {
        let ps = discs.discs[i].prob(tape, store, student[i]);
        let one_minus = tape.rsub_scalar(1.0, ps);
        let log_fake = tape.log(one_minus);
        terms.push(tape.mean(log_fake));
        let pt = discs.discs[i].prob(tape, store, teacher[i]);
        let log_real = tape.log(pt);
        terms.push(tape.mean(log_real));
    }
    Ok(tape.add_all(&terms))
}

/// `sum_i mean(-log D_i(E_i^s))` with the discriminators frozen; minimized by
/// the student.
pub fn loss_hal_generator(tape: &mut Tape, store: &ParamStore, discs: &ScaleDiscriminators, student: &[Var; 3]) -> Result<Var> {
    check_dims(tape, discs, student)?;
    let mut terms = Vec::with_capacity(3);
    for i in 0..3 {
        let p = discs.discs[i].prob_frozen(tape, store, student[i]);
        let lp = tape.log(p);
        let m = tape.mean(lp);
        terms.push(tape.neg(m));
    }
    Ok(tape.add_all(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn half_discs(d: usize) -> (ParamStore, ScaleDiscriminators) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let discs = ScaleDiscriminators::new(&mut store, d, &mut rng);
        for disc in &discs.discs {
            disc.mlp.zero(&mut store);
        }
        (store, discs)
    }

    fn inputs(tape: &mut Tape, d: usize, seed: u64) -> [Var; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        scale_dims(d).map(|w| tape.constant(Tensor::randn(4, w, 1.0, &mut rng)))
    }

    #[test]
    fn half_probability_constants() {
        let (store, discs) = half_discs(4);
        let mut tape = Tape::new();
        let t = inputs(&mut tape, 4, 1);
        let s = inputs(&mut tape, 4, 2);
        let ld = loss_hal_discriminator(&mut tape, &store, &discs, &t, &s).unwrap();
        assert!((tape.item(ld) + 6.0 * 2f64.ln()).abs() < 1e-12);
        let lg = loss_hal_generator(&mut tape, &store, &discs, &s).unwrap();
        assert!((tape.item(lg) - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    /// Hidden unit 0 reads feature 0; the head maps it to a logit of
    /// `100 x_0 - 50`, so rows with `x_0 = 1` score ~1 and `x_0 = 0` ~0.
    fn saturating_discs(d: usize) -> (ParamStore, ScaleDiscriminators) {
        let (mut store, discs) = half_discs(d);
        for disc in &discs.discs {
            store.get_mut(disc.mlp.layers[0].weight).set(0, 0, 1.0);
            store.get_mut(disc.mlp.layers[1].weight).set(0, 0, 100.0);
            *store.get_mut(disc.mlp.layers[1].bias) = Tensor::scalar(-50.0);
        }
        (store, discs)
    }

    fn marked(tape: &mut Tape, d: usize, x0: f64) -> [Var; 3] {
        scale_dims(d).map(|w| {
            let mut t = Tensor::zeros(4, w);
            for r in 0..4 {
                t.set(r, 0, x0);
            }
            tape.constant(t)
        })
    }

    #[test]
    fn perfect_discriminator_limits() {
        let (store, discs) = saturating_discs(2);
        let mut tape = Tape::new();
        let t = marked(&mut tape, 2, 1.0);
        let s = marked(&mut tape, 2, 0.0);
        let ld = loss_hal_discriminator(&mut tape, &store, &discs, &t, &s).unwrap();
        let ld = tape.item(ld);
        assert!(ld < 0.0 && ld > -1e-4, "{ld}");
        // A student that looks like the teacher fools it completely.
        let lg = loss_hal_generator(&mut tape, &store, &discs, &t).unwrap();
        let lg = tape.item(lg);
        assert!(lg > 0.0 && lg < 1e-4, "{lg}");
        // And one that does not pays the clamped maximum.
        let lg = loss_hal_generator(&mut tape, &store, &discs, &s).unwrap();
        let lg = tape.item(lg);
        assert!((lg + 3.0 * PROB_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn generator_loss_leaves_discriminators_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dstore = ParamStore::new();
        let discs = ScaleDiscriminators::new(&mut dstore, 3, &mut rng);
        let mut sstore = ParamStore::new();
        let src = sstore.add("src", Tensor::randn(4, 9, 1.0, &mut rng));
        let mut tape = Tape::new();
        let s1 = tape.param(&sstore, src);
        let s2 = tape.slice_cols(s1, 0, 6);
        let s3 = tape.slice_cols(s1, 0, 3);
        let lg = loss_hal_generator(&mut tape, &dstore, &discs, &[s1, s2, s3]).unwrap();
        tape.backward(lg);
        assert!(tape.grads_for(&dstore).is_all_zero());
        assert!(!tape.grads_for(&sstore).is_all_zero());
    }

    #[test]
    fn wrong_width_rejected() {
        let (store, discs) = half_discs(4);
        let mut tape = Tape::new();
        let s = inputs(&mut tape, 3, 1);
        assert!(loss_hal_generator(&mut tape, &store, &discs, &s).is_err());
    }
}
