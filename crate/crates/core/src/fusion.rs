//! Joint multimodal representation and the multi-scale refinement stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::frf::FactorizedPair;
use crate::nn::Linear;
use crate::tensor::Tensor;

/// How two same-scale representations are merged into one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleCombine {
    #[default]
    Mean,
    Sum,
    First,
}

/// Fusion outputs for one batch. Dimensions for embedding size `d`:
/// `c[m]: d`, `h: 3d`, `i1: 2d`, `i2: d`, `i3: 2d`, `h_tilde: 3d`,
/// and the same-scale groups `e = [E1: 3d, E2: 2d, E3: d]`.
#[derive(Debug, Clone, Copy)]
pub struct ScaleStack {
    pub c: [Var; 3],
    pub h: Var,
    pub i1: Var,
    pub i2: Var,
    pub i3: Var,
    pub h_tilde: Var,
    pub e: [Var; 3],
}

/// Scale dims `[3d, 2d, d]` of `E1..E3`.
pub fn scale_dims(d: usize) -> [usize; 3] {
    [3 * d, 2 * d, d]
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub d: usize,
    /// `P`: `(Q_m || U_m)` (2d) -> `C_m` (d), shared across modalities.
    pub projection: Linear,
    /// 3d -> 2d -> d -> 2d -> 3d.
    pub refine: [Linear; 4],
    pub combine: ScaleCombine,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, combine: ScaleCombine, rng: &mut R) -> Self {
        let projection = Linear::new(store, &format!("{name}.projection"), 2 * d, d, rng);
        let dims = [3 * d, 2 * d, d, 2 * d, 3 * d];
        let refine = [0, 1, 2, 3].map(|i| Linear::new(store, &format!("{name}.refine{i}"), dims[i], dims[i + 1], rng));
        Self { d, projection, refine, combine }
    }

    /// `C_m = P(Q_m || U_m)` and `H = C_L || C_A || C_V`.
    pub fn fuse_modalities(&self, tape: &mut Tape, store: &ParamStore, pairs: &[FactorizedPair]) -> Result<([Var; 3], Var)> {
        if pairs.len() != 3 {
            return Err(Error::Shape(format!("fusion needs 3 factorized pairs, got {}", pairs.len())));
        }
        let c = [0, 1, 2].map(|m| {
            let cat = tape.hcat(&[pairs[m].q, pairs[m].u]);
            self.projection.forward(tape, store, cat)
        });
        let h = tape.hcat(&c);
        Ok((c, h))
    }

    fn combine(&self, tape: &mut Tape, a: Var, b: Var) -> Var {
        match self.combine {
            ScaleCombine::Mean => {
                let s = tape.add(a, b);
                tape.scale(s, 0.5)
            }
            ScaleCombine::Sum => tape.add(a, b),
            ScaleCombine::First => a,
        }
    }

    /// Runs the refinement layers (linear taps, ReLU between layers) and
    /// forms `E1 = comb(H, H~)`, `E2 = comb(I1, I3)`, `E3 = I2`.
    pub fn refine(&self, tape: &mut Tape, store: &ParamStore, c: [Var; 3], h: Var) -> Result<ScaleStack> {
        let (_, w) = tape.shape(h);
        if w != 3 * self.d {
            return Err(Error::Shape(format!("joint representation has width {w}, expected {}", 3 * self.d)));
        }
        let i1 = self.refine[0].forward(tape, store, h);
        let a = tape.relu(i1);
        let i2 = self.refine[1].forward(tape, store, a);
        let a = tape.relu(i2);
        let i3 = self.refine[2].forward(tape, store, a);
        let a = tape.relu(i3);
        let h_tilde = self.refine[3].forward(tape, store, a);
        let e = self.groups(tape, [h, i1, i2, i3, h_tilde]);
        Ok(ScaleStack { c, h, i1, i2, i3, h_tilde, e })
    }

    /// Same-scale groups from the taps `[H, I1, I2, I3, H~]`.
    pub fn groups(&self, tape: &mut Tape, taps: [Var; 5]) -> [Var; 3] {
        let [h, i1, i2, i3, h_tilde] = taps;
        let e1 = self.combine(tape, h, h_tilde);
        let e2 = self.combine(tape, i1, i3);
        [e1, e2, i2]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pairs: &[FactorizedPair]) -> Result<ScaleStack> {
        let (c, h) = self.fuse_modalities(tape, store, pairs)?;
        self.refine(tape, store, c, h)
    }
}

/// Detached copy of the three scale groups, e.g. teacher targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleValues(pub [Tensor; 3]);

impl ScaleValues {
    pub fn from_stack(tape: &Tape, stack: &ScaleStack) -> Self {
        Self(stack.e.map(|v| tape.value(v).clone()))
    }

    pub fn to_constants(&self, tape: &mut Tape) -> [Var; 3] {
        [0, 1, 2].map(|i| tape.constant(self.0[i].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (ParamStore, Fusion, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "fusion", d, ScaleCombine::Mean, &mut rng);
        (store, f, rng)
    }

    fn pairs(tape: &mut Tape, d: usize, rng: &mut ChaCha8Rng) -> Vec<FactorizedPair> {
        (0..3).map(|_| FactorizedPair { q: tape.constant(Tensor::randn(2, d, 1.0, rng)), u: tape.constant(Tensor::randn(2, d, 1.0, rng)) }).collect()
    }

    #[test]
    fn dimension_chain() {
        for d in [1, 4, 8] {
            let (store, f, mut rng) = setup(d);
            let mut tape = Tape::new();
            let p = pairs(&mut tape, d, &mut rng);
            let s = f.forward(&mut tape, &store, &p).unwrap();
            let widths: Vec<usize> = [s.h, s.i1, s.i2, s.i3, s.h_tilde].iter().map(|&v| tape.shape(v).1).collect();
            assert_eq!(widths, vec![3 * d, 2 * d, d, 2 * d, 3 * d]);
            assert_eq!(s.e.map(|v| tape.shape(v).1), scale_dims(d));
        }
    }

    #[test]
    fn zero_inputs_give_zero_joint_representation() {
        let (store, f, _) = setup(8);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(2, 8));
        let p = vec![FactorizedPair { q: z, u: z }; 3];
        let (_, h) = f.fuse_modalities(&mut tape, &store, &p).unwrap();
        assert_eq!(tape.shape(h), (2, 24));
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_bias_taps() {
        let (mut store, f, mut rng) = setup(4);
        for (i, l) in f.refine.iter().enumerate() {
            l.zero(&mut store);
            *store.get_mut(l.bias) = Tensor::full(1, l.out_dim, i as f64 + 1.0);
        }
        let mut tape = Tape::new();
        let p = pairs(&mut tape, 4, &mut rng);
        let s = f.forward(&mut tape, &store, &p).unwrap();
        assert!(tape.value(s.i1).data().iter().all(|&v| v == 1.0));
        assert!(tape.value(s.h_tilde).data().iter().all(|&v| v == 4.0));
        assert_eq!(tape.value(s.e[2]), tape.value(s.i2));
    }

    #[test]
    fn e2_is_mean_of_i1_and_i3() {
        let (store, f, mut rng) = setup(8);
        let mut tape = Tape::new();
        let p = pairs(&mut tape, 8, &mut rng);
        let s = f.forward(&mut tape, &store, &p).unwrap();
        let expect = tape.value(s.i1).zip_map(tape.value(s.i3), |a, b| (a + b) / 2.0);
        assert!(tape.value(s.e[1]).max_abs_diff(&expect) < 1e-7);
    }

    #[test]
    fn modality_order_matters() {
        let (store, f, mut rng) = setup(4);
        let mut tape = Tape::new();
        let p = pairs(&mut tape, 4, &mut rng);
        let (_, h) = f.fuse_modalities(&mut tape, &store, &p).unwrap();
        let rev = vec![p[2], p[1], p[0]];
        let (_, h2) = f.fuse_modalities(&mut tape, &store, &rev).unwrap();
        assert!(tape.value(h).max_abs_diff(tape.value(h2)) > 1e-9);
    }

    #[test]
    fn group_provenance() {
        let (store, f, mut rng) = setup(4);
        let mut tape = Tape::new();
        let p = pairs(&mut tape, 4, &mut rng);
        let s = f.forward(&mut tape, &store, &p).unwrap();
        let taps = [s.h, s.i1, s.i2, s.i3, s.h_tilde];
        let base = s.e.map(|v| tape.value(v).clone());
        // Which groups move when tap k alone is perturbed.
        let expected = [[true, false, false], [false, true, false], [false, false, true], [false, true, false], [true, false, false]];
        for (k, want) in expected.iter().enumerate() {
            let mut perturbed = taps;
            perturbed[k] = tape.add_scalar(taps[k], 0.25);
            let e = f.groups(&mut tape, perturbed);
            let moved: Vec<bool> = (0..3).map(|g| tape.value(e[g]).max_abs_diff(&base[g]) > 0.0).collect();
            assert_eq!(&moved[..], want, "tap {k}");
        }
    }

    #[test]
    fn combine_variants() {
        let (store, mut f, mut rng) = setup(2);
        let mut tape = Tape::new();
        let p = pairs(&mut tape, 2, &mut rng);
        f.combine = ScaleCombine::First;
        let s = f.forward(&mut tape, &store, &p).unwrap();
        assert_eq!(tape.value(s.e[0]), tape.value(s.h));
        f.combine = ScaleCombine::Sum;
        let s = f.forward(&mut tape, &store, &p).unwrap();
        let expect = tape.value(s.h).zip_map(tape.value(s.h_tilde), |a, b| a + b);
        assert_eq!(tape.value(s.e[0]), &expect);
    }

    #[test]
    fn wrong_pair_count_is_an_error() {
        let (store, f, mut rng) = setup(2);
        let mut tape = Tape::new();
        let p = pairs(&mut tape, 2, &mut rng);
        assert!(f.fuse_modalities(&mut tape, &store, &p[..2]).is_err());
    }
}
