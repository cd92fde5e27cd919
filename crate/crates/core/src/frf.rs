//! Fine-grained representation factorization.
//!
//! Each modality representation `Z_m` is split into a sentiment-relevant part
//! `Q_m = E^S_m(Z_m)` and a modality-specific part `U_m = E^M_m(Z_m)`. A
//! shared decoder translates `(Q_a, U_b)` back into the domain of modality
//! `b`; the translation and reconstruction losses below are what force `Q`
//! to carry the information shared across modalities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::data::ModalityKind;
use crate::nn::Mlp;
use crate::tensor::Tensor;

/// Distance used inside the translation and reconstruction losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// `||a - b||_2`
    #[default]
    Euclidean,
    /// `||a - b||_2^2`
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy)]
pub struct FactorizedPair {
    /// Sentiment-relevant representation, `[batch, d]`.
    pub q: Var,
    /// Modality-specific representation, `[batch, d]`.
    pub u: Var,
}

#[derive(Debug, Clone)]
pub struct FrfParams {
    pub sentiment: [Mlp; 3],
    pub specific: [Mlp; 3],
    pub decoder: Mlp,
    pub distance: DistanceKind,
    /// Treat `Z` (translation) and `Q` (reconstruction) targets as constants.
    pub detach_targets: bool,
}

/// Values the FRF losses regress onto.
#[derive(Debug, Clone, PartialEq)]
pub struct FrfTargets {
    pub z: [Tensor; 3],
    pub q: [Tensor; 3],
}

impl FrfTargets {
    pub fn capture(tape: &Tape, z: &[Var; 3], pairs: &[FactorizedPair; 3]) -> Self {
        Self { z: z.map(|v| tape.value(v).clone()), q: [0, 1, 2].map(|m| tape.value(pairs[m].q).clone()) }
    }

    fn constants(&self, tape: &mut Tape) -> ([Var; 3], [Var; 3]) {
        let z = [0, 1, 2].map(|m| tape.constant(self.z[m].clone()));
        let q = [0, 1, 2].map(|m| tape.constant(self.q[m].clone()));
        (z, q)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransLoss {
    pub self_term: Var,
    pub cross_term: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FrfLoss {
    pub trans: TransLoss,
    pub recon: Var,
    pub total: Var,
}

impl FrfParams {
    /// `E^S`, `E^M`: d -> d -> d with ReLU after both layers.
    /// `D_r`: 2d -> 2d -> d with a linear output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        distance: DistanceKind,
        detach_targets: bool,
        rng: &mut R,
    ) -> Self {
        let mk = |store: &mut ParamStore, rng: &mut R, part: &str, m: ModalityKind| {
            Mlp::new(store, &format!("{name}.{part}.{}", m.name()), &[d, d, d], false, rng)
        };
        let sentiment = ModalityKind::ALL.map(|m| mk(store, rng, "sentiment", m));
        let specific = ModalityKind::ALL.map(|m| mk(store, rng, "specific", m));
        let decoder = Mlp::new(store, &format!("{name}.decoder"), &[2 * d, 2 * d, d], false, rng);
        Self { sentiment, specific, decoder, distance, detach_targets }
    }

    pub fn factorize(&self, tape: &mut Tape, store: &ParamStore, m: ModalityKind, z: Var) -> FactorizedPair {
        let q = self.sentiment[m.index()].forward(tape, store, z);
        let u = self.specific[m.index()].forward(tape, store, z);
        FactorizedPair { q, u }
    }

    pub fn factorize_all(&self, tape: &mut Tape, store: &ParamStore, z: &[Var; 3]) -> [FactorizedPair; 3] {
        ModalityKind::ALL.map(|m| self.factorize(tape, store, m, z[m.index()]))
    }

    /// `D_r(Q_a || U_b)`: reconstruction in the domain of the modality `U_b`
    /// came from.
    pub fn translate(&self, tape: &mut Tape, store: &ParamStore, q_src: Var, u_dst: Var) -> Var {
        let cat = tape.hcat(&[q_src, u_dst]);
        self.decoder.forward(tape, store, cat)
    }

    /// Per-sample distance `[batch, 1]`.
    fn distance(&self, tape: &mut Tape, a: Var, b: Var) -> Var {
        let diff = tape.sub(a, b);
        match self.distance {
            DistanceKind::Euclidean => tape.row_norm(diff),
            DistanceKind::SquaredEuclidean => {
                let sq = tape.square(diff);
                tape.sum_cols(sq)
            }
        }
    }

    /// Self term averages the 3 pairs `(a, a)`, cross term the 6 ordered
    /// pairs `(a, b)` with `a != b`; both are batch means. `z` are the
    /// reconstruction targets.
    pub fn loss_trans(&self, tape: &mut Tape, store: &ParamStore, z: &[Var; 3], pairs: &[FactorizedPair; 3]) -> TransLoss {
        let n = pairs.len();
        let mut self_terms = Vec::with_capacity(n);
        let mut cross_terms = Vec::with_capacity(n * n - n);
        for a in 0..n {
            for b in 0..n {
                let rec = self.translate(tape, store, pairs[a].q, pairs[b].u);
                let dist = self.distance(tape, rec, z[b]);
                let mean = tape.mean(dist);
                if a == b { self_terms.push(mean) } else { cross_terms.push(mean) }
            }
        }
        let s = tape.add_all(&self_terms);
        let self_term = tape.scale(s, 1.0 / n as f64);
        let c = tape.add_all(&cross_terms);
        let cross_term = tape.scale(c, 1.0 / (n * n - n) as f64);
        let total = tape.add(self_term, cross_term);
        TransLoss { self_term, cross_term, total }
    }

    /// Averages, over all 9 ordered pairs `(b, a)`, the distance between
    /// `E^S_a(D_r(Q_b || U_a))` and the target `q_target[a]` (normally `Q_a`).
    pub fn loss_recon(&self, tape: &mut Tape, store: &ParamStore, pairs: &[FactorizedPair; 3], q_target: &[Var; 3]) -> Var {
        let n = pairs.len();
        let mut terms = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                let rec = self.translate(tape, store, pairs[b].q, pairs[a].u);
                let q_bar = self.sentiment[a].forward(tape, store, rec);
                let dist = self.distance(tape, q_bar, q_target[a]);
                terms.push(tape.mean(dist));
            }
        }
        let s = tape.add_all(&terms);
        tape.scale(s, 1.0 / (n * n) as f64)
    }

    /// `L_trans + L_recon`. With `detach_targets` the current `Z` and `Q`
    /// values are used as constant targets.
    pub fn loss_frf(&self, tape: &mut Tape, store: &ParamStore, z: &[Var; 3], pairs: &[FactorizedPair; 3]) -> FrfLoss {
        if self.detach_targets {
            let targets = FrfTargets::capture(tape, z, pairs);
            self.loss_frf_with_targets(tape, store, pairs, &targets)
        } else {
            let q = [pairs[0].q, pairs[1].q, pairs[2].q];
            self.assemble(tape, store, z, pairs, &q)
        }
    }

    /// FRF loss against fixed targets.
    pub fn loss_frf_with_targets(&self, tape: &mut Tape, store: &ParamStore, pairs: &[FactorizedPair; 3], targets: &FrfTargets) -> FrfLoss {
        let (z, q) = targets.constants(tape);
        self.assemble(tape, store, &z, pairs, &q)
    }

    fn assemble(&self, tape: &mut Tape, store: &ParamStore, z: &[Var; 3], pairs: &[FactorizedPair; 3], q: &[Var; 3]) -> FrfLoss {
        let trans = self.loss_trans(tape, store, z, pairs);
        let recon = self.loss_recon(tape, store, pairs, q);
        let total = tape.add(trans.total, recon);
        FrfLoss { trans, recon, total }
    }
}
