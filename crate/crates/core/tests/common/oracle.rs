//! Explicit per-sample loops that read raw weights out of the store.

use hrlf_core::autograd::{ParamStore, Tape, Var};
use hrlf_core::frf::{DistanceKind, FactorizedPair, FrfParams};
use hrlf_core::nn::Mlp;
use hrlf_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn mlp(store: &ParamStore, net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, layer) in net.layers.iter().enumerate() {
        let w = store.get(layer.weight);
        let b = store.get(layer.bias);
        let mut out = vec![0.0; layer.out_dim];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = b.get(0, j);
            for (k, &hk) in h.iter().enumerate() {
                acc += hk * w.get(k, j);
            }
            *o = acc;
        }
        if i + 1 < net.layers.len() || net.relu_output {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = out;
    }
    h
}

pub fn dist(kind: DistanceKind, a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match kind {
        DistanceKind::Euclidean => sq.sqrt(),
        DistanceKind::SquaredEuclidean => sq,
    }
}

pub fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

/// `(self, cross, recon)` by direct enumeration of modality pairs and samples.
pub fn frf_oracle(store: &ParamStore, p: &FrfParams, z: &[Tensor; 3]) -> (f64, f64, f64) {
    let n = 3;
    let batch = z[0].rows();
    let (mut self_sum, mut cross_sum, mut recon_sum) = (0.0, 0.0, 0.0);
    for s in 0..batch {
        let q: Vec<Vec<f64>> = (0..n).map(|m| mlp(store, &p.sentiment[m], z[m].row(s))).collect();
        let u: Vec<Vec<f64>> = (0..n).map(|m| mlp(store, &p.specific[m], z[m].row(s))).collect();
        for a in 0..n {
            for b in 0..n {
                // Translation into b's domain from a's sentiment part.
                let zbar = mlp(store, &p.decoder, &cat(&q[a], &u[b]));
                let d = dist(p.distance, &zbar, z[b].row(s));
                if a == b {
                    self_sum += d;
                } else {
                    cross_sum += d;
                }
                // Reconstruction: Q-bar_{b a} = E^S_a(D(Q_b, U_a)) against Q_a.
                let rec = mlp(store, &p.decoder, &cat(&q[b], &u[a]));
                let qbar = mlp(store, &p.sentiment[a], &rec);
                recon_sum += dist(p.distance, &qbar, &q[a]);
            }
        }
    }
    let b = batch as f64;
    (self_sum / (n as f64 * b), cross_sum / ((n * n - n) as f64 * b), recon_sum / ((n * n) as f64 * b))
}

pub fn random_z(rng: &mut ChaCha8Rng, batch: usize, d: usize) -> [Tensor; 3] {
    [0, 1, 2].map(|_| Tensor::randn(batch, d, 1.0, rng))
}

pub fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("bias")).collect();
    for id in ids {
        let (r, c) = store.get(id).shape();
        *store.get_mut(id) = Tensor::randn(r, c, 0.3, rng);
    }
}

/// Largest gap between the tape losses `[self, cross, recon, total]` and the
/// loop oracle on a random instance (d in 3..=5, batch in 2..=6).
pub fn frf_gap(seed: u64, distance: DistanceKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 3 + (seed as usize % 3);
    let batch = 2 + seed as usize % 5;
    let mut store = ParamStore::new();
    let p = FrfParams::new(&mut store, "frf", d, distance, false, &mut rng);
    randomize_biases(&mut store, &mut rng);
    let z = random_z(&mut rng, batch, d);

    let mut tape = Tape::new();
    let zv: [Var; 3] = [0, 1, 2].map(|m| tape.constant(z[m].clone()));
    let pairs: [FactorizedPair; 3] = p.factorize_all(&mut tape, &store, &zv);
    let loss = p.loss_frf(&mut tape, &store, &zv, &pairs);
    let (s, c, r) = frf_oracle(&store, &p, &z);
    let got = [tape.item(loss.trans.self_term), tape.item(loss.trans.cross_term), tape.item(loss.recon), tape.item(loss.total)];
    assert!(got.iter().all(|&v| v >= 0.0), "negative FRF loss {got:?}");
    got.iter().zip([s, c, r, s + c + r]).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max)
}
