//! Tape-based losses against explicit per-sample loops.

mod common;

use common::oracle::{cat, frf_gap, mlp, randomize_biases};
use hrlf_core::autograd::{ParamStore, Tape, Var};
use hrlf_core::frf::DistanceKind;
use hrlf_core::hal::{loss_hal_discriminator, loss_hal_generator, ScaleDiscriminators, PROB_EPS};
use hrlf_core::hmi::{derangement, loss_hmi, HmiNets};
use hrlf_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-6;

#[test]
fn frf_losses_match_nested_loops() {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        for distance in [DistanceKind::Euclidean, DistanceKind::SquaredEuclidean] {
            let gap = frf_gap(seed, distance);
            assert!(gap < TOL, "seed {seed} {distance:?}: gap {gap:.3e}");
            worst = worst.max(gap);
        }
    }
    println!("FRF oracle: worst abs diff {worst:.2e}");
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn hmi_and_hal_match_nested_loops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = 2 + seed as usize % 3;
        let batch = 3 + seed as usize % 4;
        let dims = [3 * d, 2 * d, d];
        let teacher: [Tensor; 3] = dims.map(|w| Tensor::randn(batch, w, 1.0, &mut rng));
        let student: [Tensor; 3] = dims.map(|w| Tensor::randn(batch, w, 1.0, &mut rng));
        let perms = [derangement(batch, &mut rng), derangement(batch, &mut rng), derangement(batch, &mut rng)];

        let mut sstore = ParamStore::new();
        let stats = HmiNets::new(&mut sstore, d, &mut rng);
        randomize_biases(&mut sstore, &mut rng);
        let mut dstore = ParamStore::new();
        let discs = ScaleDiscriminators::new(&mut dstore, d, &mut rng);
        randomize_biases(&mut dstore, &mut rng);

        let mut tape = Tape::new();
        let t: [Var; 3] = [0, 1, 2].map(|i| tape.constant(teacher[i].clone()));
        let s: [Var; 3] = [0, 1, 2].map(|i| tape.constant(student[i].clone()));
        let hmi = loss_hmi(&mut tape, &sstore, &stats, &t, &s, &perms).unwrap();
        let gen = loss_hal_generator(&mut tape, &dstore, &discs, &s).unwrap();
        let disc = loss_hal_discriminator(&mut tape, &dstore, &discs, &t, &s).unwrap();

        let b = batch as f64;
        let (mut want_hmi, mut want_gen, mut want_disc) = (0.0, 0.0, 0.0);
        for i in 0..3 {
            let net = &stats.nets[i].mlp;
            let (mut joint, mut marg) = (0.0, 0.0);
            for r in 0..batch {
                joint += -softplus(-mlp(&sstore, net, &cat(teacher[i].row(r), student[i].row(r)))[0]);
                marg += -softplus(mlp(&sstore, net, &cat(teacher[i].row(r), student[i].row(perms[i][r])))[0]);
            }
            want_hmi -= joint / b + marg / b;

            let dnet = &discs.discs[i].mlp;
            let prob = |x: &[f64]| sigmoid(mlp(&dstore, dnet, x)[0]).clamp(PROB_EPS, 1.0 - PROB_EPS);
            for r in 0..batch {
                let ps = prob(student[i].row(r));
                let pt = prob(teacher[i].row(r));
                want_gen -= ps.ln() / b;
                want_disc += (1.0 - ps).ln() / b + pt.ln() / b;
            }
        }
        for (name, got, want) in [("hmi", hmi, want_hmi), ("hal gen", gen, want_gen), ("hal disc", disc, want_disc)] {
            let got = tape.item(got);
            assert!((got - want).abs() < TOL, "seed {seed} {name}: {got} vs {want}");
        }
    }
}
