//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion fails.

mod common;

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{gradcheck, oracle, FdReport};
use hrlf_core::autograd::{ParamStore, Tape, Var};
use hrlf_core::data::{generate_synthetic, SplitSize};
use hrlf_core::eval::{accuracy, factorization_signal, run_condition_grid, run_ratio_sweep, sweep_ratios};
use hrlf_core::frf::DistanceKind;
use hrlf_core::hal::{loss_hal_discriminator, ScaleDiscriminators};
use hrlf_core::hmi::{derangement, loss_hmi, mi_lower_bound, HmiNets, StatisticsNet};
use hrlf_core::msm::{apply_msm, condition_mask, dropped_frames};
use hrlf_core::nn::{Adam, AdamConfig};
use hrlf_core::trainer::{loss_task, predict, train_student, train_teacher, EpochRecord, Masking};
use hrlf_core::{
    Ablation, EncoderConfig, Label, MissingSpec, ModalityKind, ModalityShape, ModelConfig, MultimodalSample, NetworkBundle, Metric,
    SyntheticConfig, TaskKind, TestingCondition, Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const TEACHER_EPOCHS: usize = 30;
const STUDENT_EPOCHS: usize = 60;

/// Optimum of the Jensen-Shannon bound for `Y = X` on a fair coin: the
/// statistic `ln(p_joint / p_marginal)` gives `ln 2` on the diagonal and
/// `-inf` off it, so the bound is `-ln 1.5 - ln 3 / 2`.
const MI_TOY_OPTIMUM: f64 = -0.954_771;
const MI_TOY_BASELINE: f64 = -2.0 * LN_2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed < limit, format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

fn analytic_constants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (b, d) = (8, 4);
    let dims = [3 * d, 2 * d, d];
    let mut tape = Tape::new();
    let t: [Var; 3] = dims.map(|w| tape.constant(Tensor::randn(b, w, 1.0, &mut rng)));
    let s: [Var; 3] = dims.map(|w| tape.constant(Tensor::randn(b, w, 1.0, &mut rng)));

    let mut sstore = ParamStore::new();
    let stats = HmiNets::new(&mut sstore, d, &mut rng);
    stats.nets.iter().for_each(|n| n.mlp.zero(&mut sstore));
    let perms = [derangement(b, &mut rng), derangement(b, &mut rng), derangement(b, &mut rng)];
    let hmi = loss_hmi(&mut tape, &sstore, &stats, &t, &s, &perms).unwrap();

    let mut dstore = ParamStore::new();
    let discs = ScaleDiscriminators::new(&mut dstore, d, &mut rng);
    discs.discs.iter().for_each(|n| n.mlp.zero(&mut dstore));
    let hal = loss_hal_discriminator(&mut tape, &dstore, &discs, &t, &s).unwrap();

    let logits = tape.constant(Tensor::zeros(b, 4));
    let labels: Vec<Label> = (0..b).map(|i| Label::Class(i % 4)).collect();
    let ce = loss_task(&mut tape, logits, &labels, TaskKind::Classification { num_classes: 4 }).unwrap();

    let checks = [(tape.item(hmi), 6.0 * LN_2), (tape.item(hal), -6.0 * LN_2), (tape.item(ce), 4f64.ln())];
    let worst = checks.iter().map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    outcome(
        worst <= 1e-6,
        format!("L_HMI {:.9}, L_HAL disc {:.9}, CE(K=4) {:.9}, max deviation {worst:.1e}", checks[0].0, checks[1].0, checks[2].0),
    )
}

fn gradient_integrity() -> Outcome {
    let reports: Vec<(&str, FdReport)> = vec![
        ("FRF", gradcheck::frf_live()),
        ("FRF detached", gradcheck::frf_frozen_targets()),
        ("HMI", gradcheck::hmi()),
        ("HAL gen", gradcheck::hal_generator()),
        ("HAL disc", gradcheck::hal_discriminator()),
        ("KL", gradcheck::kl(1.0)),
        ("task", gradcheck::task()),
        ("total", gradcheck::total()),
        ("encoder", gradcheck::encoder()),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, r) in &reports {
        pass &= r.max_rel < 1e-6 && r.nonzero > 0;
        parts.push(format!("{name} {:.1e}", r.max_rel));
    }
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    outcome(pass, format!("{checked} entries, max rel err per loss: {}", parts.join(", ")))
}

fn loss_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        for distance in [DistanceKind::Euclidean, DistanceKind::SquaredEuclidean] {
            worst = worst.max(oracle::frf_gap(seed, distance));
        }
    }
    outcome(worst <= 1e-6, format!("20 seeds x 2 distances, max abs diff {worst:.1e}"))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Exact value of the bound for the trained statistic over the four cells.
fn mi_toy_bound(store: &ParamStore, net: &StatisticsNet) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(4, 1, vec![0.0, 0.0, 1.0, 1.0]));
    let y = tape.constant(Tensor::from_vec(4, 1, vec![0.0, 1.0, 0.0, 1.0]));
    let t = net.score(&mut tape, store, x, y);
    let t = tape.value(t).data().to_vec();
    let joint = 0.5 * (-softplus(-t[0]) - softplus(-t[3]));
    let marginal = 0.25 * t.iter().map(|&v| softplus(v)).sum::<f64>();
    joint - marginal
}

fn mi_toy() -> Outcome {
    const BATCH: usize = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let net = StatisticsNet::new(&mut store, "toy", 1, 16, &mut rng);
    let mut adam = Adam::new(AdamConfig { lr: 5e-3, ..Default::default() }, &store);
    for _ in 0..3000 {
        let bits: Vec<f64> = (0..BATCH).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let perm = derangement(BATCH, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(BATCH, 1, bits.clone()));
        let y = tape.constant(Tensor::from_vec(BATCH, 1, bits));
        let bound = mi_lower_bound(&mut tape, &store, &net, x, y, &perm).unwrap();
        let loss = tape.neg(bound);
        tape.backward(loss);
        let grads = tape.grads_for(&store);
        adam.step(&mut store, &grads);
    }
    let bound = mi_toy_bound(&store, &net);
    let gain = bound - MI_TOY_BASELINE;
    let gap = (bound - MI_TOY_OPTIMUM).abs();
    outcome(
        gain >= 0.2 && gap <= 0.05,
        format!("bound {bound:.4}, baseline {MI_TOY_BASELINE:.4} (+{gain:.3}), optimum {MI_TOY_OPTIMUM:.4} (gap {gap:.4})"),
    )
}

fn random_sample(rng: &mut ChaCha8Rng) -> MultimodalSample {
    let features = [0, 1, 2].map(|_| {
        let (t, d) = (rng.random_range(1..=40), rng.random_range(1..=6));
        // Strictly nonzero entries, so a zero row can only come from masking.
        Tensor::from_vec(t, d, (0..t * d).map(|_| rng.random_range(0.5..2.0) * if rng.random() { 1.0 } else { -1.0 }).collect())
    });
    MultimodalSample { features, label: Label::Class(0) }
}

fn zero_rows(x: &Tensor) -> usize {
    (0..x.rows()).filter(|&r| x.row(r).iter().all(|&v| v == 0.0)).count()
}

fn msm_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = sweep_ratios();
    let mut failures = Vec::new();
    for trial in 0..1000 {
        let sample = random_sample(&mut rng);
        let condition = TestingCondition::ALL[rng.random_range(0..7)];
        let p = grid[trial % grid.len()];
        let spec = MissingSpec::uniform(p, condition, rng.random());
        let masked = apply_msm(&sample, &spec).unwrap();
        let cond_only = condition_mask(&sample, condition);
        for kind in ModalityKind::ALL {
            let (orig, got, keep) = (sample.modality(kind), masked.sample.modality(kind), condition.contains(kind));
            let t = orig.rows();
            let want = if keep { (p * t as f64).round() as usize } else { t };
            let ok_count = zero_rows(got) == want && dropped_frames(p, t) == (p * t as f64).round() as usize;
            let ok_mask = (0..t).all(|r| {
                let kept = masked.frame_mask[kind.index()][r];
                if kept { got.row(r) == orig.row(r) } else { got.row(r).iter().all(|&v| v == 0.0) }
            });
            let cond = cond_only.modality(kind);
            let ok_cond = if keep { cond == orig } else { cond.data().iter().all(|&v| v == 0.0) };
            if !(ok_count && ok_mask && ok_cond) {
                failures.push(format!("trial {trial} {} p={p}", kind.name()));
            }
        }
    }
    outcome(failures.is_empty(), format!("1000 trials x 3 modalities, {} mismatches {:?}", failures.len(), failures.iter().take(3).collect::<Vec<_>>()))
}

struct SeedRun {
    teacher_acc: f64,
    sweep_p0: f64,
    sweep_p1: f64,
    full_avg: f64,
    no_frf_avg: f64,
    teacher_margin: f64,
    student_margin: f64,
}

fn run_seed(seed: u64) -> SeedRun {
    let data = generate_synthetic(&SyntheticConfig { seed, ..Default::default() }).unwrap();
    let model = ModelConfig::default();
    let (train, test) = (data.split("train").unwrap(), data.split("test").unwrap());
    let (teacher, _) = train_teacher(&data, &model, &TrainConfig { seed, epochs: TEACHER_EPOCHS, ..Default::default() }).unwrap();
    let labels: Vec<Label> = train.iter().map(|s| s.label).collect();
    let out = predict(&teacher, train, Masking::Condition(TestingCondition::LAV)).unwrap();
    let teacher_acc = accuracy(&out, &labels, data.task()).unwrap();

    let student = |ablation| {
        train_student(&data, &teacher, &TrainConfig { seed, epochs: STUDENT_EPOCHS, ablation, ..Default::default() }).unwrap().student
    };
    let full = student(Ablation::default());
    let no_frf = student(Ablation { use_frf: false, ..Default::default() });
    let sweep = run_ratio_sweep(&full, test, Metric::F1Binary, TestingCondition::LAV, seed).unwrap();
    SeedRun {
        teacher_acc,
        sweep_p0: sweep.value_at(0.0).unwrap(),
        sweep_p1: sweep.value_at(1.0).unwrap(),
        full_avg: run_condition_grid(&full, test, Metric::F1Binary).unwrap().avg,
        no_frf_avg: run_condition_grid(&no_frf, test, Metric::F1Binary).unwrap().avg,
        teacher_margin: factorization_signal(&teacher, test).unwrap().margin(),
        student_margin: factorization_signal(&full, test).unwrap().margin(),
    }
}

fn end_to_end(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let acc_ok = runs.iter().all(|r| r.teacher_acc >= 0.95);
    let sweep_ok = runs.iter().all(|r| r.sweep_p0 >= r.sweep_p1);
    let frf_wins = runs.iter().filter(|r| r.full_avg >= r.no_frf_avg).count();
    let (time_ok, time) = within(elapsed, Duration::from_secs(15 * 60));
    let per_seed: Vec<String> = SEEDS
        .iter()
        .zip(runs)
        .map(|(s, r)| {
            format!(
                "seed {s}: teacher acc {:.3}, sweep p=0 {:.3} / p=1 {:.3}, Avg F1 full {:.3} vs w/o FRF {:.3}",
                r.teacher_acc, r.sweep_p0, r.sweep_p1, r.full_avg, r.no_frf_avg
            )
        })
        .collect();
    outcome(
        acc_ok && sweep_ok && frf_wins >= 2 && time_ok,
        format!(
            "(a) {} (b) {} (c) {frf_wins}/3 seeds, {time}\n    {}",
            if acc_ok { "ok" } else { "FAIL" },
            if sweep_ok { "ok" } else { "FAIL" },
            per_seed.join("\n    ")
        ),
    )
}

fn factorization(runs: &[SeedRun]) -> Outcome {
    let hits = runs.iter().filter(|r| r.student_margin >= 0.05).count();
    let student: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.student_margin)).collect();
    let teacher: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.teacher_margin)).collect();
    outcome(hits >= 2, format!("student margins [{}] ({hits}/3 >= 0.05), teacher margins [{}]", student.join(", "), teacher.join(", ")))
}

fn small_data() -> SyntheticConfig {
    SyntheticConfig {
        splits: vec![SplitSize { name: "train".into(), n_samples: 64 }, SplitSize { name: "test".into(), n_samples: 32 }],
        language: ModalityShape { seq_len: 6, dim: 5 },
        audio: ModalityShape { seq_len: 6, dim: 4 },
        visual: ModalityShape { seq_len: 6, dim: 3 },
        seed: 3,
        ..Default::default()
    }
}

fn trajectory_gap(a: &[EpochRecord], b: &[EpochRecord]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            let (x, y) = (x.loss, y.loss);
            [x.total - y.total, x.task - y.task, x.frf.total - y.frf.total, x.hmi - y.hmi, x.hal_gen - y.hal_gen, x.hal_disc - y.hal_disc, x.kl - y.kl]
        })
        .map(f64::abs)
        .fold(0.0, f64::max)
}

fn bits(b: &NetworkBundle) -> Vec<u64> {
    b.store.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

fn determinism() -> Outcome {
    let data = generate_synthetic(&small_data()).unwrap();
    let model = ModelConfig { encoder: EncoderConfig { d_model: 4, ff_dim: 8, ..Default::default() }, ..Default::default() };
    let cfg = TrainConfig { seed: 11, epochs: 3, batch_size: 16, ..Default::default() };
    let (t1, h1) = train_teacher(&data, &model, &cfg).unwrap();
    let (t2, h2) = train_teacher(&data, &model, &cfg).unwrap();
    let teacher_gap = trajectory_gap(&h1, &h2);

    let before = bits(&t1);
    let s1 = train_student(&data, &t1, &cfg).unwrap();
    let s2 = train_student(&data, &t1, &cfg).unwrap();
    let student_gap = trajectory_gap(&s1.history, &s2.history);
    let frozen = bits(&t1) == before && before == bits(&t2);
    outcome(
        teacher_gap <= 1e-6 && student_gap <= 1e-6 && frozen,
        format!("teacher trajectory gap {teacher_gap:.1e}, student trajectory gap {student_gap:.1e}, teacher bit-identical: {frozen}"),
    )
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    if let Some(limit) = limit {
        let (ok, time) = within(start.elapsed(), limit);
        o.pass &= ok;
        o.detail = format!("{}, {time}", o.detail);
    }
    o
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n, name, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "analytic constants", timed(Some(Duration::from_secs(1)), analytic_constants));
    report(2, "gradient integrity", timed(Some(Duration::from_secs(30)), gradient_integrity));
    report(3, "brute-force loss oracles", timed(Some(Duration::from_secs(5)), loss_oracles));
    report(4, "MI estimator sanity", timed(Some(Duration::from_secs(60)), mi_toy));
    report(5, "MSM exactness", timed(Some(Duration::from_secs(5)), msm_exactness));

    let start = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    report(6, "end-to-end desk-scale behavior", end_to_end(&runs, start.elapsed()));
    report(7, "determinism and freezing", timed(None, determinism));
    report(8, "factorization signal", factorization(&runs));

    let failed: Vec<u32> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
