mod common;

use std::sync::Arc;

use common::{max_abs_diff, state};
use fedco::algorithms::{run, sample_cohort, Algorithm, HyperParams, LocalWork, RunOptions, TraceLevel};
use fedco::baselines::{minibatch_prox_da, CoupledSampler};
use fedco::diagnostics::{
    dual_discrepancy, estimate_constants, rank_metrics, sparsity_metrics, HeterogeneityStats, RANK_THRESHOLD,
};
use fedco::problems::{full_grad, stochastic_grad};
use fedco::{
    bregman_divergence, composite_mirror_map, generalized_bregman, DistanceGen, GeneratorSpec, ParamState, Regularizer,
    Shape, Task,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

const H: DistanceGen = DistanceGen::Euclidean;

fn flat(v: Vec<f64>) -> ParamState {
    state(Shape::Flat(v.len()), v)
}

/// Any regularizer kind on a flat vector of length `d`, or nuclear on a
/// matrix shape with `rows·cols = d` when `d` factors as 2×(d/2).
fn regularizer(d: usize) -> impl Strategy<Value = Regularizer> {
    let nuclear = if d.is_multiple_of(2) {
        (0.05..2.0f64).prop_map(move |lambda| Regularizer::Nuclear { lambda, rows: 2, cols: d / 2 }).boxed()
    } else {
        (0.05..2.0f64).prop_map(|lambda| Regularizer::L1 { lambda }).boxed()
    };
    prop_oneof![
        Just(Regularizer::Zero),
        (0.05..2.0f64).prop_map(|lambda| Regularizer::L1 { lambda }),
        nuclear,
        (0.2..3.0f64).prop_map(|radius| Regularizer::L2Ball { radius }),
        (0.2..3.0f64).prop_map(|radius| Regularizer::L1Ball { radius }),
        (-2.0..0.5f64, 0.1..2.0f64).prop_map(|(lo, w)| Regularizer::Box { lo, hi: lo + w }),
    ]
}

fn shaped(psi: &Regularizer, v: Vec<f64>) -> ParamState {
    match *psi {
        Regularizer::Nuclear { rows, cols, .. } => state(Shape::Matrix(rows, cols), v),
        _ => flat(v),
    }
}

fn case() -> impl Strategy<Value = (Regularizer, Vec<f64>, Vec<f64>, f64)> {
    (1usize..=8).prop_flat_map(|d| {
        (regularizer(d), prop::collection::vec(-3.0..3.0f64, d), prop::collection::vec(-3.0..3.0f64, d), 0.0..2.0f64)
    })
}

fn objective(psi: &Regularizer, eta: f64, z: &ParamState, w: &ParamState) -> f64 {
    let pv = psi.value(w).unwrap();
    if pv.is_infinite() {
        return f64::INFINITY;
    }
    -z.dot(w) + eta * pv + H.value(w)
}

proptest! {
    #[test]
    fn euclidean_bregman_is_half_squared_distance(a in prop::collection::vec(-5.0..5.0f64, 1..10), shift in -5.0..5.0f64) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + shift * ((i % 3) as f64 - 1.0)).collect();
        let (w, u) = (flat(a), flat(b));
        let d = bregman_divergence(H, &w, &u).unwrap();
        let half = 0.5 * w.sub(&u).norm_sq();
        prop_assert!((d - half).abs() <= 1e-12 * half.max(1.0));
    }

    #[test]
    fn mirror_map_minimizes_composite_objective((psi, z, dirs, eta) in case()) {
        let z = shaped(&psi, z);
        let w = composite_mirror_map(H, eta, &psi, &z).unwrap();
        let base = objective(&psi, eta, &z, &w);
        prop_assert!(base.is_finite());
        let n = dirs.len();
        for j in 0..100 {
            // Deterministic spread of unit directions built from the sampled vector.
            let v: Vec<f64> = (0..n).map(|i| ((j * 7 + i * 13) as f64).sin() + dirs[(i + j) % n]).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            for eps in [1e-4, 1e-3] {
                let mut p = w.clone();
                p.axpy(eps / norm, &shaped(&psi, v.clone()));
                prop_assert!(base <= objective(&psi, eta, &z, &p) + 1e-12);
            }
        }
    }

    #[test]
    fn mirror_map_is_nonexpansive((psi, a, b, eta) in case()) {
        let (za, zb) = (shaped(&psi, a), shaped(&psi, b));
        let wa = composite_mirror_map(H, eta, &psi, &za).unwrap();
        let wb = composite_mirror_map(H, eta, &psi, &zb).unwrap();
        prop_assert!(wa.sub(&wb).norm() <= za.sub(&zb).norm() * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn l1_thresholding_is_monotone(z in prop::collection::vec(-3.0..3.0f64, 1..12), t1 in 0.0..2.0f64, dt in 0.0..2.0f64) {
        let z = flat(z);
        let psi = Regularizer::L1 { lambda: 1.0 };
        let w1 = composite_mirror_map(H, t1, &psi, &z).unwrap();
        let w2 = composite_mirror_map(H, t1 + dt, &psi, &z).unwrap();
        for (a, b) in w1.weights().iter().zip(w2.weights()) {
            prop_assert!(b.abs() <= a.abs());
            prop_assert!(*b == 0.0 || b.signum() == a.signum());
        }
    }

    #[test]
    fn svt_is_orthogonally_invariant(
        rows in 1usize..5, cols in 1usize..5,
        seed in any::<u64>(), lambda in 0.05..2.0f64, eta in 0.0..2.0f64,
    ) {
        let mut rng = fedco::rng::stream(seed, fedco::rng::Purpose::Probe, &[]);
        let z = DMatrix::from_fn(rows, cols, |_, _| common::normal_vec(&mut rng, 1, 1.5)[0]);
        let u = DMatrix::from_fn(rows, rows, |_, _| common::normal_vec(&mut rng, 1, 1.0)[0]).qr().q();
        let v = DMatrix::from_fn(cols, cols, |_, _| common::normal_vec(&mut rng, 1, 1.0)[0]).qr().q();
        let psi = Regularizer::Nuclear { lambda, rows, cols };
        let as_state = |m: &DMatrix<f64>| state(Shape::Matrix(rows, cols), m.transpose().as_slice().to_vec());
        let as_matrix = |s: &ParamState| DMatrix::from_row_slice(rows, cols, s.weights());
        let lhs = composite_mirror_map(H, eta, &psi, &as_state(&(&u * &z * v.transpose()))).unwrap();
        let rhs = &u * as_matrix(&composite_mirror_map(H, eta, &psi, &as_state(&z)).unwrap()) * v.transpose();
        prop_assert!(max_abs_diff(lhs.weights(), as_state(&rhs).weights()) <= 1e-9);
    }

    #[test]
    fn generalized_bregman_dominates_bregman((psi, w, z, eta) in case()) {
        let w = composite_mirror_map(H, 0.0, &psi, &shaped(&psi, w)).unwrap();
        let z = shaped(&psi, z);
        let gb = generalized_bregman(H, &psi, eta, &w, &z).unwrap();
        let retrieved = composite_mirror_map(H, eta, &psi, &z).unwrap();
        prop_assert!(gb - bregman_divergence(H, &w, &retrieved).unwrap() >= -1e-9);
    }

    #[test]
    fn rank_is_orthogonally_invariant(seed in any::<u64>(), rank in 0usize..4) {
        let n = 5;
        let mut rng = fedco::rng::stream(seed, fedco::rng::Purpose::Probe, &[1]);
        let mut gauss = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| common::normal_vec(&mut rng, 1, 1.0)[0]);
        let basis_l = gauss(n, n).qr().q();
        let basis_r = gauss(n, n).qr().q();
        let mut s = DMatrix::zeros(n, n);
        for i in 0..rank {
            s[(i, i)] = 1.0 + i as f64;
        }
        let w = &basis_l * s * basis_r.transpose();
        let u = gauss(n, n).qr().q();
        let v = gauss(n, n).qr().q();
        let rotated = &u * &w * v.transpose();
        let to_state = |m: &DMatrix<f64>| state(Shape::Matrix(n, n), m.transpose().as_slice().to_vec());
        let truth = to_state(&DMatrix::identity(n, n));
        let a = rank_metrics(&to_state(&w), &truth, RANK_THRESHOLD).unwrap();
        let b = rank_metrics(&to_state(&rotated), &truth, RANK_THRESHOLD).unwrap();
        prop_assert_eq!(a.rank, rank);
        prop_assert_eq!(b.rank, rank);
    }

    #[test]
    fn f1_is_a_fraction_and_one_iff_supports_match(
        w in prop::collection::vec(prop_oneof![Just(0.0), -2.0..2.0f64], 1..12),
        t in prop::collection::vec(prop_oneof![Just(0.0), Just(1.0)], 12),
    ) {
        let truth = flat(t[..w.len()].to_vec());
        let r = sparsity_metrics(&flat(w.clone()), &truth, 1e-2).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.f1));
        let same = w.iter().zip(truth.weights()).all(|(a, b)| (a.abs() > 1e-2) == (*b != 0.0));
        let nonempty = truth.weights().iter().any(|b| *b != 0.0);
        prop_assert_eq!(r.f1 == 1.0, same && nonempty);
    }

    #[test]
    fn singleton_batches_average_to_full_gradient(seed in 0u64..1000, task_ix in 0usize..3) {
        let task = [Task::Lasso, Task::Logistic, Task::LowRank][task_ix];
        let ds = GeneratorSpec::new(task, 3, 1, 2, 7, seed).generate().unwrap();
        let shard = &ds.clients[0];
        let w = ParamState::new(ds.shape(), common::normal_vec(&mut fedco::rng::stream(seed, fedco::rng::Purpose::Probe, &[]), ds.shape().len(), 1.0), 0.3).unwrap();
        let mut acc = ParamState::zeros(ds.shape());
        for i in 0..shard.len() {
            acc.axpy(1.0 / shard.len() as f64, &stochastic_grad(task, shard, &w, &[i]).unwrap().grad);
        }
        let full = full_grad(task, shard, &w).unwrap().grad;
        prop_assert!(acc.sub(&full).norm() <= 1e-12 * full.norm().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn characteristic_runs_stay_feasible(
        seed in 0u64..100,
        kind in 0usize..3,
        dual in any::<bool>(),
        eta_c in 0.001..0.05f64,
    ) {
        let psi = [
            Regularizer::L2Ball { radius: 0.5 },
            Regularizer::L1Ball { radius: 0.7 },
            Regularizer::Box { lo: -0.1, hi: 0.2 },
        ][kind].clone();
        let alg = if dual { Algorithm::FedDualAvg } else { Algorithm::FedMid };
        let ds = GeneratorSpec::new(Task::Lasso, 6, 2, 4, 12, seed).generate().unwrap();
        let hp = HyperParams { eta_c, eta_s: 1.5, local: LocalWork::Steps(3), rounds: 4, cohort: 3, batch: 4, seed };
        let opts = RunOptions { level: TraceLevel::Diagnostic, keep_traces: true, ..RunOptions::default() };
        let res = run(alg, &ds, &psi, &hp, &opts).unwrap();
        for t in &res.traces {
            prop_assert_eq!(psi.value(&t.after.primal).unwrap(), 0.0);
            for p in t.clients.as_ref().unwrap() {
                for w in &p.primals {
                    prop_assert_eq!(psi.value(w).unwrap(), 0.0);
                }
            }
        }
    }

    #[test]
    fn single_step_rounds_commute_with_minibatch_dual_averaging(
        seed in 0u64..100,
        rounds in 1usize..6,
        eta_s in 0.5..3.0f64,
    ) {
        let ds = GeneratorSpec::preset("lasso-small", seed).unwrap().generate().unwrap();
        let psi = ds.default_regularizer();
        let sampler = CoupledSampler { seed, batch: 4, stride: 1 };
        let eta_c = 0.002;
        let hp = HyperParams { eta_c, eta_s, local: LocalWork::Steps(1), rounds, cohort: ds.num_clients(), batch: 4, seed };
        let opts = RunOptions { sampler: Some(Arc::new(sampler)), ..RunOptions::default() };
        let fed = run(Algorithm::FedDualAvg, &ds, &psi, &hp, &opts).unwrap();
        let reference = minibatch_prox_da(&ds, &psi, H, eta_s * eta_c, 1, rounds, &sampler).unwrap();
        prop_assert!(fed.final_state.primal.sub(&reference[rounds]).norm() <= 1e-10);
    }

    #[test]
    fn discrepancy_vanishes_at_first_local_step(seed in 0u64..100) {
        let ds = GeneratorSpec::preset("lasso-small", seed).unwrap().generate().unwrap();
        let psi = ds.default_regularizer();
        let hp = HyperParams { eta_c: 0.003, eta_s: 1.0, local: LocalWork::Steps(4), rounds: 3, cohort: 8, batch: 5, seed };
        let opts = RunOptions { level: TraceLevel::Diagnostic, keep_traces: true, ..RunOptions::default() };
        let res = run(Algorithm::FedDualAvg, &ds, &psi, &hp, &opts).unwrap();
        let rep = dual_discrepancy(&res.traces, 8, hp.eta_c, None, None).unwrap();
        for p in rep.series.iter().filter(|p| p.step == 0) {
            prop_assert_eq!(p.value, 0.0);
        }
    }

    #[test]
    fn cohorts_are_distinct_sorted_and_in_range(seed in any::<u64>(), round in 0usize..1000, m in 1usize..50, frac in 0.0..1.0f64) {
        let c = ((m as f64 * frac) as usize).max(1);
        let cohort = sample_cohort(seed, round, m, c);
        prop_assert_eq!(cohort.len(), c);
        prop_assert!(cohort.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(cohort.iter().all(|&i| i < m));
    }
}

fn zeta(mean_scale: f64, seed: u64) -> HeterogeneityStats {
    let mut spec = GeneratorSpec::new(Task::Lasso, 16, 4, 6, 40, seed);
    spec.mean_scale = mean_scale;
    let ds = spec.generate().unwrap();
    let probes = vec![ds.initial_state(), ds.ground_truth.clone()];
    estimate_constants(&ds, &probes, 4, 5, seed).unwrap()
}

#[test]
fn heterogeneity_grows_with_mean_scale() {
    for seed in 0..5 {
        let z: Vec<f64> = [0.0, 1.0, 2.0].iter().map(|&s| zeta(s, seed).zeta_hat).collect();
        assert!(z[0] < z[1] && z[1] < z[2], "seed {seed}: {z:?}");
    }
}

#[test]
fn large_margin_logistic_labels_follow_the_sign() {
    let mut spec = GeneratorSpec::new(Task::Logistic, 20, 5, 4, 250, 8);
    spec.truth_scale = 25.0;
    spec.bias_scale = 0.0;
    let ds = spec.generate().unwrap();
    let (mut agree, mut total) = (0usize, 0usize);
    for shard in &ds.clients {
        for i in 0..shard.len() {
            let signal: f64 = shard.row(i).iter().zip(ds.ground_truth.weights()).map(|(x, w)| x * w).sum();
            agree += usize::from((signal > 0.0) == (shard.labels[i] == 1.0));
            total += 1;
        }
    }
    assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
}

#[test]
fn minibatch_variance_scales_inversely_with_batch() {
    use rand::seq::index;
    let ds = GeneratorSpec::new(Task::Lasso, 8, 2, 1, 1000, 4).generate().unwrap();
    let shard = &ds.clients[0];
    let w = ds.initial_state();
    let full = full_grad(Task::Lasso, shard, &w).unwrap().grad;
    let variance = |b: usize| {
        let mut rng = fedco::rng::stream(9, fedco::rng::Purpose::Estimate, &[b as u64]);
        let draws = 200;
        (0..draws)
            .map(|_| {
                let idx = index::sample(&mut rng, shard.len(), b).into_vec();
                stochastic_grad(Task::Lasso, shard, &w, &idx).unwrap().grad.sub(&full).norm_sq()
            })
            .sum::<f64>()
            / draws as f64
    };
    let ratio = variance(5) / variance(20);
    assert!((ratio - 4.0).abs() <= 0.3 * 4.0, "ratio {ratio}");
}
