#![allow(dead_code)]

pub mod oracle;

use fedco::{ParamState, Regularizer, Shape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A random instance of `kind` in dimension at most 4, as the crate's
/// regularizer, the oracle's description and the shape of `z`.
pub fn random_instance(rng: &mut ChaCha8Rng, kind: &str) -> (Regularizer, oracle::Psi, Shape) {
    let d = rng.random_range(1..=4usize);
    let lambda = rng.random_range(0.05..2.0);
    let radius = rng.random_range(0.2..2.0);
    match kind {
        "zero" => (Regularizer::Zero, oracle::Psi::Zero, Shape::Flat(d)),
        "l1" => (Regularizer::L1 { lambda }, oracle::Psi::L1(lambda), Shape::Flat(d)),
        "nuclear" => {
            let shapes = [(1, 1), (1, 2), (2, 1), (1, 3), (3, 1), (1, 4), (4, 1), (2, 2), (2, 2), (2, 2)];
            let (r, c) = shapes[rng.random_range(0..shapes.len())];
            (Regularizer::Nuclear { lambda, rows: r, cols: c }, oracle::Psi::Nuclear(lambda, r, c), Shape::Matrix(r, c))
        }
        "l2_ball" => (Regularizer::L2Ball { radius }, oracle::Psi::L2Ball(radius), Shape::Flat(d)),
        "l1_ball" => (Regularizer::L1Ball { radius }, oracle::Psi::L1Ball(radius), Shape::Flat(d)),
        "box" => {
            let lo = rng.random_range(-1.5..0.5);
            let hi = lo + rng.random_range(0.2..1.5);
            (Regularizer::Box { lo, hi }, oracle::Psi::Box(lo, hi), Shape::Flat(d))
        }
        other => panic!("unknown kind {other}"),
    }
}

pub const KINDS: [&str; 6] = ["zero", "l1", "nuclear", "l2_ball", "l1_ball", "box"];

pub fn state(shape: Shape, w: Vec<f64>) -> ParamState {
    ParamState::new(shape, w, 0.0).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
