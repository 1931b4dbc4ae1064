//! Regularizer catalog and exact composite mirror maps.
//!
//! For the euclidean `h`, `∇(h + ηψ)*(z)` is the proximal operator of `ηψ`
//! at `z`. Every kind below has a closed form; the nuclear norm goes through
//! a full SVD.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FcoError, Result};
use crate::math::{DistanceGen, ParamState, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    Zero,
    L1 { lambda: f64 },
    Nuclear { lambda: f64, rows: usize, cols: usize },
    L2Ball { radius: f64 },
    L1Ball { radius: f64 },
    Box { lo: f64, hi: f64 },
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Regularizer::Zero => true,
            Regularizer::L1 { lambda } => lambda > 0.0 && lambda.is_finite(),
            Regularizer::Nuclear { lambda, rows, cols } => lambda > 0.0 && lambda.is_finite() && rows > 0 && cols > 0,
            Regularizer::L2Ball { radius } | Regularizer::L1Ball { radius } => radius > 0.0 && radius.is_finite(),
            Regularizer::Box { lo, hi } => lo <= hi && !lo.is_nan() && !hi.is_nan(),
        };
        if ok {
            Ok(())
        } else {
            Err(FcoError::param(format!("invalid regularizer {self:?}")))
        }
    }

    /// Constraint characteristics take values in {0, +∞}.
    pub fn is_characteristic(&self) -> bool {
        matches!(self, Regularizer::L2Ball { .. } | Regularizer::L1Ball { .. } | Regularizer::Box { .. })
    }

    /// Penalty weight, 0 for `Zero` and for characteristics.
    pub fn lambda(&self) -> f64 {
        match *self {
            Regularizer::L1 { lambda } | Regularizer::Nuclear { lambda, .. } => lambda,
            _ => 0.0,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            Regularizer::Zero => "zero",
            Regularizer::L1 { .. } => "l1",
            Regularizer::Nuclear { .. } => "nuclear",
            Regularizer::L2Ball { .. } => "l2_ball",
            Regularizer::L1Ball { .. } => "l1_ball",
            Regularizer::Box { .. } => "box",
        }
    }

    fn matrix_of(&self, w: &ParamState, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        match w.shape() {
            Shape::Matrix(r, c) if r == rows && c == cols => Ok(DMatrix::from_row_slice(rows, cols, w.weights())),
            other => Err(FcoError::dim(format!("nuclear norm expects a {rows}x{cols} matrix state, got {other:?}"))),
        }
    }

    /// `ψ(w)` on the weight block; `+∞` outside a constraint set.
    pub fn value(&self, w: &ParamState) -> Result<f64> {
        let x = w.weights();
        let v = match *self {
            Regularizer::Zero => 0.0,
            Regularizer::L1 { lambda } => lambda * x.iter().map(|v| v.abs()).sum::<f64>(),
            Regularizer::Nuclear { lambda, rows, cols } => {
                let m = self.matrix_of(w, rows, cols)?;
                lambda * m.singular_values().sum()
            }
            Regularizer::L2Ball { radius } => characteristic(x.iter().map(|v| v * v).sum::<f64>().sqrt() <= radius),
            Regularizer::L1Ball { radius } => characteristic(x.iter().map(|v| v.abs()).sum::<f64>() <= radius),
            Regularizer::Box { lo, hi } => characteristic(x.iter().all(|&v| lo <= v && v <= hi)),
        };
        Ok(v)
    }

    /// Interior test used by subgradient selection for characteristics.
    fn strictly_inside(&self, x: &[f64]) -> bool {
        match *self {
            Regularizer::L2Ball { radius } => x.iter().map(|v| v * v).sum::<f64>().sqrt() < radius,
            Regularizer::L1Ball { radius } => x.iter().map(|v| v.abs()).sum::<f64>() < radius,
            Regularizer::Box { lo, hi } => x.iter().all(|&v| lo < v && v < hi),
            _ => true,
        }
    }
}

fn characteristic(feasible: bool) -> f64 {
    if feasible {
        0.0
    } else {
        f64::INFINITY
    }
}

/// `sign(v)·max(|v| - t, 0)`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Euclidean projection onto `{x : ‖x‖₁ ≤ radius}` by sorting magnitudes.
pub fn project_l1_ball(z: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = z.iter().map(|v| v.abs()).sum();
    if l1 <= radius {
        return z.to_vec();
    }
    let mut mags: Vec<f64> = z.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    let mut out: Vec<f64> = z.iter().map(|&v| soft_threshold(v, theta)).collect();
    pull_inside(&mut out, radius, |x| x.iter().map(|v| v.abs()).sum());
    out
}

/// Shrink `x` until `measure(x) <= radius` holds in floating point, so
/// projected points pass the exact membership test.
fn pull_inside(x: &mut [f64], radius: f64, measure: impl Fn(&[f64]) -> f64) {
    let mut m = measure(x);
    while m > radius {
        let s = (radius / m).next_down();
        x.iter_mut().for_each(|v| *v *= s);
        m = measure(x);
    }
}

/// Singular-value thresholding `U·max(Σ - tau, 0)·Vᵀ` of a row-major matrix.
pub fn singular_value_threshold(rows: usize, cols: usize, data: &[f64], tau: f64) -> Vec<f64> {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let svd = m.svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let shrunk =
        DVector::from_iterator(svd.singular_values.len(), svd.singular_values.iter().map(|s| (s - tau).max(0.0)));
    let out = u * DMatrix::from_diagonal(&shrunk) * v_t;
    let mut flat = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            flat.push(out[(i, j)]);
        }
    }
    flat
}

/// `∇(h + ηψ)*(z) = argmin_w { <-z, w> + ηψ(w) + h(w) }`.
///
/// The bias channel is unregularized and passes through `∇h*`.
pub fn composite_mirror_map(h: DistanceGen, eta: f64, psi: &Regularizer, z: &ParamState) -> Result<ParamState> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(FcoError::param(format!("eta must be finite and >= 0, got {eta}")));
    }
    z.check_finite()?;
    let DistanceGen::Euclidean = h;
    let mut out = h.grad_conj(z);
    let x = out.weights_mut();
    match *psi {
        Regularizer::Zero => {}
        Regularizer::L1 { lambda } => {
            let t = eta * lambda;
            if t > 0.0 {
                x.iter_mut().for_each(|v| *v = soft_threshold(*v, t));
            }
        }
        Regularizer::Nuclear { lambda, rows, cols } => {
            if z.shape() != Shape::Matrix(rows, cols) {
                return Err(FcoError::dim(format!(
                    "nuclear norm expects a {rows}x{cols} matrix state, got {:?}",
                    z.shape()
                )));
            }
            let t = eta * lambda;
            if t > 0.0 {
                let shrunk = singular_value_threshold(rows, cols, x, t);
                x.copy_from_slice(&shrunk);
            }
        }
        // η·χ_C = χ_C for every η (including the η = 0 convention), so the
        // map is the projection and iterates stay feasible.
        Regularizer::L2Ball { radius } => {
            pull_inside(x, radius, |x| x.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        Regularizer::L1Ball { radius } => {
            let p = project_l1_ball(x, radius);
            x.copy_from_slice(&p);
        }
        Regularizer::Box { lo, hi } => {
            x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    }
    Ok(out)
}

/// One element of `∂ψ(w)` (bias component zero).
///
/// L1 picks 0 at zero coordinates; characteristics pick 0 in the interior
/// and reject boundary points, where the normal cone is set-valued.
pub fn subgradient(psi: &Regularizer, w: &ParamState) -> Result<ParamState> {
    let mut g = ParamState::zeros(w.shape());
    match *psi {
        Regularizer::Zero => {}
        Regularizer::L1 { lambda } => {
            for (gi, &wi) in g.weights_mut().iter_mut().zip(w.weights()) {
                *gi = if wi > 0.0 {
                    lambda
                } else if wi < 0.0 {
                    -lambda
                } else {
                    0.0
                };
            }
        }
        Regularizer::Nuclear { lambda, rows, cols } => {
            let m = psi.matrix_of(w, rows, cols)?;
            let svd = m.svd(true, true);
            let u = svd.u.expect("left singular vectors requested");
            let v_t = svd.v_t.expect("right singular vectors requested");
            let smax = svd.singular_values.max();
            let cutoff = smax * f64::EPSILON * rows.max(cols) as f64;
            let mut acc = DMatrix::<f64>::zeros(rows, cols);
            for (i, &s) in svd.singular_values.iter().enumerate() {
                if s > cutoff && s > 0.0 {
                    acc += u.column(i) * v_t.row(i);
                }
            }
            for i in 0..rows {
                for j in 0..cols {
                    g.weights_mut()[i * cols + j] = lambda * acc[(i, j)];
                }
            }
        }
        Regularizer::L2Ball { .. } | Regularizer::L1Ball { .. } | Regularizer::Box { .. } => {
            if psi.value(w)?.is_infinite() {
                return Err(FcoError::domain("subgradient requested at an infeasible point"));
            }
            if !psi.strictly_inside(w.weights()) {
                return Err(FcoError::domain(
                    "subgradient of a constraint characteristic is set-valued on the boundary",
                ));
            }
        }
    }
    Ok(g)
}
