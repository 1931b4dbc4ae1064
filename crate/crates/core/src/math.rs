//! Parameter states, the distance-generating function and Bregman divergences.
//!
//! A [`ParamState`] holds a weight block (flat or matrix-shaped, row-major)
//! together with an unregularized scalar bias. Regularizers and composite
//! mirror maps only touch the weight block; `h` and all inner products
//! cover both channels.

use serde::{Deserialize, Serialize};

use crate::error::{FcoError, Result};
use crate::regularizers::{composite_mirror_map, Regularizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Flat(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    weights: Vec<f64>,
    bias: f64,
    shape: Shape,
}

impl ParamState {
    pub fn new(shape: Shape, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.len() != shape.len() {
            return Err(FcoError::dim(format!(
                "shape {:?} needs {} entries, got {}",
                shape,
                shape.len(),
                weights.len()
            )));
        }
        let state = ParamState { weights, bias, shape };
        state.check_finite()?;
        Ok(state)
    }

    pub fn flat(weights: Vec<f64>) -> Self {
        let d = weights.len();
        ParamState { weights, bias: 0.0, shape: Shape::Flat(d) }
    }

    pub fn matrix(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Matrix(rows, cols), weights, 0.0)
    }

    pub fn zeros(shape: Shape) -> Self {
        ParamState { weights: vec![0.0; shape.len()], bias: 0.0, shape }
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn set_bias(&mut self, bias: f64) {
        self.bias = bias;
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(FcoError::domain("non-finite entry in parameter state"))
        }
    }

    pub fn ensure_same_shape(&self, other: &ParamState) -> Result<()> {
        if self.shape != other.shape {
            return Err(FcoError::dim(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// `self += alpha * other` on both channels.
    pub fn axpy(&mut self, alpha: f64, other: &ParamState) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += alpha * b;
        }
        self.bias += alpha * other.bias;
    }

    pub fn scale(&mut self, alpha: f64) {
        self.weights.iter_mut().for_each(|v| *v *= alpha);
        self.bias *= alpha;
    }

    pub fn sub(&self, other: &ParamState) -> ParamState {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn dot(&self, other: &ParamState) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        let w: f64 = self.weights.iter().zip(&other.weights).map(|(a, b)| a * b).sum();
        w + self.bias * other.bias
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Mean of a non-empty collection of equally shaped states, anchored at
    /// the first element so that identical states average to themselves
    /// bit for bit.
    pub fn mean<'a>(states: impl IntoIterator<Item = &'a ParamState>) -> Option<ParamState> {
        let mut iter = states.into_iter();
        let first = iter.next()?;
        let rest: Vec<&ParamState> = iter.collect();
        let inv = 1.0 / (rest.len() + 1) as f64;
        let mut acc = first.clone();
        for s in rest {
            acc.axpy(inv, &s.sub(first));
        }
        Some(acc)
    }

    /// Number of weight entries with magnitude strictly above `threshold`.
    pub fn nnz(&self, threshold: f64) -> usize {
        self.weights.iter().filter(|v| v.abs() > threshold).count()
    }
}

/// Distance-generating function `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceGen {
    /// `h(w) = ½‖w‖²`, so `∇h` and `∇h*` are the identity.
    #[default]
    Euclidean,
}

impl DistanceGen {
    pub fn value(&self, w: &ParamState) -> f64 {
        match self {
            DistanceGen::Euclidean => 0.5 * w.norm_sq(),
        }
    }

    /// `∇h(w)`: primal to dual.
    pub fn grad(&self, w: &ParamState) -> ParamState {
        match self {
            DistanceGen::Euclidean => w.clone(),
        }
    }

    /// `∇h*(z)`: dual to primal.
    pub fn grad_conj(&self, z: &ParamState) -> ParamState {
        match self {
            DistanceGen::Euclidean => z.clone(),
        }
    }
}

fn check_pair(w: &ParamState, u: &ParamState) -> Result<()> {
    w.ensure_same_shape(u)?;
    w.check_finite()?;
    u.check_finite()
}

/// `D_h(w, u) = h(w) - h(u) - <∇h(u), w - u>`.
pub fn bregman_divergence(h: DistanceGen, w: &ParamState, u: &ParamState) -> Result<f64> {
    check_pair(w, u)?;
    let value = match h {
        DistanceGen::Euclidean => 0.5 * w.sub(u).norm_sq(),
    };
    Ok(value.max(0.0))
}

/// Generalized Bregman divergence of `h + ηψ` between a primal point `w` and
/// a dual point `z`, evaluated through `u_z = ∇(h + ηψ)*(z)`.
pub fn generalized_bregman(h: DistanceGen, psi: &Regularizer, eta: f64, w: &ParamState, z: &ParamState) -> Result<f64> {
    check_pair(w, z)?;
    if eta.is_nan() || eta < 0.0 {
        return Err(FcoError::param(format!("eta must be >= 0, got {eta}")));
    }
    let psi_w = psi.value(w)?;
    if psi_w.is_infinite() {
        return Err(FcoError::domain("w lies outside dom psi"));
    }
    let u = composite_mirror_map(h, eta, psi, z)?;
    let psi_u = psi.value(&u)?;
    // 0·ψ stays 0 even for characteristics; `u` is always feasible anyway.
    let scaled = |v: f64| if eta == 0.0 { 0.0 } else { eta * v };
    let g_w = h.value(w) + scaled(psi_w);
    let g_u = h.value(&u) + scaled(psi_u);
    Ok(g_w - g_u - z.dot(&w.sub(&u)))
}

/// Squared dual norm; `ℓ₂` under the euclidean configuration.
pub fn dual_norm_sq(v: &ParamState) -> Result<f64> {
    v.check_finite()?;
    Ok(v.norm_sq())
}
