//! Recovery metrics and empirical probes of the quantities that drive the
//! convergence analysis (dual discrepancy, heterogeneity, variance,
//! gradient bound, smoothness).

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::algorithms::{dual_averaging_schedule, HyperParams, RoundTrace};
use crate::baselines::{centralized_prox_gd, lipschitz_estimate, POWER_ITERATIONS};
use crate::error::{FcoError, Result};
use crate::math::{bregman_divergence, DistanceGen, ParamState, Shape};
use crate::problems::{dot, full_grad, full_objective, stochastic_grad, FederatedDataset, Task};
use crate::regularizers::{composite_mirror_map, Regularizer};
use crate::rng::{stream, Purpose};

/// Support threshold for the sparse regression metrics.
pub const SPARSITY_THRESHOLD: f64 = 1e-2;
/// Singular-value threshold for the recovered rank.
pub const RANK_THRESHOLD: f64 = 1e-2;
/// Zero threshold of the density metric used for the classification task.
pub const DENSITY_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub density: f64,
    pub threshold: f64,
}

/// Support recovery of `w` against `w_real`; an empty recovered support has
/// precision 0.
pub fn sparsity_metrics(w: &ParamState, w_real: &ParamState, threshold: f64) -> Result<SparsityReport> {
    w.ensure_same_shape(w_real)?;
    let mut tp = 0usize;
    let mut found = 0usize;
    let mut truth = 0usize;
    for (a, b) in w.weights().iter().zip(w_real.weights()) {
        let in_w = a.abs() > threshold;
        let in_t = b.abs() > threshold;
        found += in_w as usize;
        truth += in_t as usize;
        tp += (in_w && in_t) as usize;
    }
    let precision = if found == 0 { 0.0 } else { tp as f64 / found as f64 };
    let recall = if truth == 0 { 0.0 } else { tp as f64 / truth as f64 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let density = if w.dim() == 0 { 0.0 } else { found as f64 / w.dim() as f64 };
    Ok(SparsityReport { precision, recall, f1, density, threshold })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub frob_error: f64,
    pub threshold: f64,
}

fn as_matrix(w: &ParamState) -> Result<DMatrix<f64>> {
    match w.shape() {
        Shape::Matrix(r, c) => Ok(DMatrix::from_row_slice(r, c, w.weights())),
        Shape::Flat(_) => Err(FcoError::dim("rank metrics need a matrix-shaped state")),
    }
}

pub fn rank_metrics(w: &ParamState, w_real: &ParamState, threshold: f64) -> Result<RankReport> {
    w.ensure_same_shape(w_real)?;
    let m = as_matrix(w)?;
    let rank = m.singular_values().iter().filter(|s| **s > threshold).count();
    let frob_error = w.weights().iter().zip(w_real.weights()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(RankReport { rank, frob_error, threshold })
}

/// Fraction of weight entries with magnitude above `threshold`.
pub fn density_metric(w: &ParamState, threshold: f64) -> f64 {
    if w.dim() == 0 {
        return 0.0;
    }
    w.nnz(threshold) as f64 / w.dim() as f64
}

/// Metrics recorded at every evaluation point of a run.
pub fn evaluate(dataset: &FederatedDataset, psi: &Regularizer, w: &ParamState) -> Result<Vec<(String, f64)>> {
    let mut out = vec![("objective".to_string(), full_objective(dataset, psi, w)?)];
    match dataset.task() {
        Task::Lasso | Task::Logistic => {
            let s = sparsity_metrics(w, &dataset.ground_truth, SPARSITY_THRESHOLD)?;
            out.push(("precision".into(), s.precision));
            out.push(("recall".into(), s.recall));
            out.push(("f1".into(), s.f1));
            out.push(("density".into(), s.density));
            out.push(("density_1e-4".into(), density_metric(w, DENSITY_THRESHOLD)));
        }
        Task::LowRank => {
            let r = rank_metrics(w, &dataset.ground_truth, RANK_THRESHOLD)?;
            out.push(("rank".into(), r.rank as f64));
            out.push(("frob_error".into(), r.frob_error));
            out.push(("validation_mse".into(), dataset.validation_mse(w)));
        }
    }
    Ok(out)
}

fn diagnostic_paths(trace: &RoundTrace) -> Result<&[crate::algorithms::ClientPath]> {
    match &trace.clients {
        Some(paths) if paths.iter().all(|p| !p.duals.is_empty()) => Ok(paths),
        Some(_) => Err(FcoError::Unavailable("trace has no dual iterates".into())),
        None => Err(FcoError::Unavailable("round trace was not recorded at diagnostic level".into())),
    }
}

fn require_full(trace: &RoundTrace, num_clients: usize) -> Result<()> {
    if trace.cohort.len() != num_clients {
        return Err(FcoError::Unavailable(format!(
            "round {} used {} of {num_clients} clients; full participation required",
            trace.round,
            trace.cohort.len()
        )));
    }
    Ok(())
}

/// Client-average of the dual states at step `k` of a traced round.
pub fn shadow_dual(trace: &RoundTrace, k: usize) -> Result<ParamState> {
    let paths = diagnostic_paths(trace)?;
    ParamState::mean(paths.iter().map(|p| &p.duals[k])).ok_or_else(|| FcoError::Unavailable("empty cohort".into()))
}

/// Largest `‖z̄_{r,k+1} − (z̄_{r,k} − η_c·mean_m g_{r,k}^m)‖₂` over all traced steps.
pub fn shadow_identity_residual(traces: &[RoundTrace], eta_c: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trace in traces {
        let paths = diagnostic_paths(trace)?;
        let k_max = paths.iter().map(|p| p.grads.len()).min().unwrap_or(0);
        for k in 0..k_max {
            let mut predicted = shadow_dual(trace, k)?;
            let g_mean = ParamState::mean(paths.iter().map(|p| &p.grads[k])).expect("non-empty");
            predicted.axpy(-eta_c, &g_mean);
            worst = worst.max(shadow_dual(trace, k + 1)?.sub(&predicted).norm());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyPoint {
    pub round: usize,
    pub step: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    /// `(1/M) Σ_m ‖z̄_{r,k} − z_{r,k}^m‖²` for `k = 0..K`.
    pub series: Vec<DiscrepancyPoint>,
    /// Gradient bound used for the envelope.
    pub g_hat: f64,
    /// `4 η_c² (K−1)² Ĝ²`.
    pub bounded_gradient_envelope: f64,
    /// `7 η_c² K σ̂² + 14 η_c² K² ζ̂²`, when constants were supplied.
    pub quadratic_envelope: Option<f64>,
}

impl DiscrepancyReport {
    pub fn max(&self) -> f64 {
        self.series.iter().fold(0.0, |m, p| m.max(p.value))
    }
}

/// Largest norm among all gradients recorded in the traces.
pub fn max_traced_gradient_norm(traces: &[RoundTrace]) -> Result<f64> {
    let mut g: f64 = 0.0;
    for t in traces {
        for p in diagnostic_paths(t)? {
            for grad in &p.grads {
                g = g.max(grad.norm());
            }
        }
    }
    Ok(g)
}

/// Dual discrepancy of a diagnostic, full-participation trace together with
/// the bounded-gradient envelope (with `Ĝ` the largest observed gradient
/// norm unless given) and, if `stats` is given, the quadratic envelope.
pub fn dual_discrepancy(
    traces: &[RoundTrace],
    num_clients: usize,
    eta_c: f64,
    g_hat: Option<f64>,
    stats: Option<&HeterogeneityStats>,
) -> Result<DiscrepancyReport> {
    let mut series = Vec::new();
    let mut k_nominal = 0usize;
    for trace in traces {
        require_full(trace, num_clients)?;
        let paths = diagnostic_paths(trace)?;
        k_nominal = k_nominal.max(trace.nominal_k);
        let k_max = paths.iter().map(|p| p.grads.len()).min().unwrap_or(0);
        for k in 0..k_max {
            let zbar = shadow_dual(trace, k)?;
            let value = paths.iter().map(|p| zbar.sub(&p.duals[k]).norm_sq()).sum::<f64>() / paths.len() as f64;
            series.push(DiscrepancyPoint { round: trace.round, step: k, value });
        }
    }
    let g_hat = match g_hat {
        Some(g) => g,
        None => max_traced_gradient_norm(traces)?,
    };
    let km1 = k_nominal.saturating_sub(1) as f64;
    let k = k_nominal as f64;
    let bounded = 4.0 * eta_c * eta_c * km1 * km1 * g_hat * g_hat;
    let quadratic = stats.map(|s| {
        7.0 * eta_c * eta_c * k * s.sigma_hat * s.sigma_hat + 14.0 * eta_c * eta_c * k * k * s.zeta_hat * s.zeta_hat
    });
    Ok(DiscrepancyReport { series, g_hat, bounded_gradient_envelope: bounded, quadratic_envelope: quadratic })
}

/// `ŵ = (1/KR) Σ_r Σ_{k=1..K} ∇(h + η̃_{r,k} ψ)*(z̄_{r,k})` from a diagnostic
/// trace with full participation and `η_s = 1`.
pub fn averaged_shadow_primal(
    traces: &[RoundTrace],
    psi: &Regularizer,
    h: DistanceGen,
    hp: &HyperParams,
) -> Result<ParamState> {
    if hp.eta_s != 1.0 {
        return Err(FcoError::Unavailable("shadow average is defined for eta_s = 1".into()));
    }
    let mut acc: Option<ParamState> = None;
    let mut count = 0usize;
    for trace in traces {
        let paths = diagnostic_paths(trace)?;
        let k_max = paths.iter().map(|p| p.grads.len()).min().unwrap_or(0);
        for k in 1..=k_max {
            let eta = dual_averaging_schedule(hp.eta_s, hp.eta_c, trace.round, k, trace.nominal_k);
            let w = composite_mirror_map(h, eta, psi, &shadow_dual(trace, k)?)?;
            match acc.as_mut() {
                Some(a) => a.axpy(1.0, &w),
                None => acc = Some(w),
            }
            count += 1;
        }
    }
    let mut out = acc.ok_or_else(|| FcoError::Unavailable("no traced steps".into()))?;
    out.scale(1.0 / count as f64);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityStats {
    pub zeta_hat: f64,
    pub sigma_hat: f64,
    pub g_hat: f64,
    pub l_hat: f64,
}

/// Default probe set: `w₀`, the ground truth and three random points mapped
/// into `dom ψ`.
pub fn default_probes(dataset: &FederatedDataset, psi: &Regularizer, seed: u64) -> Result<Vec<ParamState>> {
    use rand_distr::{Distribution, StandardNormal};
    let shape = dataset.shape();
    let mut probes = vec![dataset.initial_state(), dataset.ground_truth.clone()];
    for j in 0..3u64 {
        let mut rng = stream(seed, Purpose::Probe, &[j]);
        let v: Vec<f64> = (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let p = ParamState::new(shape, v, 0.0)?;
        probes.push(composite_mirror_map(DistanceGen::Euclidean, 0.0, psi, &p)?);
    }
    Ok(probes)
}

/// Plug-in estimates of `ζ`, `σ`, `G` and `L` over the probe points.
///
/// `σ̂²` is the largest (over probes and clients) mean squared deviation of
/// `samples` batch gradients of size `batch` from the client's full
/// gradient. These are estimates, not certified bounds.
pub fn estimate_constants(
    dataset: &FederatedDataset,
    probes: &[ParamState],
    samples: usize,
    batch: usize,
    seed: u64,
) -> Result<HeterogeneityStats> {
    if probes.is_empty() || samples == 0 || batch == 0 {
        return Err(FcoError::param("need probes, samples > 0 and batch > 0"));
    }
    let task = dataset.task();
    let mut zeta: f64 = 0.0;
    let mut sigma_sq: f64 = 0.0;
    let mut g_max: f64 = 0.0;
    for (pi, w) in probes.iter().enumerate() {
        let client_grads =
            dataset.clients.iter().map(|c| full_grad(task, c, w).map(|g| g.grad)).collect::<Result<Vec<_>>>()?;
        // Anchored mean: identical client gradients give ζ̂ = 0 exactly.
        let anchor = &client_grads[0];
        let mut mean = anchor.clone();
        for g in &client_grads[1..] {
            mean.axpy(1.0 / client_grads.len() as f64, &g.sub(anchor));
        }
        for (m, (shard, gm)) in dataset.clients.iter().zip(&client_grads).enumerate() {
            zeta = zeta.max(gm.sub(&mean).norm());
            let mut dev = 0.0;
            for s in 0..samples {
                let mut rng = stream(seed, Purpose::Estimate, &[pi as u64, m as u64, s as u64]);
                let mut idx = index::sample(&mut rng, shard.len(), batch.min(shard.len())).into_vec();
                idx.sort_unstable();
                let g = stochastic_grad(task, shard, w, &idx)?.grad;
                g_max = g_max.max(g.norm());
                dev += g.sub(gm).norm_sq();
            }
            sigma_sq = sigma_sq.max(dev / samples as f64);
        }
    }
    let l_hat = lipschitz_estimate(task, &dataset.pooled(), POWER_ITERATIONS);
    Ok(HeterogeneityStats { zeta_hat: zeta, sigma_hat: sigma_sq.sqrt(), g_hat: g_max, l_hat })
}

/// Second-moment operator `Q = (2/N) X̃ᵀX̃` of the pooled least-squares
/// objective, acting on bias-augmented states.
pub struct QuadraticForm<'a> {
    dataset: &'a FederatedDataset,
}

impl<'a> QuadraticForm<'a> {
    pub fn new(dataset: &'a FederatedDataset) -> Result<Self> {
        match dataset.task() {
            Task::Lasso | Task::LowRank => Ok(QuadraticForm { dataset }),
            Task::Logistic => Err(FcoError::Unsupported("logistic loss is not quadratic".into())),
        }
    }

    pub fn apply(&self, v: &ParamState) -> ParamState {
        let mut out = ParamState::zeros(v.shape());
        let mut n = 0usize;
        let mut ob = 0.0;
        for c in &self.dataset.clients {
            for i in 0..c.len() {
                let x = c.row(i);
                let s = dot(v.weights(), x) + v.bias();
                for (o, xi) in out.weights_mut().iter_mut().zip(x) {
                    *o += s * xi;
                }
                ob += s;
                n += 1;
            }
        }
        out.set_bias(ob);
        out.scale(2.0 / n as f64);
        out
    }

    /// `‖v‖²_Q = vᵀQv`.
    pub fn norm_sq(&self, v: &ParamState) -> f64 {
        v.dot(&self.apply(v))
    }
}

/// `B̂ = D_h(ŵ*, w₀)` with `ŵ*` from centralized proximal gradient descent.
/// This substitutes an approximate optimum for the true minimizer.
pub fn reference_distance(dataset: &FederatedDataset, psi: &Regularizer, epochs: usize) -> Result<(f64, ParamState)> {
    let pooled = dataset.pooled();
    let res = centralized_prox_gd(dataset.task(), &pooled, dataset.shape(), psi, None, epochs)?;
    let b = bregman_divergence(DistanceGen::Euclidean, &res.w, &dataset.initial_state())?;
    Ok((b, res.w))
}
