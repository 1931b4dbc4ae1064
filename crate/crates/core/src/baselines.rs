//! Non-federated references: sequential mirror descent and dual averaging,
//! mini-batch dual averaging over pooled client batches, and deterministic
//! proximal gradient descent for the centralized and local baselines.
//!
//! All of them retrieve primal points through
//! [`composite_mirror_map`](crate::regularizers::composite_mirror_map).

use crate::algorithms::BatchSampler;
use crate::error::{FcoError, Result};
use crate::math::{DistanceGen, ParamState, Shape};
use crate::problems::{dot, stochastic_grad, ClientShard, FederatedDataset, Task};
use crate::regularizers::{composite_mirror_map, Regularizer};
use crate::rng::{stream, Purpose};

/// Batches keyed by the global step `round·stride + step` of each client.
///
/// With `stride = K` a federated run over `R` rounds and a sequential run
/// over `R·K` steps (which reads `schedule(0, client, n, R·K)`) see the same
/// batch sequence, which is what the reduction tests need.
#[derive(Clone, Copy, Debug)]
pub struct CoupledSampler {
    pub seed: u64,
    pub batch: usize,
    pub stride: usize,
}

impl BatchSampler for CoupledSampler {
    fn schedule(&self, round: usize, client: usize, n: usize, steps: usize) -> Vec<Vec<usize>> {
        use rand::seq::index;
        (0..steps)
            .map(|k| {
                let t = (round * self.stride + k) as u64;
                let mut rng = stream(self.seed, Purpose::Batches, &[u64::MAX, client as u64, t]);
                index::sample(&mut rng, n, self.batch.min(n)).into_vec()
            })
            .collect()
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(FcoError::param(format!("step size must be positive, got {eta}")))
    }
}

/// Sequential stochastic dual averaging
/// `z_{t+1} = z_t − η ∇f(∇(h + ηtψ)*(z_t); ξ_t)`, reading batches as client 0
/// of round 0. Returns the retrieved primal points `w_0, …, w_T`.
#[allow(clippy::too_many_arguments)]
pub fn sequential_dual_averaging(
    task: Task,
    shard: &ClientShard,
    psi: &Regularizer,
    h: DistanceGen,
    w0: &ParamState,
    eta: f64,
    steps: usize,
    sampler: &dyn BatchSampler,
) -> Result<Vec<ParamState>> {
    check_eta(eta)?;
    let batches = sampler.schedule(0, 0, shard.len(), steps);
    let mut z = h.grad(w0);
    let mut out = Vec::with_capacity(steps + 1);
    for (t, batch) in batches.iter().enumerate() {
        let w = composite_mirror_map(h, eta * t as f64, psi, &z)?;
        let g = stochastic_grad(task, shard, &w, batch)?.grad;
        out.push(w);
        z.axpy(-eta, &g);
    }
    out.push(composite_mirror_map(h, eta * steps as f64, psi, &z)?);
    Ok(out)
}

/// Sequential composite mirror descent
/// `w_{t+1} = ∇(h + ηψ)*(∇h(w_t) − η ∇f(w_t; ξ_t))`. Returns `w_0, …, w_T`.
#[allow(clippy::too_many_arguments)]
pub fn sequential_mirror_descent(
    task: Task,
    shard: &ClientShard,
    psi: &Regularizer,
    h: DistanceGen,
    w0: &ParamState,
    eta: f64,
    steps: usize,
    sampler: &dyn BatchSampler,
) -> Result<Vec<ParamState>> {
    check_eta(eta)?;
    let batches = sampler.schedule(0, 0, shard.len(), steps);
    let mut w = w0.clone();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(w.clone());
    for batch in &batches {
        let g = stochastic_grad(task, shard, &w, batch)?.grad;
        let mut y = h.grad(&w);
        y.axpy(-eta, &g);
        w = composite_mirror_map(h, eta, psi, &y)?;
        out.push(w.clone());
    }
    Ok(out)
}

/// Gradient averaged over the pooled batches every client would draw for
/// `steps_per_client` local steps in `round`, all evaluated at `w`.
pub fn pooled_minibatch_gradient(
    dataset: &FederatedDataset,
    w: &ParamState,
    round: usize,
    steps_per_client: usize,
    sampler: &dyn BatchSampler,
) -> Result<ParamState> {
    let mut acc = ParamState::zeros(w.shape());
    let mut count = 0usize;
    for (m, shard) in dataset.clients.iter().enumerate() {
        for batch in sampler.schedule(round, m, shard.len(), steps_per_client) {
            acc.axpy(1.0, &stochastic_grad(dataset.task(), shard, w, &batch)?.grad);
            count += 1;
        }
    }
    if count == 0 {
        return Err(FcoError::param("no batches drawn"));
    }
    acc.scale(1.0 / count as f64);
    Ok(acc)
}

/// Mini-batch dual averaging: `R` steps of size `eta`, each on the pooled
/// `M·K` client batches of that round. Returns `w_0, …, w_R`.
pub fn minibatch_prox_da(
    dataset: &FederatedDataset,
    psi: &Regularizer,
    h: DistanceGen,
    eta: f64,
    steps_per_client: usize,
    rounds: usize,
    sampler: &dyn BatchSampler,
) -> Result<Vec<ParamState>> {
    check_eta(eta)?;
    let w0 = dataset.initial_state();
    let mut z = h.grad(&w0);
    let mut out = Vec::with_capacity(rounds + 1);
    for r in 0..rounds {
        let w = composite_mirror_map(h, eta * r as f64, psi, &z)?;
        let g = pooled_minibatch_gradient(dataset, &w, r, steps_per_client, sampler)?;
        out.push(w);
        z.axpy(-eta, &g);
    }
    out.push(composite_mirror_map(h, eta * rounds as f64, psi, &z)?);
    Ok(out)
}

/// Curvature constant of the per-sample loss with respect to the prediction.
fn loss_curvature(task: Task) -> f64 {
    match task {
        Task::Lasso | Task::LowRank => 2.0,
        Task::Logistic => 0.25,
    }
}

/// Power-iteration estimate of the smoothness constant of the mean loss on
/// `shard`, i.e. `c·λ_max(X̃ᵀX̃/n)` with `X̃` the bias-augmented design.
pub fn lipschitz_estimate(task: Task, shard: &ClientShard, iterations: usize) -> f64 {
    let p = shard.dim;
    let n = shard.len() as f64;
    let mut v = vec![1.0 / ((p + 1) as f64).sqrt(); p + 1];
    let mut rayleigh = 0.0;
    for _ in 0..iterations.max(1) {
        let mut next = vec![0.0; p + 1];
        for i in 0..shard.len() {
            let x = shard.row(i);
            let s = dot(&v[..p], x) + v[p];
            for (o, xi) in next[..p].iter_mut().zip(x) {
                *o += s * xi / n;
            }
            next[p] += s / n;
        }
        rayleigh = dot(&v, &next);
        let norm = dot(&next, &next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = next.into_iter().map(|x| x / norm).collect();
    }
    loss_curvature(task) * rayleigh
}

pub const POWER_ITERATIONS: usize = 50;

#[derive(Clone, Debug)]
pub struct ProxGdResult {
    pub w: ParamState,
    pub step: f64,
    /// `Φ` on the shard before the first step and after every step.
    pub objective: Vec<f64>,
}

/// Mean loss plus `ψ` on one shard.
pub fn shard_objective(task: Task, shard: &ClientShard, psi: &Regularizer, w: &ParamState) -> Result<f64> {
    let reg = psi.value(w)?;
    if reg.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(stochastic_grad(task, shard, w, &shard.all_indices())?.loss + reg)
}

/// Deterministic proximal gradient descent on a single shard (use
/// [`FederatedDataset::pooled`] for the centralized baseline). `eta = None`
/// selects `1/L̂`.
pub fn centralized_prox_gd(
    task: Task,
    shard: &ClientShard,
    shape: Shape,
    psi: &Regularizer,
    eta: Option<f64>,
    epochs: usize,
) -> Result<ProxGdResult> {
    let h = DistanceGen::Euclidean;
    let step = match eta {
        Some(e) => e,
        None => 1.0 / lipschitz_estimate(task, shard, POWER_ITERATIONS),
    };
    check_eta(step)?;
    let all = shard.all_indices();
    let mut w = ParamState::zeros(shape);
    let mut objective = vec![shard_objective(task, shard, psi, &w)?];
    for _ in 0..epochs {
        let g = stochastic_grad(task, shard, &w, &all)?;
        let mut y = h.grad(&w);
        y.axpy(-step, &g.grad);
        w = composite_mirror_map(h, step, psi, &y)?;
        objective.push(shard_objective(task, shard, psi, &w)?);
    }
    Ok(ProxGdResult { w, step, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{FullBatch, ShuffledEpochs};
    use crate::problems::{gen_lasso_dataset, GeneratorSpec};

    #[test]
    fn zero_psi_dual_averaging_is_sgd() {
        let ds = gen_lasso_dataset(6, 2, 1, 20, 2).unwrap();
        let shard = &ds.clients[0];
        let sampler = ShuffledEpochs { seed: 4, batch: 3 };
        let w0 = ds.initial_state();
        let da = sequential_dual_averaging(
            Task::Lasso,
            shard,
            &Regularizer::Zero,
            DistanceGen::Euclidean,
            &w0,
            0.01,
            30,
            &sampler,
        )
        .unwrap();
        let md = sequential_mirror_descent(
            Task::Lasso,
            shard,
            &Regularizer::Zero,
            DistanceGen::Euclidean,
            &w0,
            0.01,
            30,
            &sampler,
        )
        .unwrap();
        let batches = sampler.schedule(0, 0, shard.len(), 30);
        let mut w = w0.clone();
        for (t, b) in batches.iter().enumerate() {
            assert!(w.sub(&da[t]).norm() < 1e-12);
            assert!(w.sub(&md[t]).norm() < 1e-12);
            let g = stochastic_grad(Task::Lasso, shard, &w, b).unwrap().grad;
            w.axpy(-0.01, &g);
        }
    }

    #[test]
    fn one_round_zero_psi_minibatch_is_averaged_gradient_step() {
        let ds = gen_lasso_dataset(5, 2, 3, 8, 9).unwrap();
        let out = minibatch_prox_da(&ds, &Regularizer::Zero, DistanceGen::Euclidean, 0.1, 2, 1, &FullBatch).unwrap();
        let mut expected = ds.initial_state();
        expected.axpy(-0.1, &ds.full_gradient(&ds.initial_state()).unwrap());
        assert!(out[1].sub(&expected).norm() < 1e-12);
    }

    #[test]
    fn lipschitz_of_orthonormal_design() {
        let shard = ClientShard {
            features: vec![1.0, 0.0, 0.0, 1.0],
            labels: vec![0.0, 0.0],
            client_mean: vec![0.0, 0.0],
            dim: 2,
        };
        // X̃ᵀX̃/2 = [[.5,0,.5],[0,.5,.5],[.5,.5,1]], top eigenvalue 1.5.
        let l = lipschitz_estimate(Task::Lasso, &shard, 200);
        assert!((l - 3.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn prox_gd_descends_with_default_step() {
        let ds = gen_lasso_dataset(12, 3, 4, 16, 3).unwrap();
        let pooled = ds.pooled();
        let psi = ds.default_regularizer();
        let res = centralized_prox_gd(Task::Lasso, &pooled, ds.shape(), &psi, None, 100).unwrap();
        for pair in res.objective.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn noiseless_recovery_with_tiny_lambda() {
        let mut spec = GeneratorSpec::new(Task::Lasso, 8, 3, 4, 16, 7);
        spec.label_noise = 0.0;
        let ds = spec.generate().unwrap();
        let pooled = ds.pooled();
        let psi = Regularizer::L1 { lambda: 1e-9 };
        let res = centralized_prox_gd(Task::Lasso, &pooled, ds.shape(), &psi, None, 20_000).unwrap();
        let err = res.w.sub(&ds.ground_truth).norm();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn bad_step_rejected() {
        let ds = gen_lasso_dataset(4, 1, 1, 4, 0).unwrap();
        let shard = &ds.clients[0];
        let w0 = ds.initial_state();
        assert!(sequential_dual_averaging(
            Task::Lasso,
            shard,
            &Regularizer::Zero,
            DistanceGen::Euclidean,
            &w0,
            0.0,
            1,
            &FullBatch
        )
        .is_err());
        assert!(centralized_prox_gd(Task::Lasso, shard, ds.shape(), &Regularizer::Zero, Some(-1.0), 1).is_err());
    }
}
