//! Synthetic federated datasets and stochastic gradient oracles.
//!
//! Features for the low-rank task are `d×d` matrices stored row-major, so
//! every task shares the flat `n × p` feature layout and `⟨W, X⟩` is a plain
//! dot product.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FcoError, Result};
use crate::exec::Execution;
use crate::math::{ParamState, Shape};
use crate::regularizers::Regularizer;
use crate::rng::{stream, Purpose};

pub const GENERATOR_VERSION: u32 = 1;

/// Default multiplier on `λ_max` for the paired regularizer.
pub const DEFAULT_LAMBDA_FRACTION: f64 = 0.1;

pub const VALIDATION_SAMPLES: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Lasso,
    #[serde(rename = "lowrank")]
    LowRank,
    Logistic,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Lasso => "lasso",
            Task::LowRank => "lowrank",
            Task::Logistic => "logistic",
        }
    }

    /// Per-sample loss and its derivative with respect to the prediction.
    #[inline]
    fn loss_and_slope(&self, pred: f64, y: f64) -> (f64, f64) {
        match self {
            Task::Lasso | Task::LowRank => {
                let r = pred - y;
                (r * r, 2.0 * r)
            }
            Task::Logistic => {
                // softplus(pred) - y·pred, written to avoid overflow.
                let softplus = if pred > 0.0 { pred + (-pred).exp().ln_1p() } else { pred.exp().ln_1p() };
                (softplus - y * pred, sigmoid(pred) - y)
            }
        }
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Every knob of the synthetic generators. The dataset is a pure function of
/// this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub task: Task,
    /// Feature dimension for lasso/logistic, matrix side for lowrank.
    pub dim: usize,
    /// Number of ones in `w_real`, or the rank of `W_real`.
    pub support: usize,
    pub clients: usize,
    pub n_per_client: usize,
    pub seed: u64,
    /// Scale of the per-client means `μ_m`; 0 makes clients i.i.d.
    #[serde(default = "one")]
    pub mean_scale: f64,
    /// Scale of the per-sample feature noise `δ`.
    #[serde(default = "one")]
    pub feature_noise: f64,
    /// Scale of the label noise `ε` (regression tasks).
    #[serde(default = "one")]
    pub label_noise: f64,
    /// Multiplier on the ground truth weights.
    #[serde(default = "one")]
    pub truth_scale: f64,
    /// Standard deviation of `b_real`.
    #[serde(default = "one")]
    pub bias_scale: f64,
    /// Explicit regularization weight; `None` selects `0.1·λ_max`.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub preset: Option<String>,
}

fn one() -> f64 {
    1.0
}

impl GeneratorSpec {
    pub fn new(task: Task, dim: usize, support: usize, clients: usize, n_per_client: usize, seed: u64) -> Self {
        GeneratorSpec {
            task,
            dim,
            support,
            clients,
            n_per_client,
            seed,
            mean_scale: 1.0,
            feature_noise: 1.0,
            label_noise: 1.0,
            truth_scale: 1.0,
            bias_scale: 1.0,
            lambda: None,
            preset: None,
        }
    }

    /// Named configurations (I)–(IV) of the lasso and low-rank recipes.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let (task, dim, support, clients, n) = match name {
            "lasso-I" => (Task::Lasso, 1024, 512, 64, 128),
            "lasso-II" => (Task::Lasso, 1024, 64, 64, 128),
            "lasso-III" => (Task::Lasso, 1024, 8, 64, 128),
            "lasso-IV" => (Task::Lasso, 1024, 512, 256, 32),
            "lowrank-I" => (Task::LowRank, 32, 16, 64, 128),
            "lowrank-II" => (Task::LowRank, 32, 4, 64, 128),
            "lowrank-III" => (Task::LowRank, 32, 1, 64, 128),
            "lowrank-IV" => (Task::LowRank, 32, 16, 256, 32),
            "lasso-small" => (Task::Lasso, 64, 32, 8, 32),
            "lasso-II-scaled" => (Task::Lasso, 256, 16, 16, 64),
            "lowrank-scaled" => (Task::LowRank, 16, 4, 16, 64),
            "logistic-small" => (Task::Logistic, 64, 8, 8, 64),
            other => return Err(FcoError::Config(format!("unknown preset {other:?}"))),
        };
        let mut spec = GeneratorSpec::new(task, dim, support, clients, n, seed);
        spec.preset = Some(name.to_string());
        Ok(spec)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &[
            "lasso-I",
            "lasso-II",
            "lasso-III",
            "lasso-IV",
            "lowrank-I",
            "lowrank-II",
            "lowrank-III",
            "lowrank-IV",
            "lasso-small",
            "lasso-II-scaled",
            "lowrank-scaled",
            "logistic-small",
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.clients == 0 || self.n_per_client == 0 {
            return Err(FcoError::param("dim, clients and n_per_client must be positive"));
        }
        if self.support > self.dim {
            return Err(FcoError::param(format!("support {} exceeds dimension {}", self.support, self.dim)));
        }
        if self.task == Task::LowRank && self.support == 0 {
            return Err(FcoError::param("low-rank truth needs rank >= 1"));
        }
        let knobs = [self.mean_scale, self.feature_noise, self.label_noise, self.truth_scale, self.bias_scale];
        if knobs.iter().any(|k| !k.is_finite() || *k < 0.0) {
            return Err(FcoError::param("generator scales must be finite and >= 0"));
        }
        if let Some(l) = self.lambda {
            if !l.is_finite() || l < 0.0 {
                return Err(FcoError::param(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        match self.task {
            Task::LowRank => Shape::Matrix(self.dim, self.dim),
            _ => Shape::Flat(self.dim),
        }
    }

    fn ground_truth(&self) -> ParamState {
        let shape = self.shape();
        let mut w = vec![0.0; shape.len()];
        match self.task {
            Task::LowRank => (0..self.support).for_each(|i| w[i * self.dim + i] = self.truth_scale),
            _ => w[..self.support].iter_mut().for_each(|v| *v = self.truth_scale),
        }
        let b: f64 = stream(self.seed, Purpose::TruthBias, &[]).sample(StandardNormal);
        ParamState::new(shape, w, self.bias_scale * b).expect("finite ground truth")
    }

    /// Draw `n` samples around `mean` from the stream family `(purpose, key)`.
    fn draw_shard(&self, truth: &ParamState, mean: Vec<f64>, n: usize, purpose: Purpose, key: u64) -> ClientShard {
        let p = self.shape().len();
        let mut features = Vec::with_capacity(n * p);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream(self.seed, purpose, &[key, i as u64]);
            let start = features.len();
            for mu in &mean {
                let delta: f64 = rng.sample(StandardNormal);
                features.push(mu + self.feature_noise * delta);
            }
            let x = &features[start..];
            let signal = dot(truth.weights(), x) + truth.bias();
            let y = match self.task {
                Task::Lasso | Task::LowRank => {
                    let eps: f64 = rng.sample(StandardNormal);
                    signal + self.label_noise * eps
                }
                Task::Logistic => {
                    let u: f64 = rng.random();
                    if u < sigmoid(signal) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            labels.push(y);
        }
        ClientShard { features, labels, client_mean: mean, dim: p }
    }

    fn draw_mean(&self, purpose: Purpose, key: u64) -> Vec<f64> {
        let p = self.shape().len();
        let mut rng = stream(self.seed, purpose, &[key]);
        (0..p)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                self.mean_scale * v
            })
            .collect()
    }

    fn client_shard(&self, truth: &ParamState, m: usize) -> ClientShard {
        let mean = self.draw_mean(Purpose::ClientMean, m as u64);
        self.draw_shard(truth, mean, self.n_per_client, Purpose::Sample, m as u64)
    }

    pub fn generate(&self) -> Result<FederatedDataset> {
        self.generate_with(Execution::default())
    }

    pub fn generate_with(&self, exec: Execution) -> Result<FederatedDataset> {
        self.validate()?;
        let truth = self.ground_truth();
        let ids: Vec<usize> = (0..self.clients).collect();
        let clients = exec.map(&ids, |&m| self.client_shard(&truth, m));
        let mut ds = FederatedDataset::from_parts(self.clone(), clients, truth, 0.0);
        ds.lambda = match self.lambda {
            Some(l) => l,
            None => DEFAULT_LAMBDA_FRACTION * ds.lambda_max(),
        };
        Ok(ds)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    /// Row-major `n × dim` feature matrix.
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    pub client_mean: Vec<f64>,
    pub dim: usize,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Mean loss and gradient of the smooth part over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    /// Weight gradient in the weight block, bias gradient in the bias channel.
    pub grad: ParamState,
    pub loss: f64,
}

impl GradSample {
    pub fn grad_b(&self) -> f64 {
        self.grad.bias()
    }
}

/// Mean gradient of the per-sample loss over `batch`.
pub fn stochastic_grad(task: Task, shard: &ClientShard, w: &ParamState, batch: &[usize]) -> Result<GradSample> {
    if batch.is_empty() {
        return Err(FcoError::param("empty batch"));
    }
    if w.dim() != shard.dim {
        return Err(FcoError::dim(format!("state has {} weights, shard has {} features", w.dim(), shard.dim)));
    }
    let mut grad = ParamState::zeros(w.shape());
    let mut gb = 0.0;
    let mut loss = 0.0;
    for &i in batch {
        if i >= shard.len() {
            return Err(FcoError::param(format!("batch index {i} out of range {}", shard.len())));
        }
        let x = shard.row(i);
        let pred = dot(w.weights(), x) + w.bias();
        let (l, slope) = task.loss_and_slope(pred, shard.labels[i]);
        loss += l;
        gb += slope;
        for (g, xi) in grad.weights_mut().iter_mut().zip(x) {
            *g += slope * xi;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grad.set_bias(gb);
    grad.scale(inv);
    Ok(GradSample { grad, loss: loss * inv })
}

/// Full-shard gradient `∇F_m(w)`.
pub fn full_grad(task: Task, shard: &ClientShard, w: &ParamState) -> Result<GradSample> {
    stochastic_grad(task, shard, w, &shard.all_indices())
}

#[derive(Clone, Debug)]
pub struct FederatedDataset {
    pub spec: GeneratorSpec,
    pub clients: Vec<ClientShard>,
    /// `w_real` (or `W_real`) with `b_real` in the bias channel.
    pub ground_truth: ParamState,
    pub lambda: f64,
    validation: OnceLock<ClientShard>,
}

impl PartialEq for FederatedDataset {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.clients == other.clients
            && self.ground_truth == other.ground_truth
            && self.lambda == other.lambda
    }
}

pub fn gen_lasso_dataset(
    d: usize,
    d1_ones: usize,
    m: usize,
    n_per_client: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    GeneratorSpec::new(Task::Lasso, d, d1_ones, m, n_per_client, seed).generate()
}

pub fn gen_lowrank_dataset(
    d: usize,
    rank: usize,
    m: usize,
    n_per_client: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    GeneratorSpec::new(Task::LowRank, d, rank, m, n_per_client, seed).generate()
}

pub fn gen_logistic_dataset(
    d: usize,
    d1_ones: usize,
    m: usize,
    n_per_client: usize,
    seed: u64,
) -> Result<FederatedDataset> {
    GeneratorSpec::new(Task::Logistic, d, d1_ones, m, n_per_client, seed).generate()
}

impl FederatedDataset {
    pub fn from_parts(spec: GeneratorSpec, clients: Vec<ClientShard>, ground_truth: ParamState, lambda: f64) -> Self {
        FederatedDataset { spec, clients, ground_truth, lambda, validation: OnceLock::new() }
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn shape(&self) -> Shape {
        self.spec.shape()
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn initial_state(&self) -> ParamState {
        ParamState::zeros(self.shape())
    }

    /// The regularizer paired with the task at weight `lambda`.
    pub fn regularizer_with(&self, lambda: f64) -> Regularizer {
        if lambda == 0.0 {
            return Regularizer::Zero;
        }
        match self.task() {
            Task::LowRank => Regularizer::Nuclear { lambda, rows: self.spec.dim, cols: self.spec.dim },
            _ => Regularizer::L1 { lambda },
        }
    }

    pub fn default_regularizer(&self) -> Regularizer {
        self.regularizer_with(self.lambda)
    }

    /// All samples of all clients as one shard.
    pub fn pooled(&self) -> ClientShard {
        let dim = self.shape().len();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for c in &self.clients {
            features.extend_from_slice(&c.features);
            labels.extend_from_slice(&c.labels);
        }
        ClientShard { features, labels, client_mean: vec![0.0; dim], dim }
    }

    /// Held-out pool drawn around a fresh client-mean.
    pub fn validation_set(&self) -> &ClientShard {
        self.validation.get_or_init(|| {
            let mean = self.spec.draw_mean(Purpose::Validation, u64::MAX);
            self.spec.draw_shard(&self.ground_truth, mean, VALIDATION_SAMPLES, Purpose::Validation, 0)
        })
    }

    /// `λ_max = ‖(1/n)Xᵀ(y − ȳ)‖` on pooled data: sup-norm for vectors,
    /// spectral norm for the matrix task.
    pub fn lambda_max(&self) -> f64 {
        let pooled = self.pooled();
        let n = pooled.len() as f64;
        let ybar = pooled.labels.iter().sum::<f64>() / n;
        let mut corr = vec![0.0; pooled.dim];
        for i in 0..pooled.len() {
            let r = pooled.labels[i] - ybar;
            for (c, x) in corr.iter_mut().zip(pooled.row(i)) {
                *c += r * x / n;
            }
        }
        match self.task() {
            Task::LowRank => {
                let d = self.spec.dim;
                nalgebra::DMatrix::from_row_slice(d, d, &corr).singular_values().max()
            }
            _ => corr.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    /// Smooth part `F(w) = (1/M) Σ_m F_m(w)`.
    pub fn smooth_objective(&self, w: &ParamState) -> Result<f64> {
        let task = self.task();
        let mut total = 0.0;
        for c in &self.clients {
            total += full_grad_loss(task, c, w)?;
        }
        Ok(total / self.clients.len() as f64)
    }

    /// `∇F(w)` averaged over clients.
    pub fn full_gradient(&self, w: &ParamState) -> Result<ParamState> {
        let grads =
            self.clients.iter().map(|c| full_grad(self.task(), c, w).map(|g| g.grad)).collect::<Result<Vec<_>>>()?;
        Ok(ParamState::mean(&grads).expect("at least one client"))
    }

    pub fn validation_mse(&self, w: &ParamState) -> f64 {
        let v = self.validation_set();
        let mut acc = 0.0;
        for i in 0..v.len() {
            let r = dot(w.weights(), v.row(i)) + w.bias() - v.labels[i];
            acc += r * r;
        }
        acc / v.len() as f64
    }
}

fn full_grad_loss(task: Task, shard: &ClientShard, w: &ParamState) -> Result<f64> {
    if w.dim() != shard.dim {
        return Err(FcoError::dim("state and shard dimensions differ"));
    }
    let mut loss = 0.0;
    for i in 0..shard.len() {
        let pred = dot(w.weights(), shard.row(i)) + w.bias();
        loss += task.loss_and_slope(pred, shard.labels[i]).0;
    }
    Ok(loss / shard.len() as f64)
}

/// `Φ(w) = F(w) + ψ(w)`; `+∞` when `w` is outside `dom ψ`.
pub fn full_objective(dataset: &FederatedDataset, psi: &Regularizer, w: &ParamState) -> Result<f64> {
    let reg = psi.value(w)?;
    if reg.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(dataset.smooth_objective(w)? + reg)
}
