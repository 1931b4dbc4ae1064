//! Federated algorithms as round-structured state machines.
//!
//! One round: sample a cohort, broadcast the server state, let every cohort
//! member run its local steps (possibly in parallel), average the client
//! updates and apply the server step. Client randomness is keyed by
//! `(seed, round, client)`, so parallel and sequential execution agree bit
//! for bit.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::diagnostics;
use crate::error::{FcoError, Result};
use crate::exec::Execution;
use crate::math::{DistanceGen, ParamState};
use crate::problems::{stochastic_grad, FederatedDataset};
use crate::regularizers::{composite_mirror_map, subgradient, Regularizer};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Local SGD on the smooth part, ψ ignored.
    #[serde(rename = "fedavg")]
    FedAvg,
    /// Local subgradient steps on `F + ψ`.
    #[serde(rename = "fedavg_subgrad")]
    FedAvgSubgrad,
    #[serde(rename = "fedmid")]
    FedMid,
    #[serde(rename = "fedmid_osp")]
    FedMidOsp,
    #[serde(rename = "feddualavg")]
    FedDualAvg,
    #[serde(rename = "feddualavg_osp")]
    FedDualAvgOsp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::FedAvg,
        Algorithm::FedAvgSubgrad,
        Algorithm::FedMid,
        Algorithm::FedMidOsp,
        Algorithm::FedDualAvg,
        Algorithm::FedDualAvgOsp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedAvgSubgrad => "fedavg_subgrad",
            Algorithm::FedMid => "fedmid",
            Algorithm::FedMidOsp => "fedmid_osp",
            Algorithm::FedDualAvg => "feddualavg",
            Algorithm::FedDualAvgOsp => "feddualavg_osp",
        }
    }

    /// Server keeps a dual state and clients average in the dual space.
    pub fn is_dual(&self) -> bool {
        matches!(self, Algorithm::FedDualAvg | Algorithm::FedDualAvgOsp)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = FcoError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| FcoError::Config(format!("unknown algorithm {s:?}")))
    }
}

/// Amount of local work per round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalWork {
    /// Exactly `K` local steps on every client.
    Steps(usize),
    /// `ceil(n_m / batch) · epochs` steps on client `m`.
    Epochs(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta_c: f64,
    pub eta_s: f64,
    pub local: LocalWork,
    pub rounds: usize,
    pub cohort: usize,
    pub batch: usize,
    pub seed: u64,
}

impl HyperParams {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if !(self.eta_c > 0.0 && self.eta_c.is_finite()) || !(self.eta_s > 0.0 && self.eta_s.is_finite()) {
            return Err(FcoError::param("learning rates must be positive and finite"));
        }
        let k = match self.local {
            LocalWork::Steps(k) | LocalWork::Epochs(k) => k,
        };
        if k == 0 || self.batch == 0 || self.cohort == 0 {
            return Err(FcoError::param("local work, batch and cohort must be positive"));
        }
        if self.cohort > num_clients {
            return Err(FcoError::param(format!("cohort {} exceeds number of clients {num_clients}", self.cohort)));
        }
        Ok(())
    }

    pub fn client_steps(&self, n: usize) -> usize {
        match self.local {
            LocalWork::Steps(k) => k,
            LocalWork::Epochs(e) => n.div_ceil(self.batch) * e,
        }
    }

    /// Common `K` used by the server steps and the `η̃` schedule.
    pub fn nominal_steps(&self, dataset: &FederatedDataset) -> usize {
        let n_max = dataset.clients.iter().map(|c| c.len()).max().unwrap_or(0);
        self.client_steps(n_max)
    }
}

/// `η̃_{r,k} = η_s η_c r K + η_c k`.
pub fn dual_averaging_schedule(eta_s: f64, eta_c: f64, round: usize, step: usize, nominal_k: usize) -> f64 {
    eta_s * eta_c * (round * nominal_k) as f64 + eta_c * step as f64
}

/// Source of the mini-batch index sequence `ξ_{r,k}^m`.
pub trait BatchSampler: Send + Sync {
    /// Batches for `steps` local steps of `client` in `round`, over a shard
    /// of size `n`.
    fn schedule(&self, round: usize, client: usize, n: usize, steps: usize) -> Vec<Vec<usize>>;
}

/// Shuffle the shard once per epoch and take contiguous batches.
#[derive(Clone, Copy, Debug)]
pub struct ShuffledEpochs {
    pub seed: u64,
    pub batch: usize,
}

impl BatchSampler for ShuffledEpochs {
    fn schedule(&self, round: usize, client: usize, n: usize, steps: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(steps);
        let mut epoch = 0u64;
        while out.len() < steps {
            let mut rng = stream(self.seed, Purpose::Batches, &[round as u64, client as u64, epoch]);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            for chunk in perm.chunks(self.batch.max(1)) {
                if out.len() == steps {
                    break;
                }
                out.push(chunk.to_vec());
            }
            epoch += 1;
        }
        out
    }
}

/// Deterministic full-shard batches.
#[derive(Clone, Copy, Debug, Default)]
pub struct FullBatch;

impl BatchSampler for FullBatch {
    fn schedule(&self, _round: usize, _client: usize, n: usize, steps: usize) -> Vec<Vec<usize>> {
        vec![(0..n).collect(); steps]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub primal: ParamState,
    /// Present iff the algorithm averages in the dual space.
    pub dual: Option<ParamState>,
}

impl ServerState {
    /// Round-0 state; dual algorithms start from `z₀ = ∇h(w₀)`.
    pub fn init(algorithm: Algorithm, h: DistanceGen, w0: ParamState) -> Self {
        let dual = algorithm.is_dual().then(|| h.grad(&w0));
        ServerState { round: 0, primal: w0, dual }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLevel {
    /// Round summaries only.
    #[default]
    Metrics,
    /// Adds every client's per-step primal, dual and gradient.
    Diagnostic,
}

/// Per-step history of one client within a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientPath {
    pub client: usize,
    pub steps: usize,
    /// Primal iterates. Primal algorithms record `w_{r,0..=K}`, dual
    /// algorithms the retrieved `w_{r,0..K}`.
    pub primals: Vec<ParamState>,
    /// Dual iterates `z_{r,0..=K}` (dual algorithms only).
    pub duals: Vec<ParamState>,
    /// Gradients `g_{r,0..K}` actually applied.
    pub grads: Vec<ParamState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrace {
    pub round: usize,
    pub cohort: Vec<usize>,
    pub before: ServerState,
    pub after: ServerState,
    /// Pseudo-gradient `Δ_r` (primal or dual, per algorithm).
    pub delta: ParamState,
    pub nominal_k: usize,
    /// Some client ran a step count different from the nominal `K`.
    pub k_mismatch: bool,
    pub clients: Option<Vec<ClientPath>>,
}

pub struct RoundContext<'a> {
    pub dataset: &'a FederatedDataset,
    pub psi: &'a Regularizer,
    pub hp: &'a HyperParams,
    pub h: DistanceGen,
    pub sampler: &'a dyn BatchSampler,
    pub level: TraceLevel,
    pub exec: Execution,
}

impl<'a> RoundContext<'a> {
    pub fn new(
        dataset: &'a FederatedDataset,
        psi: &'a Regularizer,
        hp: &'a HyperParams,
        sampler: &'a dyn BatchSampler,
    ) -> Self {
        RoundContext {
            dataset,
            psi,
            hp,
            h: DistanceGen::Euclidean,
            sampler,
            level: TraceLevel::Metrics,
            exec: Execution::default(),
        }
    }

    pub fn with_level(mut self, level: TraceLevel) -> Self {
        self.level = level;
        self
    }

    pub fn with_exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }
}

/// Cohort `S_r`: uniform without replacement, sorted ascending.
pub fn sample_cohort(seed: u64, round: usize, num_clients: usize, cohort: usize) -> Vec<usize> {
    if cohort >= num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = stream(seed, Purpose::Cohort, &[round as u64]);
    let mut picked = index::sample(&mut rng, num_clients, cohort).into_vec();
    picked.sort_unstable();
    picked
}

struct ClientOutcome {
    /// `w_{r,K}` for primal algorithms, `z_{r,K}` for dual ones.
    end: ParamState,
    steps: usize,
    path: Option<ClientPath>,
}

fn diverged(round: usize) -> FcoError {
    FcoError::Diverged { round }
}

fn run_client(
    algorithm: Algorithm,
    ctx: &RoundContext<'_>,
    server: &ServerState,
    client: usize,
    nominal_k: usize,
) -> Result<ClientOutcome> {
    let shard = &ctx.dataset.clients[client];
    let task = ctx.dataset.task();
    let hp = ctx.hp;
    let r = server.round;
    let steps = hp.client_steps(shard.len());
    let batches = ctx.sampler.schedule(r, client, shard.len(), steps);
    let record = ctx.level == TraceLevel::Diagnostic;
    let mut path = ClientPath { client, steps, primals: Vec::new(), duals: Vec::new(), grads: Vec::new() };

    let end = if algorithm.is_dual() {
        let mut z = server.dual.clone().ok_or_else(|| FcoError::param("dual algorithm needs a server dual"))?;
        for (k, batch) in batches.iter().enumerate() {
            let w = if algorithm == Algorithm::FedDualAvg {
                let eta_tilde = dual_averaging_schedule(hp.eta_s, hp.eta_c, r, k, nominal_k);
                composite_mirror_map(ctx.h, eta_tilde, ctx.psi, &z)?
            } else {
                ctx.h.grad_conj(&z)
            };
            let g = stochastic_grad(task, shard, &w, batch)?.grad;
            if record {
                path.duals.push(z.clone());
                path.primals.push(w);
            }
            z.axpy(-hp.eta_c, &g);
            if !z.is_finite() {
                return Err(diverged(r));
            }
            if record {
                path.grads.push(g);
            }
        }
        if record {
            path.duals.push(z.clone());
        }
        z
    } else {
        let mut w = server.primal.clone();
        if record {
            path.primals.push(w.clone());
        }
        for batch in &batches {
            let mut g = stochastic_grad(task, shard, &w, batch)?.grad;
            if algorithm == Algorithm::FedAvgSubgrad {
                g.axpy(1.0, &subgradient(ctx.psi, &w)?);
            }
            let mut y = ctx.h.grad(&w);
            y.axpy(-hp.eta_c, &g);
            if !y.is_finite() {
                return Err(diverged(r));
            }
            w = match algorithm {
                Algorithm::FedMid => composite_mirror_map(ctx.h, hp.eta_c, ctx.psi, &y)?,
                _ => ctx.h.grad_conj(&y),
            };
            if record {
                path.primals.push(w.clone());
                path.grads.push(g);
            }
        }
        w
    };
    Ok(ClientOutcome { end, steps, path: record.then_some(path) })
}

/// FedMid / FedMid-OSP server step:
/// `w_{r+1} = ∇(h + η_s η_c K ψ)*(∇h(w_r) + η_s Δ_r)` with
/// `Δ_r` the mean primal update of the given client end states.
pub fn primal_server_update(
    h: DistanceGen,
    psi: &Regularizer,
    eta_s: f64,
    eta_c: f64,
    nominal_k: usize,
    start: &ParamState,
    client_ends: &[ParamState],
) -> Result<(ParamState, ParamState)> {
    let delta = mean_update(start, client_ends)?;
    let mut y = h.grad(start);
    y.axpy(eta_s, &delta);
    let w = composite_mirror_map(h, eta_s * eta_c * nominal_k as f64, psi, &y)?;
    Ok((w, delta))
}

fn mean_update(start: &ParamState, ends: &[ParamState]) -> Result<ParamState> {
    let mut delta = ParamState::zeros(start.shape());
    if ends.is_empty() {
        return Err(FcoError::param("empty cohort"));
    }
    for e in ends {
        e.ensure_same_shape(start)?;
        delta.axpy(1.0, &e.sub(start));
    }
    delta.scale(1.0 / ends.len() as f64);
    Ok(delta)
}

/// Execute one round of `algorithm` on the given cohort.
pub fn round(
    algorithm: Algorithm,
    server: &ServerState,
    ctx: &RoundContext<'_>,
    cohort: &[usize],
) -> Result<(ServerState, RoundTrace)> {
    let m = ctx.dataset.num_clients();
    if cohort.is_empty() || cohort.iter().any(|&c| c >= m) {
        return Err(FcoError::param("cohort must be a non-empty subset of the clients"));
    }
    if algorithm.is_dual() != server.dual.is_some() {
        return Err(FcoError::param(format!("server state does not match {algorithm}")));
    }
    if algorithm == Algorithm::FedAvgSubgrad && ctx.psi.is_characteristic() {
        return Err(FcoError::Unsupported("subgradient FedAvg needs a penalty-type regularizer".to_string()));
    }
    let hp = ctx.hp;
    let r = server.round;
    let nominal_k = hp.nominal_steps(ctx.dataset);
    let outcomes = ctx.exec.map(cohort, |&c| run_client(algorithm, ctx, server, c, nominal_k));
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let k_mismatch = outcomes.iter().any(|o| o.steps != nominal_k);
    let ends: Vec<ParamState> = outcomes.iter().map(|o| o.end.clone()).collect();

    let (next, delta) = match algorithm {
        Algorithm::FedAvg | Algorithm::FedAvgSubgrad => {
            let delta = mean_update(&server.primal, &ends)?;
            let mut w = server.primal.clone();
            w.axpy(hp.eta_s, &delta);
            (ServerState { round: r + 1, primal: w, dual: None }, delta)
        }
        Algorithm::FedMid | Algorithm::FedMidOsp => {
            let (w, delta) =
                primal_server_update(ctx.h, ctx.psi, hp.eta_s, hp.eta_c, nominal_k, &server.primal, &ends)?;
            (ServerState { round: r + 1, primal: w, dual: None }, delta)
        }
        Algorithm::FedDualAvg | Algorithm::FedDualAvgOsp => {
            let z_r = server.dual.as_ref().expect("checked above");
            let delta = mean_update(z_r, &ends)?;
            let mut z = z_r.clone();
            z.axpy(hp.eta_s, &delta);
            if !z.is_finite() {
                return Err(diverged(r));
            }
            let eta = hp.eta_s * hp.eta_c * ((r + 1) * nominal_k) as f64;
            let w = composite_mirror_map(ctx.h, eta, ctx.psi, &z)?;
            (ServerState { round: r + 1, primal: w, dual: Some(z) }, delta)
        }
    };
    if !next.primal.is_finite() {
        return Err(diverged(r));
    }
    let clients = match ctx.level {
        TraceLevel::Diagnostic => Some(outcomes.into_iter().filter_map(|o| o.path).collect()),
        TraceLevel::Metrics => None,
    };
    let trace = RoundTrace {
        round: r,
        cohort: cohort.to_vec(),
        before: server.clone(),
        after: next.clone(),
        delta,
        nominal_k,
        k_mismatch,
        clients,
    };
    Ok((next, trace))
}

pub fn fedmid_round(
    server: &ServerState,
    ctx: &RoundContext<'_>,
    cohort: &[usize],
) -> Result<(ServerState, RoundTrace)> {
    round(Algorithm::FedMid, server, ctx, cohort)
}

pub fn feddualavg_round(
    server: &ServerState,
    ctx: &RoundContext<'_>,
    cohort: &[usize],
) -> Result<(ServerState, RoundTrace)> {
    round(Algorithm::FedDualAvg, server, ctx, cohort)
}

pub fn fedmid_osp_round(
    server: &ServerState,
    ctx: &RoundContext<'_>,
    cohort: &[usize],
) -> Result<(ServerState, RoundTrace)> {
    round(Algorithm::FedMidOsp, server, ctx, cohort)
}

pub fn feddualavg_osp_round(
    server: &ServerState,
    ctx: &RoundContext<'_>,
    cohort: &[usize],
) -> Result<(ServerState, RoundTrace)> {
    round(Algorithm::FedDualAvgOsp, server, ctx, cohort)
}

pub fn fedavg_subgrad_round(
    server: &ServerState,
    ctx: &RoundContext<'_>,
    cohort: &[usize],
) -> Result<(ServerState, RoundTrace)> {
    round(Algorithm::FedAvgSubgrad, server, ctx, cohort)
}

#[derive(Clone)]
pub struct RunOptions {
    /// Evaluate every `eval_every` rounds and after the last round.
    pub eval_every: usize,
    pub level: TraceLevel,
    /// Keep the per-round traces in the result.
    pub keep_traces: bool,
    pub exec: Execution,
    pub h: DistanceGen,
    /// Overrides the default shuffled-epoch sampler keyed by `hp.seed`.
    pub sampler: Option<Arc<dyn BatchSampler>>,
    /// Starting point; zero when absent.
    pub w0: Option<ParamState>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            eval_every: 1,
            level: TraceLevel::Metrics,
            keep_traces: false,
            exec: Execution::default(),
            h: DistanceGen::Euclidean,
            sampler: None,
            w0: None,
        }
    }
}

impl fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunOptions")
            .field("eval_every", &self.eval_every)
            .field("level", &self.level)
            .field("keep_traces", &self.keep_traces)
            .field("exec", &self.exec)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPoint {
    /// Number of completed rounds.
    pub round: usize,
    pub metrics: Vec<(String, f64)>,
}

impl EvalPoint {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub hp: HyperParams,
    pub final_state: ServerState,
    pub series: Vec<EvalPoint>,
    pub traces: Vec<RoundTrace>,
}

impl RunResult {
    pub fn metric_series(&self, name: &str) -> Vec<(usize, f64)> {
        self.series.iter().filter_map(|p| p.get(name).map(|v| (p.round, v))).collect()
    }
}

/// Run `hp.rounds` rounds from `w₀`.
pub fn run(
    algorithm: Algorithm,
    dataset: &FederatedDataset,
    psi: &Regularizer,
    hp: &HyperParams,
    options: &RunOptions,
) -> Result<RunResult> {
    hp.validate(dataset.num_clients())?;
    psi.validate()?;
    if options.eval_every == 0 {
        return Err(FcoError::param("eval_every must be positive"));
    }
    let default_sampler = ShuffledEpochs { seed: hp.seed, batch: hp.batch };
    let sampler: &dyn BatchSampler = match &options.sampler {
        Some(s) => s.as_ref(),
        None => &default_sampler,
    };
    let ctx = RoundContext { dataset, psi, hp, h: options.h, sampler, level: options.level, exec: options.exec };
    let w0 = options.w0.clone().unwrap_or_else(|| dataset.initial_state());
    w0.ensure_same_shape(&dataset.initial_state())?;
    let mut server = ServerState::init(algorithm, options.h, w0);
    let mut series = Vec::new();
    let mut traces = Vec::new();
    for r in 0..hp.rounds {
        let cohort = sample_cohort(hp.seed, r, dataset.num_clients(), hp.cohort);
        let (next, trace) = round(algorithm, &server, &ctx, &cohort)?;
        server = next;
        if options.keep_traces {
            traces.push(trace);
        }
        let done = r + 1;
        if done % options.eval_every == 0 || done == hp.rounds {
            let metrics = diagnostics::evaluate(dataset, psi, &server.primal)?;
            // Finite iterates with an overflowing loss are divergence too.
            if metrics.iter().any(|(_, v)| !v.is_finite()) {
                return Err(diverged(r));
            }
            series.push(EvalPoint { round: done, metrics });
        }
    }
    Ok(RunResult { algorithm, hp: hp.clone(), final_state: server, series, traces })
}
