//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::{Algorithm, HyperParams, LocalWork, TraceLevel};
use crate::error::{FcoError, Result};
use crate::problems::{FederatedDataset, GeneratorSpec, Task};
use crate::regularizers::Regularizer;

use super::store;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub trace: TraceSetting,
    pub dataset: DatasetSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularizer: Option<Regularizer>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub estimate: EstimateSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TraceSetting {
    #[default]
    Metrics,
    Diagnostic,
}

impl From<TraceSetting> for TraceLevel {
    fn from(t: TraceSetting) -> Self {
        match t {
            TraceSetting::Metrics => TraceLevel::Metrics,
            TraceSetting::Diagnostic => TraceLevel::Diagnostic,
        }
    }
}

/// Where the data comes from: a preset, a saved dataset file, or explicit
/// generator parameters. Explicit fields override the preset's.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_per_client: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// `λ` as a fraction of `λ_max`; exclusive with `lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_eta_c")]
    pub eta_c: Vec<f64>,
    #[serde(default = "default_eta_s")]
    pub eta_s: Vec<f64>,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Clients per round; all clients when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_steps: Option<usize>,
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Sweep target metric; task default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            algorithms: default_algorithms(),
            eta_c: default_eta_c(),
            eta_s: default_eta_s(),
            rounds: default_rounds(),
            cohort: None,
            batch: default_batch(),
            epochs: None,
            local_steps: None,
            eval_every: 1,
            target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Batch size for `σ̂`; the run batch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// Proximal-gradient epochs used for the reference solution behind `B̂`.
    #[serde(default = "default_reference_epochs")]
    pub reference_epochs: usize,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection { samples: default_samples(), batch: None, reference_epochs: default_reference_epochs() }
    }
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::FedDualAvg, Algorithm::FedMid]
}
fn default_eta_c() -> Vec<f64> {
    vec![0.01]
}
fn default_eta_s() -> Vec<f64> {
    vec![1.0]
}
fn default_rounds() -> usize {
    100
}
fn default_batch() -> usize {
    10
}
fn one() -> usize {
    1
}
fn default_samples() -> usize {
    16
}
fn default_reference_epochs() -> usize {
    500
}

/// The learning-rate grid used for the paper's sweeps.
pub const PAPER_ETA_C: [f64; 7] = [0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0];
pub const PAPER_ETA_S: [f64; 7] = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| FcoError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FcoError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative dataset paths are resolved against the config file.
        if let (Some(p), Some(dir)) = (cfg.dataset.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.preset.is_some() && d.path.is_some() {
            return Err(FcoError::Config("dataset: give either preset or path, not both".into()));
        }
        if d.lambda.is_some() && d.lambda_fraction.is_some() {
            return Err(FcoError::Config("dataset: lambda and lambda_fraction are exclusive".into()));
        }
        if let Some(f) = d.lambda_fraction {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(FcoError::Config(format!("lambda_fraction must be finite and >= 0, got {f}")));
            }
        }
        if let Some(p) = &d.preset {
            if !GeneratorSpec::preset_names().contains(&p.as_str()) {
                return Err(FcoError::Config(format!(
                    "unknown preset {p:?}; known presets: {}",
                    GeneratorSpec::preset_names().join(", ")
                )));
            }
        }
        let r = &self.run;
        if r.algorithms.is_empty() || r.eta_c.is_empty() || r.eta_s.is_empty() {
            return Err(FcoError::Config("run: algorithms, eta_c and eta_s must be non-empty".into()));
        }
        if r.epochs.is_some() && r.local_steps.is_some() {
            return Err(FcoError::Config("run: epochs and local_steps are exclusive".into()));
        }
        if r.eval_every == 0 || r.batch == 0 {
            return Err(FcoError::Config("run: eval_every and batch must be positive".into()));
        }
        if r.eta_c.iter().chain(&r.eta_s).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(FcoError::Config("run: learning rates must be positive and finite".into()));
        }
        if let Some(psi) = &self.regularizer {
            psi.validate().map_err(|e| FcoError::Config(e.to_string()))?;
        }
        if self.estimate.samples == 0 || self.estimate.batch == Some(0) {
            return Err(FcoError::Config("estimate: samples and batch must be positive".into()));
        }
        Ok(())
    }

    /// Generator parameters after applying presets, overrides and the seed.
    pub fn generator_spec(&self) -> Result<GeneratorSpec> {
        let d = &self.dataset;
        let mut spec = match &d.preset {
            Some(p) => GeneratorSpec::preset(p, self.seed)?,
            None => {
                let missing = |f: &str| FcoError::Config(format!("dataset: {f} is required without a preset"));
                GeneratorSpec::new(
                    d.task.ok_or_else(|| missing("task"))?,
                    d.dim.ok_or_else(|| missing("dim"))?,
                    d.support.ok_or_else(|| missing("support"))?,
                    d.clients.ok_or_else(|| missing("clients"))?,
                    d.n_per_client.ok_or_else(|| missing("n_per_client"))?,
                    self.seed,
                )
            }
        };
        if d.preset.is_some() {
            if let Some(t) = d.task {
                if t != spec.task {
                    return Err(FcoError::Config(format!(
                        "dataset: task {} conflicts with preset task {}",
                        t.name(),
                        spec.task.name()
                    )));
                }
            }
            spec.dim = d.dim.unwrap_or(spec.dim);
            spec.support = d.support.unwrap_or(spec.support);
            spec.clients = d.clients.unwrap_or(spec.clients);
            spec.n_per_client = d.n_per_client.unwrap_or(spec.n_per_client);
        }
        spec.mean_scale = d.mean_scale.unwrap_or(spec.mean_scale);
        spec.feature_noise = d.feature_noise.unwrap_or(spec.feature_noise);
        spec.label_noise = d.label_noise.unwrap_or(spec.label_noise);
        spec.truth_scale = d.truth_scale.unwrap_or(spec.truth_scale);
        spec.bias_scale = d.bias_scale.unwrap_or(spec.bias_scale);
        spec.lambda = d.lambda;
        spec.validate().map_err(|e| FcoError::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Load or generate the dataset, then apply `lambda_fraction`.
    pub fn dataset(&self) -> Result<FederatedDataset> {
        let mut ds = match &self.dataset.path {
            Some(p) => {
                let mut ds = store::read_dataset(p)?;
                if let Some(l) = self.dataset.lambda {
                    ds.lambda = l;
                }
                ds
            }
            None => self.generator_spec()?.generate()?,
        };
        if let Some(f) = self.dataset.lambda_fraction {
            ds.lambda = f * ds.lambda_max();
        }
        Ok(ds)
    }

    pub fn regularizer_for(&self, ds: &FederatedDataset) -> Regularizer {
        self.regularizer.clone().unwrap_or_else(|| ds.default_regularizer())
    }

    pub fn local_work(&self) -> LocalWork {
        match (self.run.local_steps, self.run.epochs) {
            (Some(k), _) => LocalWork::Steps(k),
            (None, Some(e)) => LocalWork::Epochs(e),
            (None, None) => LocalWork::Epochs(1),
        }
    }

    /// Grid cells in canonical order: algorithm, then `η_c`, then `η_s`.
    pub fn cells(&self, ds: &FederatedDataset) -> Vec<(Algorithm, HyperParams)> {
        let mut out = Vec::new();
        for &alg in &self.run.algorithms {
            for &eta_c in &self.run.eta_c {
                for &eta_s in &self.run.eta_s {
                    let hp = HyperParams {
                        eta_c,
                        eta_s,
                        local: self.local_work(),
                        rounds: self.run.rounds,
                        cohort: self.run.cohort.unwrap_or(ds.num_clients()),
                        batch: self.run.batch,
                        seed: self.seed,
                    };
                    out.push((alg, hp));
                }
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON form with `output_dir` removed.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut c = self.clone();
        c.output_dir = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
