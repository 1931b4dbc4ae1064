//! On-disk artifacts: the binary dataset format, its JSON sidecar and
//! atomic file writes.
//!
//! `dataset.bin` layout, all integers `u64` and all floats `f64`, little
//! endian:
//!
//! ```text
//! "FEDCODS1"
//! spec_len, spec JSON (GeneratorSpec)
//! lambda
//! p, w_real[p], b_real
//! M
//! M × { n, dim, mean[dim], features[n·dim], labels[n] }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FcoError, Result};
use crate::math::ParamState;
use crate::problems::{ClientShard, FederatedDataset, GeneratorSpec, Task, GENERATOR_VERSION};

pub const MAGIC: &[u8; 8] = b"FEDCODS1";

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| FcoError::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| FcoError::Validation(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|v| self.0.extend_from_slice(&v.to_le_bytes()));
    }
}

pub fn encode_dataset(ds: &FederatedDataset) -> Vec<u8> {
    let mut w = Writer(MAGIC.to_vec());
    let spec = serde_json::to_vec(&ds.spec).expect("spec serializes");
    w.u64(spec.len());
    w.0.extend_from_slice(&spec);
    w.f64s(&[ds.lambda]);
    w.u64(ds.ground_truth.weights().len());
    w.f64s(ds.ground_truth.weights());
    w.f64s(&[ds.ground_truth.bias()]);
    w.u64(ds.clients.len());
    for c in &ds.clients {
        w.u64(c.len());
        w.u64(c.dim);
        w.f64s(&c.client_mean);
        w.f64s(&c.features);
        w.f64s(&c.labels);
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FcoError::Validation("dataset file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| FcoError::Validation("length field overflows".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| FcoError::Validation("length field overflows".into()))?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<FederatedDataset> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(FcoError::Validation("not a fedco dataset file (bad magic)".into()));
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let spec_len = r.u64()?;
    let spec: GeneratorSpec =
        serde_json::from_slice(r.take(spec_len)?).map_err(|e| FcoError::Validation(format!("dataset spec: {e}")))?;
    let lambda = r.f64s(1)?[0];
    let p = r.u64()?;
    if p != spec.shape().len() {
        return Err(FcoError::Validation(format!("ground truth has {p} weights, spec implies {}", spec.shape().len())));
    }
    let w = r.f64s(p)?;
    let b = r.f64s(1)?[0];
    let truth = ParamState::new(spec.shape(), w, b).map_err(|e| FcoError::Validation(e.to_string()))?;
    let m = r.u64()?;
    let mut clients = Vec::with_capacity(m.min(1 << 20));
    for _ in 0..m {
        let n = r.u64()?;
        let dim = r.u64()?;
        if dim != p {
            return Err(FcoError::Validation(format!("client feature dim {dim} != {p}")));
        }
        let client_mean = r.f64s(dim)?;
        let features = r.f64s(n.checked_mul(dim).ok_or_else(|| FcoError::Validation("shard too large".into()))?)?;
        let labels = r.f64s(n)?;
        clients.push(ClientShard { features, labels, client_mean, dim });
    }
    if r.pos != bytes.len() {
        return Err(FcoError::Validation("trailing bytes after dataset".into()));
    }
    Ok(FederatedDataset::from_parts(spec, clients, truth, lambda))
}

pub fn read_dataset(path: &Path) -> Result<FederatedDataset> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes)
}

/// JSON sidecar describing a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d2: Option<usize>,
    #[serde(rename = "M")]
    pub m: usize,
    pub n_per_client: usize,
    pub seed: u64,
    pub preset: Option<String>,
    pub lambda: f64,
    pub lambda_max: f64,
    pub generator_version: u32,
    pub generator: GeneratorSpec,
}

impl DatasetSidecar {
    pub fn describe(ds: &FederatedDataset) -> Self {
        let (d, d1, d2) = match ds.task() {
            Task::LowRank => (None, Some(ds.spec.dim), Some(ds.spec.dim)),
            _ => (Some(ds.spec.dim), None, None),
        };
        DatasetSidecar {
            format: String::from_utf8_lossy(MAGIC).into_owned(),
            task: ds.task(),
            d,
            d1,
            d2,
            m: ds.num_clients(),
            n_per_client: ds.spec.n_per_client,
            seed: ds.spec.seed,
            preset: ds.spec.preset.clone(),
            lambda: ds.lambda,
            lambda_max: ds.lambda_max(),
            generator_version: GENERATOR_VERSION,
            generator: ds.spec.clone(),
        }
    }
}
