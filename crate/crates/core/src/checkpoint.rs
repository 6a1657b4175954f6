//! Versioned JSON checkpoints with base64 f32 payloads and per-array sha256.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::training::{AdamState, Moments};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("parameters missing from checkpoint: {0:?}")]
    Missing(Vec<String>),
    #[error("shape mismatch for {name}: model {model:?}, checkpoint {ckpt:?}")]
    Shape { name: String, model: Vec<usize>, ckpt: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRecord {
    pub shape: Vec<usize>,
    pub data: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentRecord {
    pub m: ArrayRecord,
    pub v: ArrayRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerRecord {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, MomentRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub version: u32,
    pub step: u64,
    pub model: ModelConfig,
    /// Free-form snapshot of the run configuration.
    pub config: serde_json::Value,
    pub params: BTreeMap<String, ArrayRecord>,
    pub optimizer: Option<OptimizerRecord>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_array(shape: &[usize], data: &[f64]) -> ArrayRecord {
    let bytes: Vec<u8> = data.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    ArrayRecord { shape: shape.to_vec(), data: STANDARD.encode(&bytes), sha256: hex(&Sha256::digest(&bytes)) }
}

pub fn decode_array(name: &str, rec: &ArrayRecord) -> Result<Tensor, CheckpointError> {
    let bytes = STANDARD.decode(&rec.data).map_err(|_| CheckpointError::Checksum(name.to_string()))?;
    if hex(&Sha256::digest(&bytes)) != rec.sha256 {
        return Err(CheckpointError::Checksum(name.to_string()));
    }
    let n: usize = rec.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(CheckpointError::Format(format!("{name}: {} bytes for shape {:?}", bytes.len(), rec.shape)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Tensor::new(rec.shape.clone(), data).map_err(|e| CheckpointError::Format(e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint { model, optimizer: None, step: 0, config: serde_json::Value::Null }
    }

    pub fn to_file(&self) -> CheckpointFile {
        let params = self.model.params.iter().map(|(n, t)| (n.clone(), encode_array(t.shape(), t.data()))).collect();
        let optimizer = self.optimizer.as_ref().map(|a| OptimizerRecord {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
            moments: a
                .moments
                .iter()
                .map(|(n, m)| {
                    let rec = MomentRecord { m: encode_array(&[m.m.len()], &m.m), v: encode_array(&[m.v.len()], &m.v) };
                    (n.clone(), rec)
                })
                .collect(),
        });
        CheckpointFile {
            version: FORMAT_VERSION,
            step: self.step,
            model: self.model.config.clone(),
            config: self.config.clone(),
            params,
            optimizer,
        }
    }

    pub fn from_file(file: CheckpointFile) -> Result<Self, CheckpointError> {
        if file.version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: file.version });
        }
        file.model.validate().map_err(CheckpointError::Format)?;
        let mut params = ParamStore::new();
        for (n, rec) in &file.params {
            params.insert(n.clone(), decode_array(n, rec)?);
        }
        let optimizer = match file.optimizer {
            None => None,
            Some(o) => {
                let mut moments = BTreeMap::new();
                for (n, rec) in &o.moments {
                    let m = decode_array(&format!("{n}.m"), &rec.m)?.into_data();
                    let v = decode_array(&format!("{n}.v"), &rec.v)?.into_data();
                    moments.insert(n.clone(), Moments { m, v });
                }
                Some(AdamState { beta1: o.beta1, beta2: o.beta2, eps: o.eps, step: o.step, moments })
            }
        };
        Ok(Checkpoint { model: Model { config: file.model, params }, optimizer, step: file.step, config: file.config })
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let text = serde_json::to_string_pretty(&ckpt.to_file()).expect("checkpoint serializes");
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into());
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
        f.write_all(text.as_bytes()).map_err(io(&tmp))?;
        f.write_all(b"\n").map_err(io(&tmp))?;
        f.sync_all().map_err(io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| CheckpointError::Format(e.to_string()))?;
    Checkpoint::from_file(file)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmStartReport {
    pub loaded: Vec<String>,
    /// In the model but not in the checkpoint; left at their initial values.
    pub missing: Vec<String>,
    /// In the checkpoint but not in the model.
    pub unused: Vec<String>,
}

/// Copies every parameter whose name appears in `source` into `target`.
/// Without `partial`, any parameter missing from `source` aborts before
/// anything is copied.
pub fn load_into(target: &mut Model, source: &ParamStore, partial: bool) -> Result<WarmStartReport, CheckpointError> {
    let mut report = WarmStartReport::default();
    for (n, t) in target.params.iter() {
        match source.get(n) {
            Some(s) if s.shape() != t.shape() => {
                return Err(CheckpointError::Shape { name: n.clone(), model: t.shape().to_vec(), ckpt: s.shape().to_vec() })
            }
            Some(_) => report.loaded.push(n.clone()),
            None => report.missing.push(n.clone()),
        }
    }
    report.unused = source.names().filter(|n| target.params.get(n).is_none()).cloned().collect();
    if !partial && !report.missing.is_empty() {
        return Err(CheckpointError::Missing(report.missing));
    }
    for n in &report.loaded {
        let src = source.get(n).expect("checked").clone();
        target.params.insert(n.clone(), src);
    }
    Ok(report)
}
