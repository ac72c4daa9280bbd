//! Training checkpoints: host config, step, weights and AdamW moments.
//!
//! A checkpoint directory holds `checkpoint.json` (config and step) next to
//! `tensors.json` / `tensors.bin` in the tensor format. Tensor names are
//! prefixed with `params.`, `adam_m.` or `adam_v.`.

use std::fs;
use std::path::{Path, PathBuf};

use hici_core::host::{HostConfig, OptimConfig, TrainState};
use hici_core::params::ParamTree;
use hici_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ConfigFile};
use crate::tensor_io::{self, Dtype, IoError};

pub const FORMAT: &str = "hici-checkpoint";
pub const TENSORS: &str = "tensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimFile {
    pub lr_backbone: f64,
    pub lr_hici: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub hici_grad_clip: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostFile {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub seed: u64,
    pub hici: ConfigFile,
    pub optim: OptimFile,
}

impl From<&HostConfig> for HostFile {
    fn from(c: &HostConfig) -> Self {
        let o = &c.optim;
        Self {
            vocab_size: c.vocab_size,
            n_layers: c.n_layers,
            ffn_width: c.ffn_width,
            max_len: c.max_len,
            seed: c.seed,
            hici: ConfigFile::from(&c.hici),
            optim: OptimFile {
                lr_backbone: o.lr_backbone,
                lr_hici: o.lr_hici,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                warmup_steps: o.warmup_steps,
                hici_grad_clip: o.hici_grad_clip,
                batch_size: o.batch_size,
            },
        }
    }
}

impl HostFile {
    pub fn to_config(&self) -> Result<HostConfig, ConfigError> {
        let o = &self.optim;
        let cfg = HostConfig {
            vocab_size: self.vocab_size,
            n_layers: self.n_layers,
            ffn_width: self.ffn_width,
            max_len: self.max_len,
            seed: self.seed,
            hici: self.hici.to_config()?,
            optim: OptimConfig {
                lr_backbone: o.lr_backbone,
                lr_hici: o.lr_hici,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                warmup_steps: o.warmup_steps,
                hici_grad_clip: o.hici_grad_clip,
                batch_size: o.batch_size,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    step: u64,
    host: HostFile,
    tensors: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Layout(#[from] hici_core::Error),
    #[error("{0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: HostConfig,
    pub state: TrainState,
}

fn prefixed(prefix: &str, p: &impl ParamTree) -> Vec<(String, Tensor)> {
    p.named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

fn strip(prefix: &str, tensors: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    let p = format!("{prefix}.");
    tensors
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
        .collect()
}

impl Checkpoint {
    /// Writes into `dir` (created if missing); returns the header path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, CheckpointError> {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut tensors = prefixed("params", &self.state.params);
        tensors.extend(prefixed("adam_m", &self.state.m));
        tensors.extend(prefixed("adam_v", &self.state.v));
        let manifest = tensor_io::save(dir, TENSORS, &tensors, Dtype::F64)?;
        let header = Header {
            format: FORMAT.into(),
            version: 1,
            step: self.state.step,
            host: HostFile::from(&self.config),
            tensors: manifest
                .file_name()
                .expect("file name")
                .to_string_lossy()
                .into_owned(),
        };
        let path = dir.join("checkpoint.json");
        let text = serde_json::to_string_pretty(&header).expect("header serialises");
        fs::write(&path, text + "\n").map_err(|source| IoError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    /// Accepts the checkpoint directory or its `checkpoint.json`.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let header_path = if path.is_dir() {
            path.join("checkpoint.json")
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&header_path).map_err(|source| IoError::Io {
            path: header_path.clone(),
            source,
        })?;
        let header: Header = serde_json::from_str(&text).map_err(|source| IoError::Json {
            path: header_path.clone(),
            source,
        })?;
        if header.format != FORMAT || header.version != 1 {
            return Err(CheckpointError::Format(format!(
                "{}: not a {FORMAT} v1 file",
                header_path.display()
            )));
        }
        if header.tensors.contains(['/', '\\']) {
            return Err(CheckpointError::Format(
                "tensor manifest must be a bare file name".into(),
            ));
        }
        let config = header.host.to_config()?;
        let dir = header_path.parent().unwrap_or(Path::new("."));
        let tensors = tensor_io::load(&dir.join(&header.tensors))?;
        let mut state = TrainState::init(&config)?;
        state.params.load_named(&strip("params", &tensors))?;
        state.m.load_named(&strip("adam_m", &tensors))?;
        state.v.load_named(&strip("adam_v", &tensors))?;
        let expected = 3 * state.params.named_tensors().len();
        if tensors.len() != expected {
            return Err(CheckpointError::Format(format!(
                "{} tensors, expected {expected}",
                tensors.len()
            )));
        }
        state.step = header.step;
        Ok(Self { config, state })
    }
}
