//! TOML configuration files for [`HiCIConfig`].
//!
//! ```toml
//! S = 4
//! M = 2
//! K = 2
//! H = 2
//! d = 16
//! d_b = 8
//! d_s = 4
//! causal_segment_mask = true
//! global_scope = "all_segments"
//! ln_eps = 1e-5
//! ```
//!
//! The last three keys are optional. Unknown keys are rejected.

use std::path::Path;

use hici_core::hici::{GlobalScope, HiCIConfig, DEFAULT_LN_EPS};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown global_scope {0:?} (expected all_segments or preceding_segments)")]
    Scope(String),
    #[error("unknown preset {0:?} (expected llama2-7b, llama2-13b or micro)")]
    Preset(String),
    #[error(transparent)]
    Invalid(#[from] hici_core::Error),
}

fn default_causal() -> bool {
    true
}

fn default_scope() -> String {
    GlobalScope::AllSegments.as_str().into()
}

fn default_eps() -> f64 {
    DEFAULT_LN_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(rename = "S")]
    pub segment_len: usize,
    #[serde(rename = "M")]
    pub local_slots: usize,
    #[serde(rename = "K")]
    pub global_slots: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    pub d: usize,
    pub d_b: usize,
    pub d_s: usize,
    #[serde(default = "default_causal")]
    pub causal_segment_mask: bool,
    #[serde(default = "default_scope")]
    pub global_scope: String,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl From<&HiCIConfig> for ConfigFile {
    fn from(c: &HiCIConfig) -> Self {
        Self {
            segment_len: c.segment_len,
            local_slots: c.local_slots,
            global_slots: c.global_slots,
            heads: c.heads,
            d: c.d_model,
            d_b: c.d_bottleneck,
            d_s: c.d_compress,
            causal_segment_mask: c.causal_segment_mask,
            global_scope: c.global_scope.as_str().into(),
            ln_eps: c.ln_eps,
        }
    }
}

impl ConfigFile {
    pub fn to_config(&self) -> Result<HiCIConfig, ConfigError> {
        let global_scope = GlobalScope::parse(&self.global_scope)
            .ok_or_else(|| ConfigError::Scope(self.global_scope.clone()))?;
        let cfg = HiCIConfig {
            segment_len: self.segment_len,
            local_slots: self.local_slots,
            global_slots: self.global_slots,
            heads: self.heads,
            d_model: self.d,
            d_bottleneck: self.d_b,
            d_compress: self.d_s,
            causal_segment_mask: self.causal_segment_mask,
            global_scope,
            ln_eps: self.ln_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse(text: &str) -> Result<HiCIConfig, ConfigError> {
    toml::from_str::<ConfigFile>(text)?.to_config()
}

pub fn load(path: &Path) -> Result<HiCIConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text)
}

pub fn to_toml(cfg: &HiCIConfig) -> String {
    toml::to_string(&ConfigFile::from(cfg)).expect("plain struct serialises")
}

pub fn preset(name: &str) -> Result<HiCIConfig, ConfigError> {
    match name {
        "llama2-7b" => Ok(HiCIConfig::llama2_7b()),
        "llama2-13b" => Ok(HiCIConfig::llama2_13b()),
        "micro" => Ok(HiCIConfig::micro()),
        other => Err(ConfigError::Preset(other.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_every_preset() {
        for name in ["llama2-7b", "llama2-13b", "micro"] {
            let cfg = preset(name).unwrap();
            assert_eq!(parse(&to_toml(&cfg)).unwrap(), cfg);
        }
    }

    #[test]
    fn optional_keys_take_defaults() {
        let cfg = parse("S = 4\nM = 2\nK = 2\nH = 2\nd = 16\nd_b = 8\nd_s = 4\n").unwrap();
        assert_eq!(cfg, HiCIConfig::micro());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let base = to_toml(&HiCIConfig::micro());
        let err = parse(&format!("{base}dropout = 0.1\n")).unwrap_err();
        assert!(err.to_string().contains("dropout"), "{err}");
        let err = parse(&base.replace("all_segments", "sideways")).unwrap_err();
        assert!(matches!(err, ConfigError::Scope(_)));
        let err = parse(&base.replace("d_b = 8", "d_b = 7")).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        assert!(preset("gpt2").is_err());
    }
}
