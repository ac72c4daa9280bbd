//! The run manifest written at the start of every command with `--out`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::HostFile;
use crate::config::ConfigFile;

pub const FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    pub config: ConfigFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<HostFile>,
    pub seed: u64,
    pub code_version: String,
    /// Files this run writes, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(dir.join(FILE), text + "\n")
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}
