//! Run manifest: enough to tell two runs apart and to repeat one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use dcr_core::prompts;
use dcr_core::search::{SearchConfig, ARCHIVE_FILE, PROGRESS_FILE, STATE_FILE};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub provider: String,
    pub config_toml: String,
    pub config_sha256: String,
    pub dataset: String,
    pub dataset_sha256: String,
    pub taxonomy: String,
    pub taxonomy_sha256: String,
    /// Prompt template id to digest of its text.
    pub templates: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String, String> {
    std::fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| format!("{}: {e}", path.display()))
}

impl RunManifest {
    pub fn new(
        command: &str,
        cfg: &SearchConfig,
        dataset: &Path,
        taxonomy: &Path,
        provider: &str,
        out: &Path,
    ) -> Result<Self, String> {
        let config_toml = cfg.to_toml();
        let templates = prompts::template_ids()
            .filter_map(|id| prompts::template(id).map(|t| (id.to_string(), sha256_hex(format!("{}\n===\n{}", t.system, t.user).as_bytes()))))
            .collect();
        let mut outputs = BTreeMap::new();
        if command == "search" {
            for (k, f) in [("archive", ARCHIVE_FILE), ("state", STATE_FILE), ("progress", PROGRESS_FILE), ("report", "report.json"), ("trajectory", "trajectory.csv")] {
                outputs.insert(k.to_string(), out.join(f).display().to_string());
            }
        }
        Ok(Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            provider: provider.into(),
            config_sha256: sha256_hex(config_toml.as_bytes()),
            config_toml,
            dataset: dataset.display().to_string(),
            dataset_sha256: file_digest(dataset)?,
            taxonomy: taxonomy.display().to_string(),
            taxonomy_sha256: file_digest(taxonomy)?,
            templates,
            outputs,
        })
    }
}
