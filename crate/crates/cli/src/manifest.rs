use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::error::CliError;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to re-run a command bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    /// Unix time in seconds.
    pub started: f64,
    pub finished: f64,
    /// Git blob hash (SHA-1 of `blob <len>\0<bytes>`) of the input checkpoint.
    pub input_checkpoint_hash: Option<String>,
    pub outputs: Vec<String>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `<output>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

impl RunManifest {
    /// Write one copy next to every output, each atomically.
    pub fn write_all(&self) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self)?;
        for out in &self.outputs {
            lflow::io::write_atomic(&manifest_path(Path::new(out)), json.as_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("manifest {}: {e}", path.display())))
    }
}
