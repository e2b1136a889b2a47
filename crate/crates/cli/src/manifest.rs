use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError};

/// Provenance record written next to a stage's artifacts. Contains no
/// timestamps, so identical runs produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// SHA-256 of the configuration values the stage reads.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    /// Upstream files by path, with their SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Artifacts by file name, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub row_counts: BTreeMap<String, usize>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("lbe-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("lbe-core".to_string(), lbe_core::VERSION.to_string()),
    ])
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(io_err(format!("cannot read {}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

/// Hash of a serializable value through its canonical JSON form.
pub fn hash_value<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    sha256_bytes(v.to_string().as_bytes())
}

pub fn manifest_path(out: &Path, stage: &str) -> PathBuf {
    out.join(format!("{stage}.manifest.json"))
}

impl Manifest {
    pub fn read(path: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| CliError::Json {
            context: "manifest".into(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(io_err(format!("cannot write {}", path.display())))
    }

    /// Whether this manifest describes the run about to happen and its
    /// outputs are still on disk unchanged.
    pub fn is_fresh(&self, expected: &Manifest, out: &Path) -> bool {
        self.stage == expected.stage
            && self.config_hash == expected.config_hash
            && self.seed == expected.seed
            && self.versions == expected.versions
            && self.inputs == expected.inputs
            && !self.outputs.is_empty()
            && self
                .outputs
                .iter()
                .all(|(name, hash)| sha256_file(&out.join(name)).is_ok_and(|h| &h == hash))
    }
}
