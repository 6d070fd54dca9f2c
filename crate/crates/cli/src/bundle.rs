//! Artifact bundles: a directory of outputs plus `manifest.json`, written
//! last, that records the command, the resolved config, the embedded
//! profile, seeds and SHA-256 digests of every input and output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dialyzer_core::profile::Profile;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    /// The full command with its arguments, replayable by `rerun`.
    pub invocation: serde_json::Value,
    /// Resolved config; `output_dir` is left empty so that reruns into
    /// another directory give the same manifest.
    pub config: RunConfig,
    pub profile: Profile,
    pub profile_hash: String,
    /// SHA-256 of invocation, config and profile.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub results: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn config_hash(invocation: &serde_json::Value, config: &RunConfig, profile: &Profile) -> String {
    let text = serde_json::to_string(&(invocation, config, profile)).expect("config serializes");
    sha256_hex(text.as_bytes())
}

/// Collects output files and writes the manifest when finished.
pub struct BundleWriter {
    dir: PathBuf,
    outputs: Vec<FileDigest>,
}

impl BundleWriter {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        // a stale manifest would make a half-written bundle look complete
        let stale = dir.join(MANIFEST);
        if stale.exists() {
            std::fs::remove_file(&stale).map_err(|e| CliError::io(&stale, e))?;
        }
        Ok(BundleWriter {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let bytes = bytes.as_ref();
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn finish(mut self, mut manifest: Manifest) -> Result<(), CliError> {
        manifest.outputs = std::mem::take(&mut self.outputs);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Failure(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

/// Reads and version-checks a bundle manifest.
pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(_) => {
            return Err(CliError::Incomplete {
                dir: dir.display().to_string(),
                missing: vec![MANIFEST.to_string()],
            })
        }
    };
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))?;
    let version = value.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(CliError::Mismatch(format!(
            "{}: bundle format {version:?}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    serde_json::from_value(value).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))
}

/// Checks that every listed output is present and unchanged.
pub fn verify_outputs(dir: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let missing: Vec<String> = manifest
        .outputs
        .iter()
        .filter(|o| !dir.join(&o.path).is_file())
        .map(|o| o.path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Incomplete {
            dir: dir.display().to_string(),
            missing,
        });
    }
    for o in &manifest.outputs {
        let d = digest_file(&dir.join(&o.path))?;
        if d.sha256 != o.sha256 {
            return Err(CliError::Mismatch(format!("{}: {} changed since it was written", dir.display(), o.path)));
        }
    }
    Ok(())
}

/// Checks that recorded inputs still have their recorded digests.
pub fn verify_inputs(manifest: &Manifest) -> Result<(), CliError> {
    for i in &manifest.inputs {
        let path = Path::new(&i.path);
        let d = digest_file(path).map_err(|_| CliError::Mismatch(format!("input {} is gone", i.path)))?;
        if d.sha256 != i.sha256 {
            return Err(CliError::Mismatch(format!("input {} changed since the bundle was made", i.path)));
        }
    }
    Ok(())
}
