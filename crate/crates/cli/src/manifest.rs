//! Run manifests and the content-hash gate between stages.
//!
//! Every stage writes `manifests/<stage>.json` listing the files it read and
//! wrote with their content hashes (first 8 bytes of SHA-256, hex). A stage
//! refuses an input whose bytes no longer match the upstream manifest, and
//! skips itself when its own manifest already matches the current inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pidssl::hash::content_hash;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The configuration this stage depends on.
    pub config: serde_json::Value,
    pub seed: u64,
    /// Relative path to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub wall_time_seconds: f64,
}

impl RunManifest {
    /// Whether a rerun with this command, config and these inputs would be redundant.
    pub fn matches(
        &self,
        command: &str,
        config: &serde_json::Value,
        inputs: &BTreeMap<String, String>,
    ) -> bool {
        self.command == command && &self.config == config && &self.inputs == inputs
    }
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(content_hash(&bytes))
}

pub fn manifest_path(out: &Path, stage: &str) -> PathBuf {
    out.join("manifests").join(format!("{stage}.json"))
}

pub fn read_manifest(out: &Path, stage: &str) -> CliResult<Option<RunManifest>> {
    let path = manifest_path(out, stage);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Config {
            path,
            message: format!("unreadable manifest: {e}"),
        })
}

pub fn write_manifest(out: &Path, stage: &str, m: &RunManifest) -> CliResult<()> {
    let path = manifest_path(out, stage);
    write_bytes(
        &path,
        format!(
            "{}\n",
            serde_json::to_string_pretty(m).expect("manifest serializes")
        )
        .as_bytes(),
    )
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Hash of `rel` under `out`, checked against what `upstream` recorded for it.
pub fn verified_input(out: &Path, rel: &str, upstream: &'static str) -> CliResult<String> {
    let path = out.join(rel);
    let missing = || CliError::MissingInput {
        path: path.clone(),
        stage: upstream,
    };
    let manifest = read_manifest(out, upstream)?.ok_or_else(missing)?;
    let recorded = manifest.outputs.get(rel).ok_or_else(missing)?;
    if !path.exists() {
        return Err(missing());
    }
    let found = hash_file(&path)?;
    if &found != recorded {
        return Err(CliError::Stale {
            path,
            recorded: recorded.clone(),
            found,
        });
    }
    Ok(found)
}

/// True when the stage's manifest matches and all of its outputs are intact.
pub fn up_to_date(
    out: &Path,
    stage: &str,
    command: &str,
    config: &serde_json::Value,
    inputs: &BTreeMap<String, String>,
) -> CliResult<bool> {
    let Some(m) = read_manifest(out, stage)? else {
        return Ok(false);
    };
    if !m.matches(command, config, inputs) {
        return Ok(false);
    }
    for (rel, hash) in &m.outputs {
        let path = out.join(rel);
        if !path.exists() || &hash_file(&path)? != hash {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Files under `out` (outside `manifests/`) that no manifest lists as an output.
pub fn orphans(out: &Path) -> CliResult<Vec<String>> {
    let mut owned = std::collections::BTreeSet::new();
    let dir = out.join("manifests");
    if dir.exists() {
        for entry in std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
            let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Config {
                path: path.clone(),
                message: e.to_string(),
            })?;
            owned.extend(m.outputs.into_keys());
        }
    }
    let mut found = Vec::new();
    collect_files(out, out, &mut found)?;
    Ok(found
        .into_iter()
        .filter(|rel| !rel.starts_with("manifests/") && !owned.contains(rel))
        .collect())
}

fn collect_files(root: &Path, dir: &Path, acc: &mut Vec<String>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(dir, err)))
        .collect::<CliResult<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(root, &path, acc)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            acc.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
