//! Run manifests: resolved configuration plus digests of every input and
//! output file. No timestamps or absolute paths, so identical runs give
//! identical manifests.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::GlobalArgs;

/// What a subcommand produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub resolved: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    precision: &'a str,
    pixel_scaling: &'a str,
    global: &'a GlobalArgs,
    args: serde_json::Value,
    resolved: serde_json::Value,
    inputs: Vec<FileDigest>,
    artifacts: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<(u64, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

fn digest(path: &Path, base: &Path) -> anyhow::Result<FileDigest> {
    let (bytes, sha256) = sha256_file(path)?;
    let shown = match path.strip_prefix(base) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => PathBuf::from(path.file_name().unwrap_or(path.as_os_str())),
    };
    Ok(FileDigest { path: shown.to_string_lossy().replace('\\', "/"), bytes, sha256 })
}

/// Writes `manifest_<command>.json` into the output directory.
pub fn write_manifest(g: &GlobalArgs, command: &str, args: serde_json::Value, outcome: Outcome) -> anyhow::Result<PathBuf> {
    let base = &g.out_dir;
    let mut artifacts = outcome.artifacts.iter().map(|p| digest(p, base)).collect::<anyhow::Result<Vec<_>>>()?;
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let inputs = outcome.inputs.iter().map(|p| digest(p, base)).collect::<anyhow::Result<Vec<_>>>()?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        precision: sidnet::nn::PRECISION,
        pixel_scaling: sidnet::nn::PIXEL_SCALING,
        global: g,
        args: strip_paths(args),
        resolved: outcome.resolved,
        inputs,
        artifacts,
    };
    let path = base.join(format!("manifest_{command}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Input paths are recorded by digest in `inputs`; here only their file
/// names are kept.
fn strip_paths(mut args: serde_json::Value) -> serde_json::Value {
    if let serde_json::Value::Object(map) = &mut args {
        for key in ["dataset", "checkpoint", "basis"] {
            if let Some(serde_json::Value::String(s)) = map.get_mut(key) {
                if let Some(name) = Path::new(s.as_str()).file_name() {
                    *s = name.to_string_lossy().into_owned();
                }
            }
        }
    }
    args
}
