use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use vsl_core::Error;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Describes one output directory. Holds no wall-clock fields, so equal
/// inputs give byte-identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(command: &'static str, seed: u64, config: serde_json::Value, files: Vec<String>) -> Self {
        Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_hash: config_hash(&config),
            config,
            files,
        }
    }

    pub fn write(&self, dir: &Path) -> vsl_core::Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

pub fn config_hash(config: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so this encoding is canonical.
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> vsl_core::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Prepares `dir/decisions`, refusing to append to existing logs unless
/// `force` is set, in which case they are removed.
pub fn decisions_dir(out: &Path, force: bool) -> vsl_core::Result<PathBuf> {
    let dir = out.join("decisions");
    fs::create_dir_all(&dir)?;
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let is_log = name.ends_with(".jsonl") && (name.starts_with("decisions-") || name.starts_with("rejections-"));
        if !is_log {
            continue;
        }
        if !force {
            return Err(Error::Config(format!(
                "{} already holds decision logs; pass --force to replace them",
                dir.display()
            )));
        }
        fs::remove_file(&path)?;
    }
    Ok(dir)
}

/// Names of files under `dir`, relative and sorted.
pub fn list_files(dir: &Path) -> vsl_core::Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Ok(rel) = path.strip_prefix(dir) {
                let rel = rel.to_string_lossy().replace('\\', "/");
                if rel != "manifest.json" {
                    out.push(rel);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Stable error category and process exit code.
pub fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Io(_) => ("io", 4),
        Error::Protocol(_) => ("protocol", 5),
        Error::Schema { .. } => ("schema", 3),
        Error::Checkpoint(_) => ("checkpoint", 3),
        Error::Json(_) | Error::Csv(_) | Error::Toml(_) => ("parse", 3),
        Error::Config(_)
        | Error::DuplicateMilepost { .. }
        | Error::NoCriticalSensor { .. }
        | Error::OffGrid(_)
        | Error::LimitCount { .. }
        | Error::DimensionMismatch { .. }
        | Error::OutOfBounds(_) => ("config", 3),
        Error::Empty(_) => ("empty", 6),
        Error::EmptyMask | Error::NonFinite(_) => ("internal", 1),
    }
}

/// One JSON object on stderr describing the failure.
pub fn report(e: &Error) -> u8 {
    let (kind, code) = classify(e);
    let line = serde_json::json!({ "error": { "kind": kind, "message": e.to_string() } });
    eprintln!("{line}");
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_key_order_independent() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":[1,2],"b":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        assert_ne!(config_hash(&a), config_hash(&serde_json::json!({"a":[2,1],"b":1})));
    }

    #[test]
    fn decisions_dir_guards_existing_logs() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = decisions_dir(tmp.path(), false).unwrap();
        fs::write(dir.join("decisions-2024-04-22.jsonl"), "x\n").unwrap();
        fs::write(dir.join("notes.txt"), "keep").unwrap();
        assert!(matches!(decisions_dir(tmp.path(), false), Err(Error::Config(_))));
        decisions_dir(tmp.path(), true).unwrap();
        assert!(!dir.join("decisions-2024-04-22.jsonl").exists());
        assert!(dir.join("notes.txt").exists());
    }
}
