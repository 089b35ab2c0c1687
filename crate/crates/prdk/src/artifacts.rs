//! Output-file plumbing: atomic writes, float formatting for CSV, content
//! hashing and the per-run manifest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io;
use std::path::Path;

/// Write a file atomically: temp file in the same directory, then rename,
/// so interrupted runs never leave partial files under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(
        ".{}.tmp.{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Shortest round-trip decimal representation of an f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Description of one finished run, written alongside its outputs. The run
/// id is derived from the resolved config and input hashes, so identical
/// reruns produce identical manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub run_id: String,
    /// Resolved configuration snapshot after CLI/file/default precedence.
    pub config: serde_json::Value,
    /// Hash over the input files consumed by the run.
    pub input_hash: String,
    /// Output file names, relative to the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(config: serde_json::Value, input_hash: String, outputs: Vec<String>) -> Self {
        let config_bytes = serde_json::to_vec(&config).expect("config serializes");
        let mut seed = config_bytes;
        seed.extend_from_slice(input_hash.as_bytes());
        let run_id = sha256_hex(&seed)[..12].to_string();
        Self {
            schema_version: "1".to_string(),
            run_id,
            config,
            input_hash,
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join("manifest.json"), body.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // No stray temp files left behind.
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn manifest_id_is_deterministic() {
        let cfg = serde_json::json!({"seed": 7, "mode": "darts"});
        let a = RunManifest::new(cfg.clone(), "abc".into(), vec!["trace.csv".into()]);
        let b = RunManifest::new(cfg, "abc".into(), vec!["trace.csv".into()]);
        assert_eq!(a.run_id, b.run_id);
        assert_eq!(a.run_id.len(), 12);
    }

    #[test]
    fn float_formatting_round_trips() {
        for &v in &[0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
