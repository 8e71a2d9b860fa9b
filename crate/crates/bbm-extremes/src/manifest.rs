//! Run manifests: the full effective configuration, seed and replica range
//! of a run, hashed so downstream artifacts can refuse stale inputs.
//!
//! The content hash covers every field that affects output bytes. Thread
//! count and wall-clock timestamps are recorded but excluded: replica
//! scheduling never changes results.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruningCertificate {
    pub slack: f64,
    pub pruned_subtrees_total: u64,
    /// Heuristic exp(-(2-sqrt(2)) L) bound on the per-realization
    /// probability that the barrier touched the top of the population; the
    /// binding certification is the exact-vs-pruned two-sample comparison.
    pub violation_bound: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub software_version: String,
    pub command: String,
    /// Effective configuration after flag/file/default precedence.
    pub config: serde_json::Value,
    pub seed: u64,
    pub replicas: u64,
    pub threads: usize,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
    pub pruning: Option<PruningCertificate>,
    pub content_hash: String,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(
        command: &str,
        config: serde_json::Value,
        seed: u64,
        replicas: u64,
        threads: usize,
    ) -> Self {
        let mut m = RunManifest {
            schema_version: SCHEMA_VERSION,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seed,
            replicas,
            threads,
            started_at_unix: now_unix(),
            finished_at_unix: 0,
            pruning: None,
            content_hash: String::new(),
        };
        m.content_hash = m.compute_hash();
        m
    }

    /// Hash of the output-determining fields. serde_json maps serialize with
    /// sorted keys, so the digest is canonical.
    pub fn compute_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashable<'a> {
            schema_version: u32,
            software_version: &'a str,
            command: &'a str,
            config: &'a serde_json::Value,
            seed: u64,
            replicas: u64,
        }
        let view = Hashable {
            schema_version: self.schema_version,
            software_version: &self.software_version,
            command: &self.command,
            config: &self.config,
            seed: self.seed,
            replicas: self.replicas,
        };
        let bytes = serde_json::to_vec(&view).expect("manifest serialization");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn finish(&mut self) {
        self.finished_at_unix = now_unix();
    }

    pub fn verify_hash(&self) -> Result<()> {
        let fresh = self.compute_hash();
        if fresh != self.content_hash {
            return Err(Error::ManifestMismatch {
                expected: self.content_hash.clone(),
                found: fresh,
            });
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingInput(path.display().to_string()))?;
        Ok(serde_json::from_str(&data)?)
    }
}

/// Refuses artifacts built from a different run than the manifest on disk.
pub fn check_source(manifest: &RunManifest, recorded_hash: &str) -> Result<()> {
    if manifest.content_hash != recorded_hash {
        return Err(Error::ManifestMismatch {
            expected: recorded_hash.to_string(),
            found: manifest.content_hash.clone(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_covers_config_not_timestamps_or_threads() {
        let cfg = serde_json::json!({"horizon": 4.0, "mode": "exact"});
        let mut a = RunManifest::new("simulate", cfg.clone(), 7, 100, 2);
        let mut b = RunManifest::new("simulate", cfg.clone(), 7, 100, 8);
        a.started_at_unix = 1;
        b.started_at_unix = 999;
        a.finish();
        assert_eq!(a.content_hash, b.content_hash);
        assert_eq!(a.compute_hash(), a.content_hash);

        let c = RunManifest::new("simulate", cfg, 8, 100, 2);
        assert_ne!(a.content_hash, c.content_hash);
        let d = RunManifest::new(
            "simulate",
            serde_json::json!({"horizon": 5.0, "mode": "exact"}),
            7,
            100,
            2,
        );
        assert_ne!(a.content_hash, d.content_hash);
        a.verify_hash().unwrap();
    }

    #[test]
    fn roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = RunManifest::new("simulate", serde_json::json!({"t": 1}), 1, 1, 1);
        m.write(&path).unwrap();
        let back = RunManifest::read(&path).unwrap();
        assert_eq!(back.content_hash, m.content_hash);
        assert!(check_source(&back, &m.content_hash).is_ok());
        assert!(matches!(
            check_source(&back, "deadbeef"),
            Err(Error::ManifestMismatch { .. })
        ));
    }
}
