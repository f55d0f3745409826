//! Run manifests: every command writes one JSON record of what ran, with
//! hashes of every input, so a run can be audited and repeated. Outputs
//! other than the manifest itself are byte-reproducible; the manifest
//! carries the only nondeterministic field (wall time).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: IndexMap<String, String>,
    pub seeds: IndexMap<String, u64>,
    pub input_hashes: IndexMap<String, String>,
    pub artifacts: Vec<String>,
    pub wall_time_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: IndexMap::new(),
            seeds: IndexMap::new(),
            input_hashes: IndexMap::new(),
            artifacts: Vec::new(),
            wall_time_seconds: 0.0,
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<(), String> {
        let bytes = fs::read(path)
            .map_err(|e| format!("cannot hash input {}: {e}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        self.input_hashes
            .insert(path.display().to_string(), hex::encode(digest));
        Ok(())
    }

    /// Record an artifact by its path relative to the manifest's directory,
    /// keeping the record valid when the output tree moves.
    pub fn add_artifact(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    pub fn write(&self, dir: &Path) -> Result<(), String> {
        let body = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        let path = dir.join("manifest.json");
        fs::write(&path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_hashes_inputs_and_serializes() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input.txt");
        fs::write(&input, "seeded content").unwrap();

        let mut manifest = RunManifest::new("gen");
        manifest.hash_input(&input).unwrap();
        manifest.seeds.insert("seed".into(), 7);
        manifest.add_artifact("train.jsonl");
        manifest.write(dir.path()).unwrap();

        let body = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(body.contains("\"command\": \"gen\""));
        let expect = hex::encode(Sha256::digest(b"seeded content"));
        assert!(body.contains(&expect));
        assert!(manifest.hash_input(&dir.path().join("missing")).is_err());
    }
}
