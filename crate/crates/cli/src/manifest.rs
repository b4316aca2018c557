//! Per-run provenance record written next to every command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_at: String,
    pub finished_at: String,
    pub stages_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Input role to SHA-256 digest.
    pub inputs: BTreeMap<String, String>,
    pub calibration_digest: Option<String>,
    pub seed: Option<u64>,
    /// Output file name (relative to the manifest) to SHA-256 digest.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock data; not reproducible between runs.
    pub timing: Timing,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Digest of a file, or of every file below a directory (run manifests excluded)
/// keyed by relative path.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut h = Sha256::new();
        for f in files_under(path)? {
            let rel = f
                .strip_prefix(path)
                .expect("below root")
                .to_string_lossy()
                .replace('\\', "/");
            h.update(rel.as_bytes());
            h.update([0]);
            h.update(sha256_bytes(&fs::read(&f).with_context(|| format!("reading {}", f.display()))?).as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    } else {
        Ok(sha256_bytes(
            &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        ))
    }
}

/// Collects stage timings and builds the manifest once outputs exist.
pub struct RunRecorder {
    command: String,
    started_at: String,
    last: Instant,
    stages_ms: BTreeMap<String, f64>,
    inputs: BTreeMap<String, String>,
    calibration_digest: Option<String>,
    seed: Option<u64>,
}

impl RunRecorder {
    pub fn start(command: &str) -> Self {
        RunRecorder {
            command: command.to_string(),
            started_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            last: Instant::now(),
            stages_ms: BTreeMap::new(),
            inputs: BTreeMap::new(),
            calibration_digest: None,
            seed: None,
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.insert(role.to_string(), digest_path(path)?);
        Ok(())
    }

    pub fn input_digest(&mut self, role: &str, digest: String) {
        self.inputs.insert(role.to_string(), digest);
    }

    pub fn calibration(&mut self, path: &Path) -> Result<()> {
        self.calibration_digest = Some(digest_path(path)?);
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    /// Records the time since the previous mark under `stage`.
    pub fn mark(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages_ms
            .insert(stage.to_string(), (now - self.last).as_secs_f64() * 1000.0);
        self.last = now;
    }

    /// Writes `run_manifest.json` into `dir`, digesting the listed output files.
    pub fn finish(self, dir: &Path, outputs: &[PathBuf]) -> Result<RunManifest> {
        let mut digests = BTreeMap::new();
        for p in outputs {
            let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            digests.insert(rel, digest_path(p)?);
        }
        let m = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command,
            inputs: self.inputs,
            calibration_digest: self.calibration_digest,
            seed: self.seed,
            outputs: digests,
            timing: Timing {
                started_at: self.started_at,
                finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
                stages_ms: self.stages_ms,
            },
        };
        let text = serde_json::to_string_pretty(&m)? + "\n";
        fs::write(dir.join(RUN_MANIFEST), text).with_context(|| format!("writing manifest in {}", dir.display()))?;
        Ok(m)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(RUN_MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

/// Recomputes every output digest recorded in the manifest of `dir`.
pub fn verify(dir: &Path) -> Result<RunManifest> {
    let m = read_manifest(dir)?;
    for (rel, want) in &m.outputs {
        let got = digest_path(&dir.join(rel))?;
        if &got != want {
            bail!("{}: digest of {rel} does not match its run manifest", dir.display());
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        fs::write(&a, "hello").unwrap();
        let mut rec = RunRecorder::start("test");
        rec.seed(7);
        rec.mark("write");
        let m = rec.finish(dir.path(), &[a.clone()]).unwrap();
        assert_eq!(
            m.outputs["a.txt"],
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
        assert_eq!(verify(dir.path()).unwrap().seed, Some(7));
        fs::write(&a, "tampered").unwrap();
        assert!(verify(dir.path()).is_err());
    }

    #[test]
    fn directory_digest_ignores_run_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        let before = digest_path(dir.path()).unwrap();
        fs::write(dir.path().join(RUN_MANIFEST), "{}").unwrap();
        assert_eq!(digest_path(dir.path()).unwrap(), before);
        fs::write(dir.path().join("y"), "2").unwrap();
        assert_ne!(digest_path(dir.path()).unwrap(), before);
    }
}
