//! Run directory, lock file and the manifest that makes stages resumable.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};
use crate::formats::{read_json, write_json};

pub const RUNS_DIR_ENV: &str = "CUD_RUNS_DIR";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Sub-directories of every run.
pub const LAYOUT: [&str; 6] = ["data", "models", "circuits", "anchors", "scores", "reports"];

/// `$CUD_RUNS_DIR`, or `runs` under the working directory.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> AppResult<String> {
    Ok(sha256_hex(&fs::read(path).map_err(AppError::io(path))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_hash: String,
    pub started_at: u64,
    pub finished_at: u64,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Effective configuration after flags and file were merged.
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Exclusive handle on a run directory; the lock file is removed on drop.
pub struct Run {
    pub dir: PathBuf,
    lock: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Creates the layout, takes the lock and loads or starts the manifest.
    pub fn open(dir: &Path, run_id: &str, config: serde_json::Value) -> AppResult<Run> {
        for sub in LAYOUT {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(AppError::io(&p))?;
        }
        let lock = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(AppError::Locked(lock)),
            Err(e) => return Err(AppError::Io { path: lock, source: e }),
        }
        let config_hash = sha256_hex(config.to_string().as_bytes());
        let path = dir.join("manifest.json");
        let stages = if path.exists() {
            let old: AppResult<RunManifest> = read_json(&path);
            match old {
                Ok(m) if m.run_id == run_id => m.stages,
                Ok(_) => BTreeMap::new(),
                Err(e) => {
                    let _ = fs::remove_file(&lock);
                    return Err(e);
                }
            }
        } else {
            BTreeMap::new()
        };
        let run = Run {
            dir: dir.to_path_buf(),
            lock,
            manifest: RunManifest {
                run_id: run_id.to_string(),
                tool_version: TOOL_VERSION.to_string(),
                config_hash,
                config,
                stages,
            },
        };
        run.save()?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn save(&self) -> AppResult<()> {
        write_json(&self.dir.join("manifest.json"), &self.manifest)
    }

    /// Fails with a dependency error naming `stage` when `rel` is missing.
    pub fn require(&self, rel: &str, stage: &'static str) -> AppResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(AppError::Dependency { needed: stage, path: p })
        }
    }

    /// Hash of a stage's configuration slice and the current contents of its
    /// input files.
    pub fn input_hash(&self, key: &str, config: &serde_json::Value, inputs: &[&str]) -> AppResult<String> {
        let mut h = Sha256::new();
        h.update(key.as_bytes());
        h.update([0]);
        h.update(config.to_string().as_bytes());
        for rel in inputs {
            h.update([0]);
            h.update(rel.as_bytes());
            h.update(file_sha256(&self.path(rel))?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    /// True when `key` completed with the same inputs and its outputs are
    /// still on disk unchanged.
    pub fn is_cached(&self, key: &str, input_hash: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(key) else {
            return false;
        };
        rec.input_hash == input_hash
            && rec
                .outputs
                .iter()
                .all(|o| file_sha256(&self.path(&o.path)).is_ok_and(|h| h == o.sha256))
    }

    /// Runs `body` unless the stage is cached. `body` returns the relative
    /// paths it wrote. Returns whether the body ran.
    pub fn stage(
        &mut self,
        key: &str,
        config: &serde_json::Value,
        inputs: &[&str],
        body: impl FnOnce(&Run) -> AppResult<Vec<String>>,
    ) -> AppResult<bool> {
        let input_hash = self.input_hash(key, config, inputs)?;
        if self.is_cached(key, &input_hash) {
            log::info!("{key}: cached");
            return Ok(false);
        }
        let started_at = unix_now();
        let clock = std::time::Instant::now();
        let written = body(self)?;
        let outputs = written
            .into_iter()
            .map(|path| {
                let sha256 = file_sha256(&self.path(&path))?;
                Ok(OutputEntry { path, sha256 })
            })
            .collect::<AppResult<Vec<_>>>()?;
        self.manifest.stages.insert(
            key.to_string(),
            StageRecord {
                input_hash,
                started_at,
                finished_at: unix_now(),
                outputs,
            },
        );
        self.save()?;
        log::info!("{key}: done in {:.1}s", clock.elapsed().as_secs_f64());
        Ok(true)
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(run: &Run, rel: &str, text: &str) {
        fs::write(run.path(rel), text).unwrap();
    }

    #[test]
    fn stage_is_skipped_until_an_input_or_output_changes() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::open(dir.path(), "t", serde_json::json!({})).unwrap();
        touch(&run, "data/in.txt", "a");
        let cfg = serde_json::json!({ "x": 1 });
        let mut calls = 0;
        let mut go = |run: &mut Run, cfg: &serde_json::Value| {
            run.stage("s", cfg, &["data/in.txt"], |r| {
                calls += 1;
                fs::write(r.path("reports/out.txt"), "o").unwrap();
                Ok(vec!["reports/out.txt".into()])
            })
            .unwrap()
        };
        assert!(go(&mut run, &cfg));
        assert!(!go(&mut run, &cfg));
        touch(&run, "data/in.txt", "b");
        assert!(go(&mut run, &cfg));
        touch(&run, "reports/out.txt", "tampered");
        assert!(go(&mut run, &cfg));
        assert!(go(&mut run, &serde_json::json!({ "x": 2 })));
        assert!(!go(&mut run, &serde_json::json!({ "x": 2 })));
        assert_eq!(calls, 4);
        let rec = &run.manifest.stages["s"];
        assert_eq!(rec.outputs[0].sha256, sha256_hex(b"o"));
    }

    #[test]
    fn manifest_survives_reopening_and_lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut run = Run::open(dir.path(), "t", serde_json::json!({})).unwrap();
            assert!(matches!(
                Run::open(dir.path(), "t", serde_json::json!({})),
                Err(AppError::Locked(_))
            ));
            run.stage("s", &serde_json::Value::Null, &[], |_| Ok(vec![])).unwrap();
        }
        let run = Run::open(dir.path(), "t", serde_json::json!({})).unwrap();
        assert!(run.manifest.stages.contains_key("s"));
        assert!(LAYOUT.iter().all(|d| dir.path().join(d).is_dir()));
    }

    #[test]
    fn missing_input_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::open(dir.path(), "t", serde_json::json!({})).unwrap();
        let err = run.require("models/model.cudm", "train").unwrap_err();
        assert!(matches!(err, AppError::Dependency { needed: "train", .. }));
        assert_eq!(err.exit_code(), 3);
    }
}
