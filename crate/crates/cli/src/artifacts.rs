//! Artifact directory: files written by commands plus a manifest of their
//! checksums and the configuration that produced them.
//!
//! ```text
//! manifest.json            checksums, per-run config hashes
//! runs/<run>.config.json   effective config of each run
//! base/denoiser.lkw        frozen base denoiser
//! prior/{encoder,decoder}.lkw
//! key/key.lkw, key/registration.json
//! styles/<name>.lkw
//! protected/<name>.lkw     flat merged model (f64)
//! protected/<name>.json    adapter/coefficient manifest
//! images/<tag>/            images.lkw + PPM files
//! reports/                 JSON, CSV and markdown outputs
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lorakey::container::Container;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "lorakey-manifest/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    /// Foundation hash shared by every artifact in the directory.
    pub foundation_hash: Option<String>,
    /// Latest run per command (and per name for named outputs).
    pub runs: BTreeMap<String, RunRecord>,
    /// Relative path → record.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            foundation_hash: None,
            runs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRecord {
    pub sha256: String,
    pub bytes: u64,
    pub run: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An open artifact directory with the outputs of the current run.
pub struct Artifacts {
    root: PathBuf,
    manifest: Manifest,
    pending: Vec<(String, String, u64)>,
}

impl Artifacts {
    /// Open (creating if needed) the directory at `root`.
    pub fn open(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let mpath = root.join(MANIFEST);
        let manifest = if mpath.exists() {
            let bytes = fs::read(&mpath).map_err(|e| CliError::io(&mpath, e))?;
            let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| CliError::Corrupt {
                path: mpath.clone(),
                source: lorakey::Error::Corrupt(e.to_string()),
            })?;
            if m.format != MANIFEST_FORMAT {
                return Err(CliError::Corrupt {
                    path: mpath,
                    source: lorakey::Error::Corrupt(format!("unknown manifest format `{}`", m.format)),
                });
            }
            m
        } else {
            Manifest::default()
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            pending: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Refuse to mix artifacts from a different world, codec or schedule.
    pub fn check_foundation(&self, cfg: &ExperimentConfig) -> CliResult<()> {
        match &self.manifest.foundation_hash {
            Some(h) if *h != cfg.foundation_hash() => Err(CliError::Mismatch {
                path: self.path(MANIFEST),
                detail: "seed, world, codec, perception, schedule, denoiser or message length changed; \
                         use a fresh artifact directory"
                    .into(),
            }),
            _ => Ok(()),
        }
    }

    /// Write `bytes` atomically and record them as an output of this run.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.path(rel);
        write_atomic(&path, bytes)?;
        self.pending.retain(|(r, _, _)| r != rel);
        self.pending.push((rel.to_string(), sha256_hex(bytes), bytes.len() as u64));
        Ok(path)
    }

    pub fn write_container(&mut self, rel: &str, c: &Container) -> CliResult<PathBuf> {
        let bytes = c.to_bytes()?;
        self.write(rel, &bytes)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(lorakey::Error::from)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Read a file a previous run produced. A missing file names the command
    /// that makes it; a checksum that disagrees with the manifest is corruption.
    pub fn read(&self, rel: &str, what: &str, hint: &str) -> CliResult<Vec<u8>> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                what: what.into(),
                path,
                hint: hint.into(),
            });
        }
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if let Some(rec) = self.manifest.artifacts.get(rel) {
            let actual = sha256_hex(&bytes);
            if actual != rec.sha256 {
                return Err(CliError::Corrupt {
                    path,
                    source: lorakey::Error::Corrupt(format!(
                        "sha256 {actual} differs from manifest {}",
                        rec.sha256
                    )),
                });
            }
        }
        Ok(bytes)
    }

    pub fn read_container(&self, rel: &str, what: &str, hint: &str) -> CliResult<Container> {
        let bytes = self.read(rel, what, hint)?;
        Container::from_bytes(&bytes).map_err(|source| CliError::Corrupt {
            path: self.path(rel),
            source,
        })
    }

    /// Decode an artifact with `f`, reporting failures as corruption.
    pub fn load<T>(
        &self,
        rel: &str,
        what: &str,
        hint: &str,
        f: impl FnOnce(&Container) -> lorakey::Result<T>,
    ) -> CliResult<T> {
        let c = self.read_container(rel, what, hint)?;
        f(&c).map_err(|source| CliError::Corrupt {
            path: self.path(rel),
            source,
        })
    }

    /// Record this run's outputs and effective config, then save the manifest.
    pub fn commit(&mut self, run: &str, command: &str, cfg: &ExperimentConfig) -> CliResult<()> {
        let cfg_rel = format!("runs/{run}.config.json");
        let mut text = cfg.to_pretty_json();
        text.push('\n');
        self.write(&cfg_rel, text.as_bytes())?;
        let mut outputs: Vec<String> = self.pending.iter().map(|(r, _, _)| r.clone()).collect();
        outputs.sort();
        for (rel, sha256, bytes) in self.pending.drain(..) {
            self.manifest.artifacts.insert(
                rel,
                ArtifactRecord {
                    sha256,
                    bytes,
                    run: run.to_string(),
                },
            );
        }
        self.manifest.runs.insert(
            run.to_string(),
            RunRecord {
                command: command.to_string(),
                config_hash: cfg.hash(),
                outputs,
            },
        );
        self.manifest.foundation_hash = Some(cfg.foundation_hash());
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(lorakey::Error::from)?;
        text.push('\n');
        write_atomic(&self.path(MANIFEST), text.as_bytes())
    }
}

/// Write to a sibling temporary file and rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_records_checksums_and_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut a = Artifacts::open(dir.path()).unwrap();
        a.write("x/y.bin", b"hello").unwrap();
        a.commit("demo", "demo", &cfg).unwrap();
        let b = Artifacts::open(dir.path()).unwrap();
        let rec = &b.manifest().artifacts["x/y.bin"];
        assert_eq!(rec.sha256, sha256_hex(b"hello"));
        assert_eq!(b.manifest().runs["demo"].config_hash, cfg.hash());
        assert!(b.manifest().runs["demo"].outputs.contains(&"runs/demo.config.json".to_string()));
        assert_eq!(b.read("x/y.bin", "demo", "demo").unwrap(), b"hello");
    }

    #[test]
    fn tampering_and_absence_are_distinguished() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut a = Artifacts::open(dir.path()).unwrap();
        a.write("f.bin", b"abc").unwrap();
        a.commit("r", "r", &cfg).unwrap();
        fs::write(dir.path().join("f.bin"), b"abd").unwrap();
        let a = Artifacts::open(dir.path()).unwrap();
        assert!(matches!(a.read("f.bin", "f", "r"), Err(CliError::Corrupt { .. })));
        assert!(matches!(a.read("g.bin", "g", "r"), Err(CliError::MissingArtifact { .. })));
    }

    #[test]
    fn foundation_changes_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        let mut a = Artifacts::open(dir.path()).unwrap();
        a.commit("r", "r", &cfg).unwrap();
        cfg.verify.n_images = 3;
        assert!(a.check_foundation(&cfg).is_ok());
        cfg.seed += 1;
        assert!(matches!(a.check_foundation(&cfg), Err(CliError::Mismatch { .. })));
    }
}
