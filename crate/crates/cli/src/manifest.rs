use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one command invocation, written last so that its presence
/// means every listed artifact is complete.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub configs: Vec<PathBuf>,
    pub seed: Option<u64>,
    /// SHA-256 over the dataset files, in declaration order.
    pub dataset_sha256: Option<String>,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn begin(command: &str) -> Self {
        Self {
            command: command.to_string(),
            configs: Vec::new(),
            seed: None,
            dataset_sha256: None,
            started: stamp(Utc::now()),
            finished: String::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf> {
        self.finished = stamp(Utc::now());
        let path = out_dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&self)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn hash_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let mut f = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        std::io::copy(&mut f, &mut h).with_context(|| format!("reading {}", p.display()))?;
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
