//! Output directory layout and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use popest::learner::Variant;
use popest::Attribute;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Fixed file names under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn city(&self) -> PathBuf {
        self.root.join("city.json")
    }

    pub fn truth(&self) -> PathBuf {
        self.root.join("truth.csv")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features.csv")
    }

    pub fn sample_dir(&self, run: usize) -> PathBuf {
        self.root.join("samples").join(format!("run_{run}"))
    }

    pub fn estimate_dir(&self, run: usize) -> PathBuf {
        self.root.join("estimates").join(format!("run_{run}"))
    }

    /// `<label>_<attribute>.csv`; labels never contain `_`.
    pub fn estimate(&self, run: usize, label: &str, attribute: Attribute) -> PathBuf {
        self.estimate_dir(run).join(format!("{label}_{attribute}.csv"))
    }

    pub fn model(&self, run: usize, variant: Variant, attribute: Attribute) -> PathBuf {
        self.root.join("models").join(format!("run_{run}")).join(format!("{variant}_{attribute}.json"))
    }

    pub fn trace(&self, run: usize, variant: Variant, attribute: Attribute) -> PathBuf {
        self.root.join("models").join(format!("run_{run}")).join(format!("{variant}_{attribute}_trace.csv"))
    }

    pub fn ingest_dir(&self) -> PathBuf {
        self.root.join("ingest")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    /// Path relative to the root with `/` separators, for manifest keys.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub elapsed_s: f64,
    /// Relative path to hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(path: &Path) -> Self {
        fs::read(path).ok().and_then(|b| serde_json::from_slice(&b).ok()).unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}
