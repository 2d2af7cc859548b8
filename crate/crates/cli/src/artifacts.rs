//! On-disk layout and small I/O helpers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use questioner::OracleKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const RECORD_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn build_dir(&self) -> PathBuf {
        self.root.join("build")
    }
    pub fn manifest(&self) -> PathBuf {
        self.build_dir().join("manifest.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.build_dir().join("corpus.jsonl")
    }
    pub fn heldout(&self) -> PathBuf {
        self.build_dir().join("heldout.jsonl")
    }
    pub fn bank(&self) -> PathBuf {
        self.build_dir().join("bank.json")
    }
    pub fn oracle(&self, kind: OracleKind) -> PathBuf {
        self.build_dir().join(format!("oracle_{}.json", kind.name()))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn il_checkpoint(&self) -> PathBuf {
        self.train_dir().join("il.json")
    }
    pub fn rl_checkpoint(&self, wiring: OracleKind, horizon: usize) -> PathBuf {
        self.train_dir()
            .join(wiring.name())
            .join(format!("T{horizon}.json"))
    }
    pub fn il_metrics(&self) -> PathBuf {
        self.train_dir().join("metrics").join("il.jsonl")
    }
    pub fn rl_metrics(&self, wiring: OracleKind, horizon: usize) -> PathBuf {
        self.train_dir()
            .join("metrics")
            .join(format!("rl_{}_T{horizon}.jsonl", wiring.name()))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn play_session(&self) -> PathBuf {
        self.root.join("play").join("session.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// sha256 of the build-relevant part of the configuration.
    pub config_hash: String,
    /// File name to sha256 of its contents.
    pub files: BTreeMap<String, String>,
    pub bank_size: usize,
    pub pool_size: usize,
    pub bank_infeasible: bool,
    pub ind_label_noise: f64,
    pub ind_heldout_error: f64,
    pub dep_heldout_error: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Write through a temporary file and rename, so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}: bad record", path.display(), i + 1))?,
        );
    }
    Ok(out)
}
