//! Output directory layout, ownership lock and completion records.
//!
//! Every artifact lives at `<out>/<dir>/<stem>-<key>.<ext>`, where `key`
//! hashes everything that determines the artifact's contents. Once written,
//! a `.sha256` sidecar records the file digest; an artifact counts as present
//! only when the digest still matches.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{PktError, Result};

use super::config::{hash_json, ExperimentConfig, Paradigm};

pub const DIRS: [&str; 6] = ["data", "models", "scores", "deltas", "adapters", "reports"];
const LOCK: &str = ".lock";
const KEY_LEN: usize = 12;

/// `git describe`-style version of this build.
pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(fs::read(path)?)))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

/// Exclusive owner of an output directory for the life of the value.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    lock: PathBuf,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        for d in DIRS {
            fs::create_dir_all(root.join(d))?;
        }
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(PktError::Locked(lock)),
            Err(e) => return Err(e.into()),
        }
        Ok(Workspace { root: root.to_path_buf(), lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn artifact(&self, dir: &str, stem: &str, key: &str, ext: &str) -> PathBuf {
        self.root.join(dir).join(format!("{stem}-{}.{ext}", &key[..KEY_LEN]))
    }

    pub fn is_complete(&self, path: &Path) -> bool {
        match (fs::read_to_string(sidecar(path)), file_digest(path)) {
            (Ok(recorded), Ok(actual)) => recorded.trim() == actual,
            _ => false,
        }
    }

    pub fn require(&self, path: &Path) -> Result<()> {
        if self.is_complete(path) {
            Ok(())
        } else {
            Err(PktError::Dependency(path.to_path_buf()))
        }
    }

    /// Records the digest that marks `path` complete.
    pub fn finish(&self, path: &Path) -> Result<()> {
        fs::write(sidecar(path), file_digest(path)?)?;
        Ok(())
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Input hashes of every stage, derived from the config alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keys {
    pub config: String,
    pub data: String,
    pub large: String,
    pub small: String,
    pub scores: String,
    pub extract: String,
    pub align: String,
    pub inject: String,
    pub lora_init: String,
    pub finetune: String,
    pub eval: String,
    pub analysis: String,
}

fn key(stage: &str, parts: Value) -> String {
    hash_json(&json!({"stage": stage, "inputs": parts}))
}

impl Keys {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let data = key("data", json!([cfg.seed, cfg.data]));
        let large = key("large", json!([data, cfg.large, cfg.train]));
        let small = key("small", json!([data, cfg.small, cfg.train]));
        let scores = key("scores", json!([large, small, cfg.extraction.lens]));
        let extract = key("extract", json!([scores, cfg.paradigm, cfg.extraction, cfg.seed]));
        let align = match cfg.paradigm {
            Paradigm::Prepkt => key("align", json!([extract, cfg.laten])),
            _ => key("align", json!([extract, cfg.reduce()])),
        };
        let inject = key("inject", json!([align]));
        let lora_init = key("lora-init", json!([extract, cfg.lora.init, cfg.lora.rank]));
        let finetune = key("finetune", json!([lora_init, cfg.lora]));
        let fin = match cfg.paradigm {
            Paradigm::Postpkt => &finetune,
            _ => &inject,
        };
        let eval = key("eval", json!([fin, data]));
        let analysis = key("analyze", json!([fin, cfg.analysis]));
        Keys {
            config: cfg.hash(),
            data,
            large,
            small,
            scores,
            extract,
            align,
            inject,
            lora_init,
            finetune,
            eval,
            analysis,
        }
    }
}

/// Metadata block embedded in every container the pipeline writes.
pub fn provenance(cfg: &ExperimentConfig, stage: &str, key: &str, extra: Value) -> Value {
    json!({
        "stage": stage,
        "key": key,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "paradigm": cfg.paradigm,
        "version": version(),
        "details": extra,
    })
}
