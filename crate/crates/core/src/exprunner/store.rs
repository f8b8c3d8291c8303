//! Run store: one directory holding every record, loss history and cached
//! checkpoint of a grid.
//!
//! ```text
//! <root>/records/<hash>.json      one RunRecord per cell and run index
//! <root>/histories/<hash>.csv     epoch,phase,lr,mean_loss
//! <root>/checkpoints/<name>.ckpt  cached pre-trained / intermediate backbones
//! <root>/locks/<hash>.lock        held while a cell trains
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plan::CellKey;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::optim::Phase;
use crate::train::EpochRecord;

/// Bumped whenever training semantics change, so old records stop matching.
pub const RECORD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Complete,
    Failed,
}

/// Seeds resolved for one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSeeds {
    pub init: u64,
    pub pretrain: u64,
    pub pretrain_data: u64,
    pub intermediate: u64,
    pub finetune: u64,
    pub finetune_data: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub accuracy: f64,
    pub miou: f64,
    pub iou_fg: Option<f64>,
    pub iou_bg: Option<f64>,
    pub iou_unknown: Option<f64>,
    pub precision: [Option<f64>; 3],
    pub n_pixels: u64,
}

impl From<&MetricsReport> for RecordMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            accuracy: r.accuracy,
            miou: r.miou,
            iou_fg: r.per_class_iou[0],
            iou_bg: r.per_class_iou[1],
            iou_unknown: r.per_class_iou[2],
            precision: r.per_class_precision,
            n_pixels: r.n_pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureInfo {
    pub category: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: CellKey,
    pub config_hash: String,
    pub plan_name: String,
    /// `runs_per_cell` of the plan that produced the record.
    pub runs_expected: usize,
    pub status: Status,
    pub failure: Option<FailureInfo>,
    pub seeds: CellSeeds,
    pub metrics: Option<RecordMetrics>,
    /// Every phase's per-epoch history, in phase order.
    pub history: Vec<EpochRecord>,
    pub wall_clock_secs: BTreeMap<Phase, f64>,
    /// Store-relative checkpoint paths this cell used or produced.
    pub checkpoints: Vec<String>,
}

impl RunRecord {
    pub fn is_complete(&self) -> bool {
        self.status == Status::Complete && self.metrics.is_some()
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,phase,lr,mean_loss\n");
    for r in history {
        out.push_str(&format!("{},{},{:e},{}\n", r.epoch, r.phase, r.lr, r.mean_loss));
    }
    out
}

/// Removes its lock file when dropped.
#[derive(Debug)]
pub struct CellLock {
    path: PathBuf,
}

impl Drop for CellLock {
    fn drop(&mut self) {
        if let Err(e) = fs::remove_file(&self.path) {
            log::warn!("could not release {}: {e}", self.path.display());
        }
    }
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Opens `root`, creating the directory layout if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["records", "histories", "checkpoints", "locks"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self { root })
    }

    /// Opens an existing store without creating anything.
    pub fn open_existing(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.join("records").is_dir() {
            return Err(Error::Store(format!("{} is not a run store", root.display())));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_path(&self, hash: &str) -> PathBuf {
        self.root.join("records").join(format!("{hash}.json"))
    }

    pub fn history_path(&self, hash: &str) -> PathBuf {
        self.root.join("histories").join(format!("{hash}.csv"))
    }

    /// Store-relative path of a named checkpoint.
    pub fn checkpoint_rel(name: &str) -> String {
        format!("checkpoints/{name}.ckpt")
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_record(&self, record: &RunRecord) -> Result<()> {
        let json = serde_json::to_string_pretty(record).map_err(|e| Error::Store(e.to_string()))?;
        write_atomic(
            &self.history_path(&record.config_hash),
            history_csv(&record.history).as_bytes(),
        )?;
        write_atomic(&self.record_path(&record.config_hash), json.as_bytes())
    }

    pub fn read_record(&self, hash: &str) -> Result<Option<RunRecord>> {
        let path = self.record_path(hash);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| Error::Store(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn is_complete(&self, hash: &str) -> Result<bool> {
        Ok(self.read_record(hash)?.is_some_and(|r| r.is_complete()))
    }

    pub fn delete_record(&self, hash: &str) -> Result<()> {
        for path in [self.record_path(hash), self.history_path(hash)] {
            match fs::remove_file(&path) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(path, e)),
                _ => {}
            }
        }
        Ok(())
    }

    /// All records, ordered by cell key.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let dir = self.root.join("records");
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut out = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let record: RunRecord =
                    serde_json::from_str(&text).map_err(|e| Error::Store(format!("{}: {e}", path.display())))?;
                out.push(record);
            }
        }
        out.sort_by(|a, b| a.key.cmp(&b.key).then_with(|| a.config_hash.cmp(&b.config_hash)));
        Ok(out)
    }

    /// Takes the cell's lock file, or `None` if another process holds it.
    pub fn try_lock(&self, hash: &str) -> Result<Option<CellLock>> {
        let path = self.root.join("locks").join(format!("{hash}.lock"));
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Some(CellLock { path }))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

/// Writes through a sibling temporary file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
