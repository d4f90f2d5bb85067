//! On-disk layout of a session directory:
//!
//! - `session.json`: spec, data root, step and state
//! - `feedback.jsonl`: append-only corrections, written before they apply
//! - `model.json`: the latest checkpoint
//! - `metrics.csv`: the metrics history
//!
//! The feedback log is the source of truth; everything else is rebuilt by
//! replaying it against the spec.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{run_xil, LoopError, MetricsPoint, ReplayOracle, Result, Session, SessionSpec, SessionState};
use crate::feedback::FeedbackLog;

pub const SESSION_FORMAT: &str = "xil-session";
pub const SESSION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFile {
    pub format: String,
    pub version: u32,
    pub spec: SessionSpec,
    pub data_root: PathBuf,
    pub step: usize,
    pub state: SessionState,
}

impl SessionFile {
    pub fn load(dir: &Path) -> Result<Self> {
        let file: SessionFile = serde_json::from_str(&std::fs::read_to_string(dir.join("session.json"))?)?;
        if file.format != SESSION_FORMAT || file.version != SESSION_VERSION {
            return Err(LoopError::InvalidConfig(format!(
                "unsupported session file {} v{}",
                file.format, file.version
            )));
        }
        Ok(file)
    }
}

pub fn write_metrics_csv(path: &Path, points: &[MetricsPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|p| p.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> LoopError {
    LoopError::Io(std::io::Error::other(e.to_string()))
}

impl Session {
    pub fn session_dir(&self) -> Option<&Path> {
        self.persist_dir.as_deref()
    }

    /// Starts persisting into `dir` (created if needed): corrections are
    /// logged before they apply and a checkpoint is written after every
    /// refit.
    pub fn persist_to(&mut self, dir: &Path) -> Result<()> {
        if self.spec.is_none() {
            return Err(LoopError::NotPersistable);
        }
        std::fs::create_dir_all(dir)?;
        self.log = Some(FeedbackLog::open(&dir.join("feedback.jsonl"))?);
        self.persist_dir = Some(dir.to_path_buf());
        self.checkpoint()
    }

    /// Writes `session.json`, `model.json` and `metrics.csv`.
    pub fn checkpoint(&self) -> Result<()> {
        let dir = self.persist_dir.as_ref().ok_or(LoopError::NotPersistable)?;
        let spec = self.spec.clone().ok_or(LoopError::NotPersistable)?;
        let data_root = std::fs::canonicalize(&self.data_root).unwrap_or_else(|_| self.data_root.clone());
        let file = SessionFile {
            format: SESSION_FORMAT.into(),
            version: SESSION_VERSION,
            spec,
            data_root,
            step: self.step,
            state: self.state(),
        };
        std::fs::write(dir.join("session.json"), serde_json::to_string_pretty(&file)?)?;
        self.model.save(&dir.join("model.json"))?;
        write_metrics_csv(&dir.join("metrics.csv"), &self.metrics)
    }

    /// Rebuilds a persisted session by replaying its feedback log. The
    /// result is detached from `dir`.
    pub fn replay(dir: &Path) -> Result<Self> {
        let file = SessionFile::load(dir)?;
        let mut session = Session::start(file.spec, file.data_root)?;
        let log = dir.join("feedback.jsonl");
        let mut oracle = if log.exists() {
            ReplayOracle::from_log(&log)?
        } else {
            ReplayOracle::default()
        };
        run_xil(&mut session, &mut oracle)?;
        if oracle.remaining() > 0 {
            return Err(LoopError::InvalidConfig(format!(
                "{} logged corrections left over after the budget was spent",
                oracle.remaining()
            )));
        }
        Ok(session)
    }

    /// Replays `dir` and keeps persisting into it.
    pub fn resume(dir: &Path) -> Result<Self> {
        let mut session = Self::replay(dir)?;
        session.persist_to(dir)?;
        Ok(session)
    }
}
