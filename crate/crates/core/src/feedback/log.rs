use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Correction, FeedbackError};

/// One line of the feedback log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub seq: u64,
    pub timestamp_ms: u64,
    /// Queries consumed before this correction.
    pub step: usize,
    pub strategy: String,
    pub correction: Correction,
}

/// Append-only JSON-lines log of corrections. Each append is flushed and
/// synced before returning.
#[derive(Debug)]
pub struct FeedbackLog {
    path: PathBuf,
    next_seq: u64,
}

impl FeedbackLog {
    /// Opens (creating if needed) the log at `path`, continuing its
    /// sequence numbering.
    pub fn open(path: &Path) -> Result<Self, FeedbackError> {
        let next_seq = if path.exists() { Self::read(path)?.len() as u64 } else { 0 };
        if !path.exists() {
            File::create(path)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            next_seq,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, step: usize, strategy: &str, correction: &Correction) -> Result<FeedbackRecord, FeedbackError> {
        let record = FeedbackRecord {
            seq: self.next_seq,
            timestamp_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0),
            step,
            strategy: strategy.to_string(),
            correction: correction.clone(),
        };
        let mut file = OpenOptions::new().append(true).open(&self.path)?;
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        self.next_seq += 1;
        Ok(record)
    }

    pub fn read(path: &Path) -> Result<Vec<FeedbackRecord>, FeedbackError> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feedback.jsonl");
        let mut log = FeedbackLog::open(&path).unwrap();
        log.append(0, "ce", &Correction::new(4, 1, vec![2, 0])).unwrap();
        log.append(1, "ce", &Correction::new(9, 0, vec![])).unwrap();
        let mut log = FeedbackLog::open(&path).unwrap();
        let rec = log.append(2, "rrr", &Correction::new(1, 1, vec![3])).unwrap();
        assert_eq!(rec.seq, 2);
        let all = FeedbackLog::read(&path).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].correction.components, vec![0, 2]);
    }
}
