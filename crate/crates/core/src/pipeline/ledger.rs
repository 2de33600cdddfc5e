//! Append-only run ledger, one per stage directory.
//!
//! Each line records what happened to one record. `retained`, `dropped` and
//! `emitted` are terminal; `failed` marks a record to retry on the next run.
//! Terminal entries carry the record's result so outputs can be rebuilt
//! without repeating any model call.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Retained,
    Dropped,
    Failed,
    Emitted,
}

impl Action {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Action::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub stage: String,
    pub record_id: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    stage: String,
    canonical: bool,
    file: File,
    terminal: BTreeMap<String, LedgerEntry>,
    failures: usize,
}

impl Ledger {
    /// Opens (creating if needed) and verifies the ledger at `path`.
    pub fn open(path: &Path, stage: &str, canonical: bool) -> Result<Self, PipelineError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        let mut terminal = BTreeMap::new();
        let mut failures = 0;
        if path.exists() {
            let f = File::open(path).map_err(|e| PipelineError::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| PipelineError::io(path, e))?;
                let entry: LedgerEntry =
                    serde_json::from_str(&line).map_err(|e| PipelineError::Corrupt {
                        path: path.to_path_buf(),
                        line: i + 1,
                        detail: e.to_string(),
                    })?;
                if entry.stage != stage {
                    return Err(PipelineError::Corrupt {
                        path: path.to_path_buf(),
                        line: i + 1,
                        detail: format!(
                            "entry belongs to stage {:?}, expected {stage:?}",
                            entry.stage
                        ),
                    });
                }
                if !entry.action.is_terminal() {
                    failures += 1;
                    continue;
                }
                if terminal.contains_key(&entry.record_id) {
                    return Err(PipelineError::Integrity(format!(
                        "{}:{}: second terminal action for record {}",
                        path.display(),
                        i + 1,
                        entry.record_id
                    )));
                }
                terminal.insert(entry.record_id.clone(), entry);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| PipelineError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            stage: stage.to_string(),
            canonical,
            file,
            terminal,
            failures,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn terminal(&self, record_id: &str) -> Option<&LedgerEntry> {
        self.terminal.get(record_id)
    }

    pub fn terminal_count(&self) -> usize {
        self.terminal.len()
    }

    /// `failed` lines seen when the ledger was opened.
    pub fn prior_failures(&self) -> usize {
        self.failures
    }

    pub fn append(
        &mut self,
        record_id: &str,
        action: Action,
        cause: Option<String>,
        data: Option<Value>,
    ) -> Result<(), PipelineError> {
        if action.is_terminal() && self.terminal.contains_key(record_id) {
            return Err(PipelineError::Integrity(format!(
                "{}: second terminal action for record {record_id}",
                self.path.display()
            )));
        }
        let timestamp_ms = (!self.canonical).then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)
        });
        let entry = LedgerEntry {
            stage: self.stage.clone(),
            record_id: record_id.to_string(),
            action,
            cause,
            timestamp_ms,
            data,
        };
        let mut line = serde_json::to_vec(&entry).expect("ledger entry serializes");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| PipelineError::io(&self.path, e))?;
        if action.is_terminal() {
            self.terminal.insert(entry.record_id.clone(), entry);
        }
        Ok(())
    }
}
