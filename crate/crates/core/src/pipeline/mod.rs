//! Manifest-driven pipeline: stage runner, checkpoint ledger, dataset
//! validation and the packaged mock fixture.

pub mod executor;
pub mod fixture;
pub mod jsonl;
pub mod ledger;
pub mod manifest;
pub mod runner;
pub mod validate;

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::broker::BrokerError;
use crate::forge::ForgeError;
use crate::gateway::GatewayError;
use crate::qa::QaError;

pub use executor::{Budget, Outcome, Tally};
pub use ledger::{Action, Ledger, LedgerEntry};
pub use manifest::{Manifest, StageSpec};
pub use runner::{plan, RunOptions, RunSummary, Runner, StageReport};
pub use validate::{validate_dataset, Violation};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("ledger integrity: {0}")]
    Integrity(String),
    #[error("stage {stage} needs {path}; run {needs} first")]
    MissingInput {
        stage: String,
        needs: String,
        path: PathBuf,
    },
    #[error("run interrupted before all records were dispatched")]
    Interrupted,
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Per-record seed: the first 8 bytes (little endian) of
/// `sha256(base ‖ label₀ ‖ 0 ‖ label₁ ‖ 0 …)`.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for l in labels {
        h.update(l.as_bytes());
        h.update([0]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
