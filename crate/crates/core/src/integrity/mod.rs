//! Evidence integrity: read-only handles, hash manifests and the audit log.
//!
//! Nothing in this crate writes to evidence. Every source is opened through
//! an [`EvidenceHandle`], which only exposes read operations; the manifest
//! taken at open time is re-verified after assessment to prove it.

mod audit;
mod handle;
mod manifest;

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub use audit::{AuditEvent, AuditLog};
pub use handle::{open_evidence, EvidenceHandle, SourceKind, TreeEntry};
pub use manifest::{
    compute_manifest, compute_manifest_with_chunk, verify_manifest, HashManifest, ManifestEntry, Mismatch,
    VerificationResult, DEFAULT_CHUNK_SIZE, SHA256,
};

#[derive(Debug, Error)]
pub enum IntegrityError {
    #[error("evidence not found: {0}")]
    NotFound(PathBuf),
    #[error("evidence not readable: {path}: {source}")]
    NotReadable { path: PathBuf, source: io::Error },
    #[error("source at {path} is not a {expected}")]
    KindMismatch { path: PathBuf, expected: &'static str },
    #[error("integrity violation: {0}")]
    IntegrityViolation(String),
    #[error("read failure at {location}: {source}")]
    ReadFailure { location: String, source: io::Error },
    #[error("unsupported hash algorithm: {0}")]
    AlgorithmUnsupported(String),
    #[error("malformed manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("audit log is closed")]
    LogClosed,
    #[error("audit log corrupt at line {line}: {reason}")]
    LogCorrupt { line: usize, reason: String },
    #[error("audit log write failed: {0}")]
    LogWrite(io::Error),
}

impl IntegrityError {
    /// Short machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::NotFound(_) => "not_found",
            Self::NotReadable { .. } => "not_readable",
            Self::KindMismatch { .. } => "kind_mismatch",
            Self::IntegrityViolation(_) => "integrity_violation",
            Self::ReadFailure { .. } => "read_failure",
            Self::AlgorithmUnsupported(_) => "algorithm_unsupported",
            Self::MalformedManifest { .. } => "malformed_manifest",
            Self::LogClosed => "log_closed",
            Self::LogCorrupt { .. } => "log_corrupt",
            Self::LogWrite(_) => "log_write",
        }
    }
}

pub type Result<T> = std::result::Result<T, IntegrityError>;
