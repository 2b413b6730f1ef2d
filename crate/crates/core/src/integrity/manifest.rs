use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EvidenceHandle, IntegrityError, Result, SourceKind};

/// The only supported digest algorithm.
pub const SHA256: &str = "SHA-256";

/// Range size for per-chunk digests of flat sources.
pub const DEFAULT_CHUNK_SIZE: u64 = 64 * 1024 * 1024;

const WHOLE_LABEL: &str = "whole";
const READ_BUF: usize = 256 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Tree-relative path, `whole`, or `range:<start>-<end>` (end exclusive,
    /// zero padded so that lexical order is numeric order).
    pub label: String,
    /// Lowercase hex SHA-256.
    pub digest: String,
}

/// Digests of every file (tree) or every range (flat source) of a source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HashManifest {
    pub algorithm: String,
    /// Range size used for flat sources; `None` for trees.
    pub chunk_size: Option<u64>,
    /// Sorted by label.
    pub entries: Vec<ManifestEntry>,
    pub computed_at: DateTime<Utc>,
}

impl PartialEq for HashManifest {
    fn eq(&self, other: &Self) -> bool {
        self.algorithm == other.algorithm && self.chunk_size == other.chunk_size && self.entries == other.entries
    }
}

impl HashManifest {
    /// Line-oriented text form: two header comments, then
    /// `<hex-digest>\t<label>` per entry in label order. Carries no
    /// timestamp, so unchanged sources always serialize identically.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# algorithm={}", self.algorithm);
        if let Some(chunk) = self.chunk_size {
            let _ = writeln!(out, "# chunk={chunk}");
        }
        for entry in &self.entries {
            let _ = writeln!(out, "{}\t{}", entry.digest, entry.label);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut algorithm = None;
        let mut chunk_size = None;
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let header = header.trim();
                if let Some(name) = header.strip_prefix("algorithm=") {
                    algorithm = Some(name.to_string());
                } else if let Some(size) = header.strip_prefix("chunk=") {
                    chunk_size = Some(size.parse().map_err(|_| IntegrityError::MalformedManifest {
                        line: line_no,
                        reason: format!("bad chunk size `{size}`"),
                    })?);
                }
                continue;
            }
            let (digest, label) = line.split_once('\t').ok_or_else(|| IntegrityError::MalformedManifest {
                line: line_no,
                reason: "expected `<digest>\\t<label>`".into(),
            })?;
            if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(IntegrityError::MalformedManifest {
                    line: line_no,
                    reason: format!("bad digest `{digest}`"),
                });
            }
            entries.push(ManifestEntry { label: label.to_string(), digest: digest.to_ascii_lowercase() });
        }
        entries.sort_by(|a, b| a.label.cmp(&b.label));
        Ok(Self {
            algorithm: algorithm.unwrap_or_else(|| SHA256.to_string()),
            chunk_size,
            entries,
            computed_at: Utc::now(),
        })
    }

    /// SHA-256 of the text form, used as a compact reference in reports.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

pub fn compute_manifest(handle: &EvidenceHandle) -> Result<HashManifest> {
    compute_manifest_with_chunk(handle, DEFAULT_CHUNK_SIZE)
}

/// As [`compute_manifest`] with an explicit range size for flat sources.
pub fn compute_manifest_with_chunk(handle: &EvidenceHandle, chunk_size: u64) -> Result<HashManifest> {
    assert!(chunk_size > 0, "chunk size must be positive");
    let mut entries = Vec::new();
    let chunk = match handle.kind() {
        SourceKind::DirectoryTree => {
            handle.for_each_stream(|path, reader| {
                let path = path.expect("tree streams carry a path");
                let digest = hash_reader(reader, path)?;
                entries.push(ManifestEntry { label: path.to_string(), digest });
                Ok(())
            })?;
            None
        }
        SourceKind::RawImage | SourceKind::ArtifactRecords => {
            let mut reader = handle.stream()?;
            entries = hash_ranges(&mut reader, chunk_size, handle.source_id())?;
            Some(chunk_size)
        }
    };
    entries.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(HashManifest { algorithm: SHA256.to_string(), chunk_size: chunk, entries, computed_at: Utc::now() })
}

fn hash_reader(reader: &mut dyn Read, location: &str) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; READ_BUF];
    loop {
        let n = reader
            .read(&mut buf)
            .map_err(|source| IntegrityError::ReadFailure { location: location.to_string(), source })?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn range_label(start: u64, end: u64) -> String {
    format!("range:{start:020}-{end:020}")
}

fn hash_ranges(reader: &mut dyn Read, chunk_size: u64, source: &str) -> Result<Vec<ManifestEntry>> {
    let mut whole = Sha256::new();
    let mut part = Sha256::new();
    let mut part_start = 0u64;
    let mut offset = 0u64;
    let mut entries = Vec::new();
    let mut buf = vec![0u8; READ_BUF];
    loop {
        let n = reader.read(&mut buf).map_err(|source_err| IntegrityError::ReadFailure {
            location: format!("{source}@{offset}"),
            source: source_err,
        })?;
        if n == 0 {
            break;
        }
        whole.update(&buf[..n]);
        let mut data = &buf[..n];
        while !data.is_empty() {
            let room = (part_start + chunk_size - offset) as usize;
            let take = room.min(data.len());
            part.update(&data[..take]);
            offset += take as u64;
            data = &data[take..];
            if offset - part_start == chunk_size {
                let digest = hex::encode(std::mem::take(&mut part).finalize());
                entries.push(ManifestEntry { label: range_label(part_start, offset), digest });
                part_start = offset;
            }
        }
    }
    if offset > part_start {
        entries.push(ManifestEntry { label: range_label(part_start, offset), digest: hex::encode(part.finalize()) });
    }
    entries.push(ManifestEntry { label: WHOLE_LABEL.to_string(), digest: hex::encode(whole.finalize()) });
    Ok(entries)
}

/// One divergent manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub label: String,
    /// Digest recorded in the manifest; `None` if the entry is new.
    pub expected: Option<String>,
    /// Digest of the source now; `None` if the entry is gone.
    pub actual: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerificationResult {
    Ok,
    Mismatches(Vec<Mismatch>),
}

impl VerificationResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, Self::Ok)
    }

    pub fn mismatches(&self) -> &[Mismatch] {
        match self {
            Self::Ok => &[],
            Self::Mismatches(m) => m,
        }
    }
}

/// Recomputes the manifest of `handle` and compares it entry by entry.
pub fn verify_manifest(handle: &EvidenceHandle, manifest: &HashManifest) -> Result<VerificationResult> {
    if manifest.algorithm != SHA256 {
        return Err(IntegrityError::AlgorithmUnsupported(manifest.algorithm.clone()));
    }
    let current = compute_manifest_with_chunk(handle, manifest.chunk_size.unwrap_or(DEFAULT_CHUNK_SIZE))?;
    let expected: BTreeMap<&str, &str> =
        manifest.entries.iter().map(|e| (e.label.as_str(), e.digest.as_str())).collect();
    let actual: BTreeMap<&str, &str> = current.entries.iter().map(|e| (e.label.as_str(), e.digest.as_str())).collect();

    let mut mismatches = Vec::new();
    for (label, want) in &expected {
        match actual.get(label) {
            Some(got) if got == want => {}
            got => mismatches.push(Mismatch {
                label: label.to_string(),
                expected: Some(want.to_string()),
                actual: got.map(|g| g.to_string()),
            }),
        }
    }
    for (label, got) in &actual {
        if !expected.contains_key(label) {
            mismatches.push(Mismatch { label: label.to_string(), expected: None, actual: Some(got.to_string()) });
        }
    }
    mismatches.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(if mismatches.is_empty() { VerificationResult::Ok } else { VerificationResult::Mismatches(mismatches) })
}
