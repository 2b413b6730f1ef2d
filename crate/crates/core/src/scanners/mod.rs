//! Artifact extraction over evidence handles.
//!
//! Every scanner is a pure function of the source bytes and its
//! configuration. Flat sources are scanned as byte streams with bounded
//! memory; tree sources are scanned file by file in path order.

mod cards;
mod devices;
mod encryption;
mod luhn;
mod media;
mod patterns;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity::{IntegrityError, SourceKind};

pub use cards::{extract_card_numbers, sort_by_bank_code, BankGroup, CardHit, CardOccurrence};
pub use devices::{extract_attached_devices, AttachedDeviceRecord};
pub use encryption::{
    detect_encryption_indicators, EncryptionFindings, EncryptionSummary, FdeSignature, ProgramList, ProgramMatch,
};
pub use luhn::luhn_check;
pub use media::{inventory_media_files, MediaType};
pub use patterns::{
    scan_pattern, scan_pattern_with_window, CompiledPatternSet, NamedPattern, PatternSet, DEFAULT_WINDOW,
};

/// Category of an extracted observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    CardNumber,
    Email,
    IdPattern,
    MediaFile,
    EncryptionIndicator,
    AttachedDevice,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 6] = [
        Self::CardNumber,
        Self::Email,
        Self::IdPattern,
        Self::MediaFile,
        Self::EncryptionIndicator,
        Self::AttachedDevice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CardNumber => "card_number",
            Self::Email => "email",
            Self::IdPattern => "id_pattern",
            Self::MediaFile => "media_file",
            Self::EncryptionIndicator => "encryption_indicator",
            Self::AttachedDevice => "attached_device",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown artifact kind `{s}`"))
    }
}

/// Where a hit was observed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    /// Byte offset in a flat source.
    Offset(u64),
    /// Byte offset inside a tree entry.
    File { path: String, offset: u64 },
    /// Zero-based index into a records source.
    Record(u64),
}

impl Location {
    pub(crate) fn at(path: Option<&str>, offset: u64) -> Self {
        match path {
            Some(path) => Self::File { path: path.to_string(), offset },
            None => Self::Offset(offset),
        }
    }

    /// Tree path and byte offset, if the location is byte-addressed.
    pub fn byte_position(&self) -> Option<(Option<&str>, u64)> {
        match self {
            Self::Offset(o) => Some((None, *o)),
            Self::File { path, offset } => Some((Some(path), *offset)),
            Self::Record(_) => None,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Offset(o) => write!(f, "offset:{o}"),
            Self::File { path, offset } => write!(f, "file:{path}@{offset}"),
            Self::Record(i) => write!(f, "record:{i}"),
        }
    }
}

impl FromStr for Location {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("bad location `{s}`");
        if let Some(o) = s.strip_prefix("offset:") {
            return o.parse().map(Self::Offset).map_err(|_| bad());
        }
        if let Some(i) = s.strip_prefix("record:") {
            return i.parse().map(Self::Record).map_err(|_| bad());
        }
        if let Some(rest) = s.strip_prefix("file:") {
            let (path, offset) = rest.rsplit_once('@').ok_or_else(bad)?;
            let offset = offset.parse().map_err(|_| bad())?;
            return Ok(Self::File { path: path.to_string(), offset });
        }
        Err(bad())
    }
}

/// One extracted observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHit {
    pub kind: ArtifactKind,
    /// Normalized value, never empty.
    pub value: String,
    pub location: Location,
    /// Bytes matched at `location`; zero for record-addressed hits.
    pub length: u64,
    pub scanner_id: String,
    /// Operator marker; scanners always leave it unset.
    #[serde(default)]
    pub flagged: bool,
    /// Extra observation, e.g. an extension/signature disagreement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ArtifactHit {
    pub(crate) fn new(kind: ArtifactKind, value: String, location: Location, length: u64, scanner_id: &str) -> Self {
        debug_assert!(!value.is_empty());
        Self { kind, value, location, length, scanner_id: scanner_id.to_string(), flagged: false, note: None }
    }
}

#[derive(Debug, Error)]
pub enum ScanError {
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
    #[error("input contains a non-digit character")]
    NonDigitInput,
    #[error("malformed pattern `{name}`: {reason}")]
    MalformedPattern { name: String, reason: String },
    #[error("pattern set is empty")]
    EmptyPatternSet,
    #[error("pattern search failed for `{name}`: {reason}")]
    PatternSearch { name: String, reason: String },
    #[error("scanner `{scanner}` does not accept {kind} sources")]
    UnsupportedSource { scanner: &'static str, kind: SourceKind },
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: u64, reason: String },
}

impl ScanError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Integrity(e) => e.code(),
            Self::NonDigitInput => "non_digit_input",
            Self::MalformedPattern { .. } => "malformed_pattern",
            Self::EmptyPatternSet => "empty_pattern_set",
            Self::PatternSearch { .. } => "pattern_search",
            Self::UnsupportedSource { .. } => "unsupported_source",
            Self::MalformedRecord { .. } => "malformed_record",
        }
    }
}

pub type Result<T> = std::result::Result<T, ScanError>;

/// Maps a read error from a stream back to an integrity read failure.
pub(crate) fn read_failure(path: Option<&str>, offset: u64, source: std::io::Error) -> ScanError {
    ScanError::Integrity(IntegrityError::ReadFailure {
        location: format!("{}@{offset}", path.unwrap_or("<stream>")),
        source,
    })
}

pub(crate) const READ_CHUNK: usize = 256 * 1024;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locations_round_trip_through_text() {
        for loc in
            [Location::Offset(5), Location::Record(3), Location::File { path: "Users/a@b/x.jpg".into(), offset: 17 }]
        {
            assert_eq!(loc.to_string().parse::<Location>().unwrap(), loc);
        }
    }

    #[test]
    fn kinds_parse() {
        for k in ArtifactKind::ALL {
            assert_eq!(k.as_str().parse::<ArtifactKind>().unwrap(), k);
        }
        assert!("opinion".parse::<ArtifactKind>().is_err());
    }
}
