use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{read_failure, ArtifactHit, ArtifactKind, Location, Result, ScanError};
use crate::integrity::{EvidenceHandle, SourceKind};

pub const ENCRYPTION_SCANNER_ID: &str = "encryption";

const SECTOR: usize = 512;
const LUKS_MAGIC: &[u8] = b"LUKS\xba\xbe";
/// BitLocker volumes carry this OEM id right after the boot jump.
const BITLOCKER_OEM: &[u8] = b"-FVE-FS-";
const BITLOCKER_OEM_OFFSET: usize = 3;

const DEFAULT_PROGRAMS: &str = include_str!("../../profiles/encryption_programs.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FdeSignature {
    /// `luks` or `bitlocker`.
    pub name: String,
    pub location: Location,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramMatch {
    pub name: String,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncryptionSummary {
    None,
    Possible,
    Strong,
}

impl EncryptionSummary {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Possible => "possible",
            Self::Strong => "strong",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptionFindings {
    pub fde_signatures: Vec<FdeSignature>,
    pub suspect_programs: Vec<ProgramMatch>,
    pub summary: EncryptionSummary,
}

impl EncryptionFindings {
    pub fn from_parts(fde_signatures: Vec<FdeSignature>, suspect_programs: Vec<ProgramMatch>) -> Self {
        let summary = if !fde_signatures.is_empty() {
            EncryptionSummary::Strong
        } else if !suspect_programs.is_empty() {
            EncryptionSummary::Possible
        } else {
            EncryptionSummary::None
        };
        Self { fde_signatures, suspect_programs, summary }
    }

    pub fn none() -> Self {
        Self::from_parts(Vec::new(), Vec::new())
    }

    pub fn to_artifacts(&self) -> Vec<ArtifactHit> {
        let sigs = self.fde_signatures.iter().map(|s| {
            let len = if s.name == "luks" { LUKS_MAGIC.len() } else { BITLOCKER_OEM.len() } as u64;
            ArtifactHit::new(
                ArtifactKind::EncryptionIndicator,
                s.name.clone(),
                s.location.clone(),
                len,
                ENCRYPTION_SCANNER_ID,
            )
        });
        let progs = self.suspect_programs.iter().map(|p| {
            let mut hit = ArtifactHit::new(
                ArtifactKind::EncryptionIndicator,
                p.name.clone(),
                Location::File { path: p.path.clone(), offset: 0 },
                0,
                ENCRYPTION_SCANNER_ID,
            );
            hit.note = Some("installed program".into());
            hit
        });
        sigs.chain(progs).collect()
    }
}

/// Program names to look for in tree paths, as `name<TAB>needle` lines.
/// Needles match case-insensitively against any path component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramList {
    entries: Vec<(String, String)>,
}

impl Default for ProgramList {
    fn default() -> Self {
        Self::parse(DEFAULT_PROGRAMS).expect("shipped program list parses")
    }
}

impl ProgramList {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (name, needle) = line.split_once('\t').ok_or_else(|| ScanError::MalformedPattern {
                name: format!("program list line {}", idx + 1),
                reason: "expected `name<TAB>needle`".into(),
            })?;
            entries.push((name.trim().to_string(), needle.trim().to_ascii_lowercase()));
        }
        Ok(Self { entries })
    }

    fn matches(&self, path: &str) -> Option<&str> {
        let lowered = path.to_ascii_lowercase();
        self.entries
            .iter()
            .find(|(_, needle)| lowered.split('/').any(|component| component.contains(needle.as_str())))
            .map(|(name, _)| name.as_str())
    }
}

/// Volume-header signatures at every sector boundary of a flat source (or
/// at the start of every tree file), plus encryption programs named in
/// tree paths.
pub fn detect_encryption_indicators(handle: &EvidenceHandle, programs: &ProgramList) -> Result<EncryptionFindings> {
    let mut signatures = Vec::new();
    let mut suspects = Vec::new();
    match handle.kind() {
        SourceKind::DirectoryTree => {
            for entry in handle.entries() {
                let mut reader = handle.open_entry(&entry.path)?;
                let mut sector = [0u8; SECTOR];
                let n = read_full(&mut reader, &mut sector).map_err(|e| read_failure(Some(&entry.path), 0, e))?;
                if let Some(name) = header_signature(&sector[..n]) {
                    signatures.push(FdeSignature {
                        name: name.into(),
                        location: Location::File { path: entry.path.clone(), offset: 0 },
                    });
                }
                if let Some(name) = programs.matches(&entry.path) {
                    suspects.push(ProgramMatch { name: name.to_string(), path: entry.path.clone() });
                }
            }
        }
        SourceKind::RawImage | SourceKind::ArtifactRecords => {
            let mut reader = handle.stream()?;
            let mut sector = [0u8; SECTOR];
            let mut offset = 0u64;
            loop {
                let n = read_full(&mut reader, &mut sector).map_err(|e| read_failure(None, offset, e))?;
                if n == 0 {
                    break;
                }
                if let Some(name) = header_signature(&sector[..n]) {
                    signatures.push(FdeSignature { name: name.into(), location: Location::Offset(offset) });
                }
                offset += n as u64;
                if n < SECTOR {
                    break;
                }
            }
        }
    }
    Ok(EncryptionFindings::from_parts(signatures, suspects))
}

fn header_signature(sector: &[u8]) -> Option<&'static str> {
    if sector.starts_with(LUKS_MAGIC) {
        Some("luks")
    } else if sector.len() >= BITLOCKER_OEM_OFFSET + BITLOCKER_OEM.len()
        && &sector[BITLOCKER_OEM_OFFSET..BITLOCKER_OEM_OFFSET + BITLOCKER_OEM.len()] == BITLOCKER_OEM
    {
        Some("bitlocker")
    } else {
        None
    }
}

fn read_full(reader: &mut dyn Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}
