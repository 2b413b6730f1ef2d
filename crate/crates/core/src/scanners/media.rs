use std::io::Read;

use serde::{Deserialize, Serialize};

use super::{ArtifactHit, ArtifactKind, Location, Result, ScanError};
use crate::integrity::{EvidenceHandle, SourceKind};

pub const MEDIA_SCANNER_ID: &str = "media";

/// Content types recognized by leading bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaType {
    Jpeg,
    Png,
    Mp4,
    /// Not media; detected so that disguised archives can be noted.
    Zip,
    /// Not media.
    Pdf,
}

impl MediaType {
    pub fn is_media(self) -> bool {
        matches!(self, Self::Jpeg | Self::Png | Self::Mp4)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Jpeg => "jpeg",
            Self::Png => "png",
            Self::Mp4 => "mp4",
            Self::Zip => "zip",
            Self::Pdf => "pdf",
        }
    }

    fn from_magic(head: &[u8]) -> Option<Self> {
        if head.starts_with(&[0xFF, 0xD8, 0xFF]) {
            Some(Self::Jpeg)
        } else if head.starts_with(&[0x89, 0x50, 0x4E, 0x47]) {
            Some(Self::Png)
        } else if head.len() >= 8 && &head[4..8] == b"ftyp" {
            Some(Self::Mp4)
        } else if head.starts_with(&[0x50, 0x4B, 0x03, 0x04]) {
            Some(Self::Zip)
        } else if head.starts_with(b"%PDF-") {
            Some(Self::Pdf)
        } else {
            None
        }
    }

    fn from_extension(path: &str) -> Option<Self> {
        let name = path.rsplit('/').next().unwrap_or(path);
        let (_, ext) = name.rsplit_once('.')?;
        match ext.to_ascii_lowercase().as_str() {
            "jpg" | "jpeg" | "jpe" => Some(Self::Jpeg),
            "png" => Some(Self::Png),
            "mp4" | "m4v" => Some(Self::Mp4),
            "zip" => Some(Self::Zip),
            "pdf" => Some(Self::Pdf),
            _ => None,
        }
    }

    fn magic_len(self) -> u64 {
        match self {
            Self::Jpeg => 3,
            Self::Png | Self::Zip => 4,
            Self::Mp4 => 8,
            Self::Pdf => 5,
        }
    }
}

/// One hit per tree file that either starts with a media signature or has
/// a media extension. Disagreement between the two is noted on the hit.
pub fn inventory_media_files(handle: &EvidenceHandle) -> Result<Vec<ArtifactHit>> {
    if handle.kind() != SourceKind::DirectoryTree {
        return Err(ScanError::UnsupportedSource { scanner: MEDIA_SCANNER_ID, kind: handle.kind() });
    }
    let mut hits = Vec::new();
    for entry in handle.entries() {
        let mut head = [0u8; 16];
        let mut reader = handle.open_entry(&entry.path)?;
        let n = read_head(&mut reader, &mut head).map_err(|e| super::read_failure(Some(&entry.path), 0, e))?;
        let by_magic = MediaType::from_magic(&head[..n]);
        let by_ext = MediaType::from_extension(&entry.path);

        let media_magic = by_magic.filter(|m| m.is_media());
        let media_ext = by_ext.filter(|m| m.is_media());
        if media_magic.is_none() && media_ext.is_none() {
            continue;
        }
        let length = by_magic.map_or(0, MediaType::magic_len);
        let mut hit = ArtifactHit::new(
            ArtifactKind::MediaFile,
            entry.path.clone(),
            Location::File { path: entry.path.clone(), offset: 0 },
            length,
            MEDIA_SCANNER_ID,
        );
        if by_magic != by_ext {
            let content = by_magic.map_or("unrecognized content", MediaType::as_str);
            let claimed = by_ext.map_or("no known extension", MediaType::as_str);
            hit.note = Some(format!("mismatch: extension claims {claimed}, signature is {content}"));
        }
        hits.push(hit);
    }
    Ok(hits)
}

fn read_head(reader: &mut dyn Read, buf: &mut [u8]) -> std::io::Result<usize> {
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
