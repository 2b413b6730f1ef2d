use std::fmt;
use std::fs::File;
use std::io::{self, Cursor, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{IntegrityError, Result};

/// What an evidence source looks like on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// A flat byte stream, scanned without filesystem interpretation.
    RawImage,
    /// A directory of files, e.g. a mounted or exported filesystem.
    DirectoryTree,
    /// A text file of normalized artifact records.
    ArtifactRecords,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RawImage => "raw_image",
            Self::DirectoryTree => "directory_tree",
            Self::ArtifactRecords => "artifact_records",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "raw_image" | "raw" | "image" => Ok(Self::RawImage),
            "directory_tree" | "tree" | "dir" => Ok(Self::DirectoryTree),
            "artifact_records" | "records" => Ok(Self::ArtifactRecords),
            other => Err(format!("unknown source kind `{other}`")),
        }
    }
}

/// One regular file inside a directory tree source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEntry {
    /// Path relative to the tree root, `/`-separated.
    pub path: String,
    pub len: u64,
}

#[derive(Debug)]
enum Backing {
    File(PathBuf),
    Memory(Arc<[u8]>),
    Tree { root: PathBuf, entries: Vec<TreeEntry> },
}

#[derive(Debug)]
struct Inner {
    source_id: String,
    kind: SourceKind,
    backing: Backing,
    byte_length: u64,
    entry_count: u64,
    opened_at: DateTime<Utc>,
}

/// Read-only access to one evidence source.
///
/// Handles are cheap to clone and safe to share between threads. The
/// source kind is fixed when the handle is opened.
#[derive(Debug, Clone)]
pub struct EvidenceHandle {
    inner: Arc<Inner>,
}

/// Opens `path` as evidence of the given kind without ever requesting write
/// access.
pub fn open_evidence(path: impl AsRef<Path>, kind: SourceKind) -> Result<EvidenceHandle> {
    let path = path.as_ref();
    let meta = match std::fs::metadata(path) {
        Ok(meta) => meta,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(IntegrityError::NotFound(path.to_path_buf())),
        Err(source) => return Err(IntegrityError::NotReadable { path: path.to_path_buf(), source }),
    };
    let source_id = path.display().to_string();

    let (backing, byte_length, entry_count) = match kind {
        SourceKind::RawImage | SourceKind::ArtifactRecords => {
            if !meta.is_file() {
                return Err(IntegrityError::KindMismatch { path: path.to_path_buf(), expected: "file" });
            }
            let mut file =
                File::open(path).map_err(|source| IntegrityError::NotReadable { path: path.to_path_buf(), source })?;
            let entry_count = if kind == SourceKind::ArtifactRecords {
                let mut text = String::new();
                file.read_to_string(&mut text)
                    .map_err(|source| IntegrityError::NotReadable { path: path.to_path_buf(), source })?;
                count_records(&text)
            } else {
                0
            };
            (Backing::File(path.to_path_buf()), meta.len(), entry_count)
        }
        SourceKind::DirectoryTree => {
            if !meta.is_dir() {
                return Err(IntegrityError::KindMismatch { path: path.to_path_buf(), expected: "directory" });
            }
            let entries = walk_tree(path)?;
            let bytes = entries.iter().map(|e| e.len).sum();
            let count = entries.len() as u64;
            (Backing::Tree { root: path.to_path_buf(), entries }, bytes, count)
        }
    };

    Ok(EvidenceHandle {
        inner: Arc::new(Inner { source_id, kind, backing, byte_length, entry_count, opened_at: Utc::now() }),
    })
}

fn walk_tree(root: &Path) -> Result<Vec<TreeEntry>> {
    let mut entries = Vec::new();
    for entry in WalkDir::new(root).follow_links(false) {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            IntegrityError::NotReadable { path, source: e.into() }
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walkdir stays under root");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        let len = entry
            .metadata()
            .map_err(|e| IntegrityError::NotReadable { path: entry.path().to_path_buf(), source: e.into() })?
            .len();
        entries.push(TreeEntry { path: rel, len });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}

/// Non-blank, non-comment lines of a records file.
fn count_records(text: &str) -> u64 {
    text.lines()
        .filter(|l| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .count() as u64
}

impl EvidenceHandle {
    /// In-memory source, mostly for tests and for buffers handed over by
    /// other tools.
    pub fn from_bytes(source_id: impl Into<String>, kind: SourceKind, bytes: impl Into<Vec<u8>>) -> Self {
        assert!(kind != SourceKind::DirectoryTree, "in-memory sources are flat");
        let bytes: Arc<[u8]> = bytes.into().into();
        let entry_count = match kind {
            SourceKind::ArtifactRecords => count_records(&String::from_utf8_lossy(&bytes)),
            _ => 0,
        };
        Self {
            inner: Arc::new(Inner {
                source_id: source_id.into(),
                kind,
                byte_length: bytes.len() as u64,
                entry_count,
                backing: Backing::Memory(bytes),
                opened_at: Utc::now(),
            }),
        }
    }

    pub fn source_id(&self) -> &str {
        &self.inner.source_id
    }

    pub fn kind(&self) -> SourceKind {
        self.inner.kind
    }

    /// Total bytes: the image length, or the sum of file lengths for a tree.
    pub fn byte_length(&self) -> u64 {
        self.inner.byte_length
    }

    /// Files in a tree, or records in a records source; zero for images.
    pub fn entry_count(&self) -> u64 {
        self.inner.entry_count
    }

    pub fn opened_at(&self) -> DateTime<Utc> {
        self.inner.opened_at
    }

    /// Tree entries in path order; empty for flat sources.
    pub fn entries(&self) -> &[TreeEntry] {
        match &self.inner.backing {
            Backing::Tree { entries, .. } => entries,
            _ => &[],
        }
    }

    /// Reader over a flat source (image or records file).
    pub fn stream(&self) -> Result<Box<dyn Read + Send + '_>> {
        match &self.inner.backing {
            Backing::File(path) => {
                let file = File::open(path)
                    .map_err(|source| IntegrityError::ReadFailure { location: path.display().to_string(), source })?;
                Ok(Box::new(file))
            }
            Backing::Memory(bytes) => Ok(Box::new(Cursor::new(&bytes[..]))),
            Backing::Tree { root, .. } => Err(IntegrityError::KindMismatch { path: root.clone(), expected: "file" }),
        }
    }

    /// Reader over one tree entry, addressed by its relative path.
    pub fn open_entry(&self, rel: &str) -> Result<Box<dyn Read + Send + '_>> {
        match &self.inner.backing {
            Backing::Tree { root, entries } => {
                if !entries.iter().any(|e| e.path == rel) {
                    return Err(IntegrityError::NotFound(root.join(rel)));
                }
                let path = root.join(rel);
                let file = File::open(&path)
                    .map_err(|source| IntegrityError::ReadFailure { location: rel.to_string(), source })?;
                Ok(Box::new(file))
            }
            _ => Err(IntegrityError::KindMismatch { path: PathBuf::from(self.source_id()), expected: "directory" }),
        }
    }

    /// Visits every byte stream of the source: once for a flat source (with
    /// `None` as path) or once per tree entry in path order.
    pub fn for_each_stream<F>(&self, mut visit: F) -> Result<()>
    where
        F: FnMut(Option<&str>, &mut dyn Read) -> Result<()>,
    {
        match &self.inner.backing {
            Backing::Tree { entries, .. } => {
                for entry in entries {
                    let mut reader = self.open_entry(&entry.path)?;
                    visit(Some(&entry.path), &mut reader)?;
                }
                Ok(())
            }
            _ => {
                let mut reader = self.stream()?;
                visit(None, &mut reader)
            }
        }
    }

    /// Reads up to `len` bytes at `offset` of a flat source, or of the
    /// named tree entry.
    pub fn read_at(&self, path: Option<&str>, offset: u64, len: usize) -> Result<Vec<u8>> {
        let location = || format!("{}@{offset}", path.unwrap_or(self.source_id()));
        let mut buf = Vec::with_capacity(len);
        match (&self.inner.backing, path) {
            (Backing::Memory(bytes), None) => {
                let start = (offset as usize).min(bytes.len());
                let end = start.saturating_add(len).min(bytes.len());
                buf.extend_from_slice(&bytes[start..end]);
            }
            (Backing::File(p), None) => {
                let mut file =
                    File::open(p).map_err(|source| IntegrityError::ReadFailure { location: location(), source })?;
                file.seek(SeekFrom::Start(offset))
                    .map_err(|source| IntegrityError::ReadFailure { location: location(), source })?;
                file.take(len as u64)
                    .read_to_end(&mut buf)
                    .map_err(|source| IntegrityError::ReadFailure { location: location(), source })?;
            }
            (Backing::Tree { root, .. }, Some(rel)) => {
                let mut file = File::open(root.join(rel))
                    .map_err(|source| IntegrityError::ReadFailure { location: location(), source })?;
                file.seek(SeekFrom::Start(offset))
                    .map_err(|source| IntegrityError::ReadFailure { location: location(), source })?;
                file.take(len as u64)
                    .read_to_end(&mut buf)
                    .map_err(|source| IntegrityError::ReadFailure { location: location(), source })?;
            }
            _ => {
                return Err(IntegrityError::KindMismatch {
                    path: PathBuf::from(self.source_id()),
                    expected: if path.is_some() { "directory" } else { "file" },
                })
            }
        }
        Ok(buf)
    }

    /// Handles never write. Any attempt is reported as a contract violation.
    pub fn write_at(&self, _path: Option<&str>, offset: u64, _bytes: &[u8]) -> Result<()> {
        Err(IntegrityError::IntegrityViolation(format!(
            "write of evidence {} at offset {offset} refused",
            self.source_id()
        )))
    }
}
