use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ArtifactHit, ArtifactKind, Location, Result, ScanError};
use crate::integrity::{EvidenceHandle, SourceKind};

pub const DEVICE_SCANNER_ID: &str = "devices";

/// A device seen attached to the evidence item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachedDeviceRecord {
    /// Four lowercase hex digits.
    pub vendor_id: String,
    pub product_id: String,
    pub serial: Option<String>,
    pub first_seen: Option<DateTime<Utc>>,
    /// `path:line` for log text, `record:<index>` for normalized records.
    pub source_line: String,
    pub location: Location,
}

impl AttachedDeviceRecord {
    pub fn to_artifact(&self) -> ArtifactHit {
        let mut value = format!("{}:{}", self.vendor_id, self.product_id);
        if let Some(serial) = &self.serial {
            value.push(':');
            value.push_str(serial);
        }
        let mut hit =
            ArtifactHit::new(ArtifactKind::AttachedDevice, value, self.location.clone(), 0, DEVICE_SCANNER_ID);
        hit.note = Some(format!("from {}", self.source_line));
        hit
    }
}

struct LogPatterns {
    ids: Regex,
    bus: Regex,
    serial: Regex,
    stamp: Regex,
}

fn log_patterns() -> &'static LogPatterns {
    static PATTERNS: OnceLock<LogPatterns> = OnceLock::new();
    PATTERNS.get_or_init(|| LogPatterns {
        ids: Regex::new(r"idVendor=([0-9a-fA-F]{4}), idProduct=([0-9a-fA-F]{4})").unwrap(),
        bus: Regex::new(r"\busb (\d+-[\d.]+):").unwrap(),
        serial: Regex::new(r"\busb (\d+-[\d.]+): SerialNumber: (\S+)").unwrap(),
        stamp: Regex::new(r"^(\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:?\d{2}))").unwrap(),
    })
}

fn parse_stamp(text: &str) -> Option<DateTime<Utc>> {
    let text = text.replacen(' ', "T", 1);
    DateTime::parse_from_rfc3339(&text)
        .or_else(|_| DateTime::parse_from_str(&text, "%Y-%m-%dT%H:%M:%S%.f%z"))
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

fn is_hex4(s: &str) -> bool {
    s.len() == 4 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

/// Device history from kernel-style log text (every file of a tree) or
/// from a normalized records source, in order of appearance.
///
/// Records are `vendor<TAB>product<TAB>serial<TAB>first_seen` with `-` for
/// absent fields; `first_seen` is RFC 3339.
pub fn extract_attached_devices(handle: &EvidenceHandle) -> Result<Vec<AttachedDeviceRecord>> {
    match handle.kind() {
        SourceKind::DirectoryTree => {
            let mut out = Vec::new();
            for entry in handle.entries() {
                let reader = handle.open_entry(&entry.path)?;
                scan_log(&entry.path, reader, &mut out)?;
            }
            Ok(out)
        }
        SourceKind::ArtifactRecords => parse_records(handle),
        SourceKind::RawImage => Err(ScanError::UnsupportedSource { scanner: DEVICE_SCANNER_ID, kind: handle.kind() }),
    }
}

fn scan_log(path: &str, reader: impl std::io::Read, out: &mut Vec<AttachedDeviceRecord>) -> Result<()> {
    let pats = log_patterns();
    let mut reader = BufReader::new(reader);
    // Bus port -> index of the latest record seen on it, to attach serials.
    let mut by_port: HashMap<String, usize> = HashMap::new();
    let mut raw = Vec::new();
    let mut offset = 0u64;
    let mut line_no = 0u64;
    loop {
        raw.clear();
        let n = reader.read_until(b'\n', &mut raw).map_err(|e| super::read_failure(Some(path), offset, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line = String::from_utf8_lossy(&raw);
        if let Some(caps) = pats.ids.captures(&line) {
            let first_seen = pats.stamp.captures(&line).and_then(|c| parse_stamp(&c[1]));
            let port = pats.bus.captures(&line).map(|c| c[1].to_string());
            if let Some(port) = port {
                by_port.insert(port, out.len());
            }
            out.push(AttachedDeviceRecord {
                vendor_id: caps[1].to_ascii_lowercase(),
                product_id: caps[2].to_ascii_lowercase(),
                serial: None,
                first_seen,
                source_line: format!("{path}:{line_no}"),
                location: Location::File {
                    path: path.to_string(),
                    offset: offset + caps.get(0).unwrap().start() as u64,
                },
            });
        } else if let Some(caps) = pats.serial.captures(&line) {
            if let Some(&idx) = by_port.get(&caps[1]) {
                out[idx].serial.get_or_insert_with(|| caps[2].to_string());
            }
        }
        offset += n as u64;
    }
    Ok(())
}

fn parse_records(handle: &EvidenceHandle) -> Result<Vec<AttachedDeviceRecord>> {
    let mut text = String::new();
    std::io::Read::read_to_string(&mut handle.stream()?, &mut text).map_err(|e| super::read_failure(None, 0, e))?;
    let mut out = Vec::new();
    let mut index = 0u64;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| ScanError::MalformedRecord { index, reason: reason.to_string() };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        if !is_hex4(fields[0]) || !is_hex4(fields[1]) {
            return Err(bad("vendor and product ids must be 4 hex digits"));
        }
        let optional = |f: &str| if f == "-" || f.is_empty() { None } else { Some(f.to_string()) };
        let first_seen = match optional(fields[3]) {
            Some(stamp) => Some(parse_stamp(&stamp).ok_or_else(|| bad("first_seen is not RFC 3339"))?),
            None => None,
        };
        out.push(AttachedDeviceRecord {
            vendor_id: fields[0].to_ascii_lowercase(),
            product_id: fields[1].to_ascii_lowercase(),
            serial: optional(fields[2]),
            first_seen,
            source_line: format!("record:{index}"),
            location: Location::Record(index),
        });
        index += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrity::open_evidence;

    fn records(text: &str) -> EvidenceHandle {
        EvidenceHandle::from_bytes("rec", SourceKind::ArtifactRecords, text.as_bytes().to_vec())
    }

    #[test]
    fn normalized_records_pass_through() {
        let got = extract_attached_devices(&records(
            "# vendor\tproduct\tserial\tfirst_seen\n0781\t5567\t4C530001\t2015-06-01T10:00:00Z\n046D\tC52B\t-\t-\n",
        ))
        .unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].vendor_id, "0781");
        assert_eq!(got[0].product_id, "5567");
        assert_eq!(got[0].serial.as_deref(), Some("4C530001"));
        assert_eq!(got[0].first_seen.unwrap().to_rfc3339(), "2015-06-01T10:00:00+00:00");
        assert_eq!(got[1].vendor_id, "046d");
        assert_eq!(got[1].serial, None);
        assert_eq!(got[1].location, Location::Record(1));
    }

    #[test]
    fn bad_record_is_reported_by_index() {
        let err = extract_attached_devices(&records("0781\t5567\t-\t-\nzz81\t5567\t-\t-\n")).unwrap_err();
        assert!(matches!(err, ScanError::MalformedRecord { index: 1, .. }));
    }

    #[test]
    fn kernel_log_lines() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("var/log")).unwrap();
        let log = "2015-03-02T09:14:07+0000 host kernel: usb 1-1: new high-speed USB device number 2 using ehci-pci\n\
                   2015-03-02T09:14:07+0000 host kernel: usb 1-1: New USB device found, idVendor=0781, idProduct=5567\n\
                   2015-03-02T09:14:07+0000 host kernel: usb 1-1: SerialNumber: 20043512\n\
                   Mar  3 11:00:00 host kernel: usb 2-1.4: New USB device found, idVendor=18d1, idProduct=4ee7\n";
        std::fs::write(dir.path().join("var/log/kern.log"), log).unwrap();
        let handle = open_evidence(dir.path(), SourceKind::DirectoryTree).unwrap();
        let got = extract_attached_devices(&handle).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].vendor_id.as_str(), got[0].product_id.as_str()), ("0781", "5567"));
        assert_eq!(got[0].serial.as_deref(), Some("20043512"));
        assert_eq!(got[0].source_line, "var/log/kern.log:2");
        assert!(got[0].first_seen.is_some());
        assert_eq!(got[1].first_seen, None);
        assert_eq!(got[1].vendor_id, "18d1");

        let (path, offset) = got[0].location.byte_position().unwrap();
        let bytes = handle.read_at(path, offset, 9).unwrap();
        assert_eq!(bytes, b"idVendor=");
    }

    #[test]
    fn single_log_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("syslog"), "New USB device found, idVendor=0781, idProduct=5567\n").unwrap();
        let handle = open_evidence(dir.path(), SourceKind::DirectoryTree).unwrap();
        let got = extract_attached_devices(&handle).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].vendor_id, "0781");
        assert_eq!(got[0].product_id, "5567");
    }

    #[test]
    fn empty_sources() {
        assert!(extract_attached_devices(&records("")).unwrap().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let handle = open_evidence(dir.path(), SourceKind::DirectoryTree).unwrap();
        assert!(extract_attached_devices(&handle).unwrap().is_empty());
    }
}
