use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{IntegrityError, Result};

/// One audited action. Serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub actor: String,
    pub action: String,
    pub parameters: BTreeMap<String, String>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug)]
struct LogState {
    events: Vec<AuditEvent>,
    sink: Option<File>,
    closed: bool,
}

/// Append-only audit log for one case.
///
/// Appends are serialized; sequence numbers start at 1 and never skip.
#[derive(Debug)]
pub struct AuditLog {
    state: Mutex<LogState>,
}

impl Default for AuditLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self { state: Mutex::new(LogState { events: Vec::new(), sink: None, closed: false }) }
    }

    /// Opens (or creates) a newline-delimited log file, continuing the
    /// sequence of any events already in it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut events = Vec::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(IntegrityError::LogWrite)?;
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let event: AuditEvent = serde_json::from_str(line)
                    .map_err(|e| IntegrityError::LogCorrupt { line: idx + 1, reason: e.to_string() })?;
                let expected = events.len() as u64 + 1;
                if event.seq != expected {
                    return Err(IntegrityError::LogCorrupt {
                        line: idx + 1,
                        reason: format!("sequence {} where {expected} was expected", event.seq),
                    });
                }
                events.push(event);
            }
        }
        let sink = OpenOptions::new().create(true).append(true).open(path).map_err(IntegrityError::LogWrite)?;
        Ok(Self { state: Mutex::new(LogState { events, sink: Some(sink), closed: false }) })
    }

    /// Appends an event and persists it before returning.
    pub fn record<I, K, V>(&self, actor: &str, action: &str, parameters: I) -> Result<AuditEvent>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut state = self.state.lock();
        if state.closed {
            return Err(IntegrityError::LogClosed);
        }
        let event = AuditEvent {
            seq: state.events.len() as u64 + 1,
            actor: actor.to_string(),
            action: action.to_string(),
            parameters: parameters.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            timestamp: Utc::now(),
        };
        if let Some(sink) = state.sink.as_mut() {
            let mut line = serde_json::to_string(&event).expect("audit events serialize");
            line.push('\n');
            sink.write_all(line.as_bytes()).map_err(IntegrityError::LogWrite)?;
            sink.flush().map_err(IntegrityError::LogWrite)?;
        }
        state.events.push(event.clone());
        Ok(event)
    }

    pub fn close(&self) {
        let mut state = self.state.lock();
        state.closed = true;
        state.sink = None;
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().closed
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.state.lock().events.clone()
    }

    pub fn len(&self) -> usize {
        self.state.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_event_is_one() {
        let log = AuditLog::in_memory();
        let e = log.record("m1", "open", [("path", "img.raw")]).unwrap();
        assert_eq!(e.seq, 1);
        assert_eq!(e.parameters["path"], "img.raw");
    }

    #[test]
    fn thousand_appends_without_gaps() {
        let log = AuditLog::in_memory();
        for _ in 0..1000 {
            log.record("m1", "scan", std::iter::empty::<(String, String)>()).unwrap();
        }
        let seqs: Vec<u64> = log.events().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (1..=1000).collect::<Vec<_>>());
    }

    #[test]
    fn closed_log_refuses() {
        let log = AuditLog::in_memory();
        log.record("m1", "open", [("k", "v")]).unwrap();
        log.close();
        assert!(matches!(log.record("m1", "scan", [("k", "v")]), Err(IntegrityError::LogClosed)));
    }

    #[test]
    fn concurrent_appends_stay_dense() {
        let log = std::sync::Arc::new(AuditLog::in_memory());
        let threads: Vec<_> = (0..8)
            .map(|t| {
                let log = log.clone();
                std::thread::spawn(move || {
                    for i in 0..50 {
                        log.record(&format!("m{t}"), "scan", [("i", i.to_string())]).unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        let seqs: Vec<u64> = log.events().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (1..=400).collect::<Vec<_>>());
    }

    #[test]
    fn file_log_resumes_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        {
            let log = AuditLog::open(&path).unwrap();
            log.record("m1", "open", [("a", "1")]).unwrap();
            log.record("m1", "scan", [("a", "2")]).unwrap();
        }
        let log = AuditLog::open(&path).unwrap();
        assert_eq!(log.record("m1", "report", [("a", "3")]).unwrap().seq, 3);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn gaps_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        let log = AuditLog::in_memory();
        let a = log.record("m", "x", [("k", "v")]).unwrap();
        let mut b = log.record("m", "y", [("k", "v")]).unwrap();
        b.seq = 5;
        let text = format!("{}\n{}\n", serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        std::fs::write(&path, text).unwrap();
        assert!(matches!(AuditLog::open(&path), Err(IntegrityError::LogCorrupt { line: 2, .. })));
    }
}
