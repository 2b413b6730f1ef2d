use std::io::Read;

use regex::bytes::{Regex, RegexBuilder};
use regex_automata::hybrid::dfa::{Cache, DFA};
use regex_automata::{Anchored, Input, MatchKind};
use serde::{Deserialize, Serialize};

use super::{read_failure, ArtifactHit, ArtifactKind, Result, ScanError, READ_CHUNK};
use crate::integrity::EvidenceHandle;

/// Bytes held in memory per pattern while streaming. Matches longer than
/// half of this are not guaranteed to be found.
pub const DEFAULT_WINDOW: usize = 1 << 20;

/// Look-behind context kept when the window slides, so that assertions
/// like `\b` see the byte before a match.
const CONTEXT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedPattern {
    pub name: String,
    pub pattern: String,
}

impl NamedPattern {
    pub fn new(name: impl Into<String>, pattern: impl Into<String>) -> Self {
        Self { name: name.into(), pattern: pattern.into() }
    }

    /// Hits from a pattern called `email` are e-mail addresses; everything
    /// else is an identifier pattern.
    pub fn kind(&self) -> ArtifactKind {
        if self.name == "email" {
            ArtifactKind::Email
        } else {
            ArtifactKind::IdPattern
        }
    }

    pub fn scanner_id(&self) -> String {
        format!("pattern:{}", self.name)
    }
}

/// Named byte-oriented regular expressions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSet {
    pub patterns: Vec<NamedPattern>,
}

impl PatternSet {
    pub fn new(patterns: Vec<NamedPattern>) -> Self {
        Self { patterns }
    }

    /// Parses `name<TAB>pattern` lines; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut patterns = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (name, pattern) = line.split_once('\t').ok_or_else(|| ScanError::MalformedPattern {
                name: format!("line {}", idx + 1),
                reason: "expected `name<TAB>pattern`".into(),
            })?;
            patterns.push(NamedPattern::new(name.trim(), pattern));
        }
        Ok(Self { patterns })
    }

    pub fn compile(&self) -> Result<CompiledPatternSet> {
        if self.patterns.is_empty() {
            return Err(ScanError::EmptyPatternSet);
        }
        let patterns = self.patterns.iter().map(CompiledPattern::new).collect::<Result<_>>()?;
        Ok(CompiledPatternSet { patterns })
    }
}

#[derive(Debug)]
struct CompiledPattern {
    spec: NamedPattern,
    /// Finds the leftmost start position of any match.
    leftmost: Regex,
    /// Anchored longest-match search from a given start.
    longest: DFA,
}

impl CompiledPattern {
    fn new(spec: &NamedPattern) -> Result<Self> {
        let malformed = |reason: String| ScanError::MalformedPattern { name: spec.name.clone(), reason };
        if spec.name.is_empty() {
            return Err(malformed("empty name".into()));
        }
        let leftmost = RegexBuilder::new(&spec.pattern).unicode(false).build().map_err(|e| malformed(e.to_string()))?;
        let whole = RegexBuilder::new(&format!("^(?:{})$", spec.pattern))
            .unicode(false)
            .build()
            .map_err(|e| malformed(e.to_string()))?;
        if whole.is_match(b"") {
            return Err(malformed("pattern matches the empty string".into()));
        }
        let longest = DFA::builder()
            .syntax(regex_automata::util::syntax::Config::new().unicode(false).utf8(false))
            .thompson(regex_automata::nfa::thompson::Config::new().utf8(false))
            .configure(DFA::config().match_kind(MatchKind::All))
            .build(&spec.pattern)
            .map_err(|e| malformed(e.to_string()))?;
        Ok(Self { spec: spec.clone(), leftmost, longest })
    }

    /// Leftmost-longest match starting at or after `from`.
    fn find_at(&self, cache: &mut Cache, hay: &[u8], from: usize) -> Result<Option<(usize, usize)>> {
        let mut from = from;
        while let Some(m) = self.leftmost.find_at(hay, from) {
            let start = m.start();
            let input = Input::new(hay).range(start..).anchored(Anchored::Yes);
            let end = self
                .longest
                .try_search_fwd(cache, &input)
                .map_err(|e| ScanError::PatternSearch { name: self.spec.name.clone(), reason: e.to_string() })?
                .map_or(m.end(), |half| half.offset());
            if end > start {
                return Ok(Some((start, end)));
            }
            from = start + 1;
            if from > hay.len() {
                break;
            }
        }
        Ok(None)
    }
}

/// A validated pattern set ready for scanning.
#[derive(Debug)]
pub struct CompiledPatternSet {
    patterns: Vec<CompiledPattern>,
}

impl CompiledPatternSet {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.patterns.iter().map(|p| p.spec.name.as_str())
    }

    /// All leftmost-longest, non-overlapping matches in an in-memory buffer,
    /// per pattern, as `(pattern index, start, end)`.
    pub fn find_all(&self, hay: &[u8]) -> Result<Vec<(usize, usize, usize)>> {
        let mut out = Vec::new();
        for (idx, pattern) in self.patterns.iter().enumerate() {
            let mut cache = pattern.longest.create_cache();
            let mut pos = 0;
            while let Some((s, e)) = pattern.find_at(&mut cache, hay, pos)? {
                out.push((idx, s, e));
                pos = e;
            }
        }
        Ok(out)
    }
}

/// Scans with the default window.
pub fn scan_pattern(handle: &EvidenceHandle, patterns: &CompiledPatternSet) -> Result<Vec<ArtifactHit>> {
    scan_pattern_with_window(handle, patterns, DEFAULT_WINDOW)
}

/// Leftmost-longest non-overlapping matches of each pattern, streamed
/// through a sliding window of `window` bytes. Hits are ordered by
/// pattern (in set order) and then by location.
pub fn scan_pattern_with_window(
    handle: &EvidenceHandle,
    patterns: &CompiledPatternSet,
    window: usize,
) -> Result<Vec<ArtifactHit>> {
    assert!(window >= 2 * CONTEXT + 2, "window too small");
    let mut hits = Vec::new();
    for pattern in &patterns.patterns {
        let scanner_id = pattern.spec.scanner_id();
        let kind = pattern.spec.kind();
        let mut failure = None;
        handle.for_each_stream(|path, reader| {
            let result = stream_matches(pattern, reader, path, window, |offset, bytes| {
                let value = String::from_utf8_lossy(bytes).into_owned();
                hits.push(ArtifactHit::new(
                    kind,
                    value,
                    super::Location::at(path, offset),
                    bytes.len() as u64,
                    &scanner_id,
                ));
            });
            if let Err(e) = result {
                failure.get_or_insert(e);
            }
            Ok(())
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(hits)
}

fn stream_matches(
    pattern: &CompiledPattern,
    reader: &mut dyn Read,
    path: Option<&str>,
    window: usize,
    mut emit: impl FnMut(u64, &[u8]),
) -> Result<()> {
    let mut cache = pattern.longest.create_cache();
    let mut buf: Vec<u8> = Vec::with_capacity(window + CONTEXT);
    let mut chunk = vec![0u8; READ_CHUNK.min(window)];
    // Absolute offset of buf[0].
    let mut base = 0u64;
    // Search resumes here; bytes before it are context only.
    let mut pos = 0usize;
    let mut eof = false;
    loop {
        while buf.len() < pos + window && !eof {
            let want = (pos + window - buf.len()).min(chunk.len());
            match reader.read(&mut chunk[..want]) {
                Ok(0) => eof = true,
                Ok(n) => buf.extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(read_failure(path, base + buf.len() as u64, e)),
            }
        }
        // Matches must start before `limit` unless the stream is exhausted.
        let limit = if eof { buf.len() } else { pos + window / 2 };
        while pos <= buf.len() {
            match pattern.find_at(&mut cache, &buf, pos)? {
                Some((s, e)) if s < limit => {
                    emit(base + s as u64, &buf[s..e]);
                    pos = e;
                }
                _ => break,
            }
        }
        if eof {
            return Ok(());
        }
        let resume = pos.max(limit);
        let drop = resume.saturating_sub(CONTEXT);
        buf.drain(..drop);
        base += drop as u64;
        pos = resume - drop;
    }
}
