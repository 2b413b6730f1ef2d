use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::luhn::luhn_valid;
use super::{read_failure, ArtifactHit, ArtifactKind, Location, Result, READ_CHUNK};
use crate::integrity::EvidenceHandle;

pub const CARD_SCANNER_ID: &str = "cards";

const MIN_PAN: usize = 13;
const MAX_PAN: usize = 19;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardOccurrence {
    pub location: Location,
    /// Matched bytes including separators.
    pub length: u64,
}

/// A Luhn-valid card number with every place it was seen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardHit {
    pub pan: String,
    /// Issuer identification prefix (first six digits).
    pub bank_code: String,
    /// In source order; never empty.
    pub occurrences: Vec<CardOccurrence>,
}

impl CardHit {
    pub fn first_location(&self) -> &Location {
        &self.occurrences[0].location
    }

    /// One artifact hit at the first occurrence; repeats are noted.
    pub fn to_artifact(&self) -> ArtifactHit {
        let first = &self.occurrences[0];
        let mut hit = ArtifactHit::new(
            ArtifactKind::CardNumber,
            self.pan.clone(),
            first.location.clone(),
            first.length,
            CARD_SCANNER_ID,
        );
        if self.occurrences.len() > 1 {
            hit.note = Some(format!("seen {} times; bank code {}", self.occurrences.len(), self.bank_code));
        } else {
            hit.note = Some(format!("bank code {}", self.bank_code));
        }
        hit
    }
}

/// Incremental recognizer for digit runs with single space or hyphen
/// separators. Holds at most one run, so memory is constant.
#[derive(Debug, Default)]
struct RunTracker {
    active: bool,
    after_separator: bool,
    start: u64,
    end: u64,
    count: usize,
    digits: [u8; MAX_PAN],
}

impl RunTracker {
    fn push(&mut self, offset: u64, byte: u8, emit: &mut impl FnMut(&[u8], u64, u64)) {
        match byte {
            b'0'..=b'9' => {
                if !self.active {
                    self.active = true;
                    self.start = offset;
                    self.count = 0;
                }
                if self.count < MAX_PAN {
                    self.digits[self.count] = byte;
                }
                self.count += 1;
                self.end = offset + 1;
                self.after_separator = false;
            }
            b' ' | b'-' if self.active && !self.after_separator => self.after_separator = true,
            _ => self.finish(emit),
        }
    }

    fn finish(&mut self, emit: &mut impl FnMut(&[u8], u64, u64)) {
        if self.active && (MIN_PAN..=MAX_PAN).contains(&self.count) && luhn_valid(&self.digits[..self.count]) {
            emit(&self.digits[..self.count], self.start, self.end - self.start);
        }
        self.active = false;
        self.after_separator = false;
        self.count = 0;
    }
}

/// Every maximal digit run in `reader`, as `(digits, offset, length)`,
/// that is 13 to 19 digits long and passes the Luhn check.
pub(crate) fn scan_card_runs(
    reader: &mut dyn Read,
    path: Option<&str>,
    mut emit: impl FnMut(&[u8], u64, u64),
) -> Result<()> {
    let mut tracker = RunTracker::default();
    let mut buf = vec![0u8; READ_CHUNK];
    let mut offset = 0u64;
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(read_failure(path, offset, e)),
        };
        for &b in &buf[..n] {
            tracker.push(offset, b, &mut emit);
            offset += 1;
        }
    }
    tracker.finish(&mut emit);
    Ok(())
}

/// Extracts Luhn-valid card numbers, collapsing repeats of the same number.
/// Output is ordered by first location.
pub fn extract_card_numbers(handle: &EvidenceHandle) -> Result<Vec<CardHit>> {
    let mut hits: Vec<CardHit> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut scan_error = None;
    handle.for_each_stream(|path, reader| {
        let result = scan_card_runs(reader, path, |digits, offset, length| {
            let pan = String::from_utf8(digits.to_vec()).expect("ascii digits");
            let occurrence = CardOccurrence { location: Location::at(path, offset), length };
            match index.get(&pan) {
                Some(&i) => hits[i].occurrences.push(occurrence),
                None => {
                    index.insert(pan.clone(), hits.len());
                    hits.push(CardHit { bank_code: pan[..6].to_string(), pan, occurrences: vec![occurrence] });
                }
            }
        });
        if let Err(e) = result {
            scan_error = Some(e);
        }
        Ok(())
    })?;
    if let Some(e) = scan_error {
        return Err(e);
    }
    hits.sort_by(|a, b| a.first_location().cmp(b.first_location()));
    Ok(hits)
}

/// Card hits sharing one bank code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankGroup {
    pub bank_code: String,
    pub hits: Vec<CardHit>,
}

/// Groups hits by bank code, keys ascending, hits by location within a
/// group.
pub fn sort_by_bank_code(hits: Vec<CardHit>) -> Vec<BankGroup> {
    let mut groups: BTreeMap<String, Vec<CardHit>> = BTreeMap::new();
    for hit in hits {
        groups.entry(hit.bank_code.clone()).or_default().push(hit);
    }
    groups
        .into_iter()
        .map(|(bank_code, mut hits)| {
            hits.sort_by(|a, b| a.first_location().cmp(b.first_location()).then_with(|| a.pan.cmp(&b.pan)));
            BankGroup { bank_code, hits }
        })
        .collect()
}
