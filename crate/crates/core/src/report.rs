//! The Observation Report.
//!
//! A report lists, per assessed item, the searches that ran, every hit
//! (with the operator's flag marker), encryption findings and the
//! absence-of-evidence checklist, followed by free-text notes, threshold
//! decisions and manifest fingerprints. The schema deliberately has no
//! place for conclusions.
//!
//! The structured form is sorted-key JSON. The readable form is markdown
//! and embeds the structured form in a trailing `obsreport` fence, so
//! either can be parsed back.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scanners::{ArtifactHit, EncryptionFindings};
use crate::triage::{
    absence_checklist, Assessment, Basis, ChecklistResult, Decision, EvidenceItem, HitRef, SearchRecord,
    ThresholdDecision,
};

pub const SCHEMA_VERSION: u32 = 1;

/// File extension of structured reports.
pub const STRUCTURED_EXTENSION: &str = "obsreport";

const FENCE_OPEN: &str = "```obsreport\n";
const FENCE_CLOSE: &str = "\n```";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSection {
    pub item_id: String,
    pub description: String,
    pub priority: f64,
    pub searches_run: Vec<SearchRecord>,
    /// Ordered by scanner id, then location.
    pub hits: Vec<ArtifactHit>,
    pub encryption: Option<EncryptionFindings>,
    pub checklist: ChecklistResult,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManifestRef {
    pub item_id: String,
    /// SHA-256 of the manifest text.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationReport {
    pub schema_version: u32,
    pub dft_file_number: String,
    pub case_id: String,
    pub member_id: String,
    /// Ordered by item id.
    pub items: Vec<ItemSection>,
    /// Verbatim.
    pub notes: String,
    pub threshold_decisions: Vec<ThresholdDecision>,
    pub manifests: Vec<ManifestRef>,
    pub created_at: DateTime<Utc>,
}

/// Who wrote the report and under which file number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub dft_file_number: String,
    pub case_id: String,
    pub member_id: String,
}

/// Everything a report is built from.
#[derive(Debug, Clone, Default)]
pub struct ReportInput<'a> {
    pub items: &'a [EvidenceItem<f64>],
    pub assessments: &'a [Assessment],
    /// Item id to manifest fingerprint.
    pub manifests: BTreeMap<String, String>,
    pub flags: BTreeSet<HitRef>,
    pub notes: &'a str,
    pub decisions: &'a [ThresholdDecision],
}

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("item `{0}` has no integrity manifest")]
    MissingManifest(String),
    #[error("flag refers to no hit: {0}")]
    UnknownFlagReference(String),
    #[error("assessment refers to unknown item `{0}`")]
    UnknownItem(String),
    #[error("item `{0}` assessed twice")]
    DuplicateAssessment(String),
    #[error("invalid report: {}", .0.join("; "))]
    InvalidReport(Vec<String>),
    #[error("cannot parse report: {0}")]
    Parse(String),
}

impl ReportError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::MissingManifest(_) => "missing_manifest",
            Self::UnknownFlagReference(_) => "unknown_flag_reference",
            Self::UnknownItem(_) => "unknown_item",
            Self::DuplicateAssessment(_) => "duplicate_assessment",
            Self::InvalidReport(_) => "invalid_report",
            Self::Parse(_) => "parse",
        }
    }
}

fn hit_order(a: &ArtifactHit, b: &ArtifactHit) -> std::cmp::Ordering {
    (&a.scanner_id, &a.location, a.kind, &a.value).cmp(&(&b.scanner_id, &b.location, b.kind, &b.value))
}

/// Assembles the report. Everything but `created_at` and the decision
/// timestamps is a function of the input alone.
pub fn build_report(header: &ReportHeader, input: &ReportInput<'_>) -> Result<ObservationReport, ReportError> {
    let items: BTreeMap<&str, &EvidenceItem<f64>> = input.items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let mut seen = BTreeSet::new();
    let mut sections = Vec::new();
    let mut manifests = Vec::new();
    let mut unmatched_flags = input.flags.clone();

    for assessment in input.assessments {
        let id = assessment.item_id.as_str();
        let item = *items.get(id).ok_or_else(|| ReportError::UnknownItem(id.to_string()))?;
        if !seen.insert(id) {
            return Err(ReportError::DuplicateAssessment(id.to_string()));
        }
        let fingerprint = input.manifests.get(id).ok_or_else(|| ReportError::MissingManifest(id.to_string()))?;
        manifests.push(ManifestRef { item_id: id.to_string(), fingerprint: fingerprint.clone() });

        let mut hits = assessment.hits.clone();
        for hit in &mut hits {
            let r = HitRef::of(id, hit);
            unmatched_flags.remove(&r);
            hit.flagged = input.flags.contains(&r);
        }
        hits.sort_by(hit_order);
        let mut searches = assessment.searches_run.clone();
        searches.sort();
        searches.dedup();

        sections.push(ItemSection {
            item_id: id.to_string(),
            description: item.description.clone(),
            priority: item.priority,
            searches_run: searches,
            hits,
            encryption: assessment.encryption.clone(),
            checklist: absence_checklist(Some(item), assessment.encryption.as_ref(), assessment.reasoning.as_deref()),
        });
    }
    if let Some(flag) = unmatched_flags.into_iter().next() {
        return Err(ReportError::UnknownFlagReference(flag.to_string()));
    }
    sections.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    manifests.sort();

    let mut decisions = input.decisions.to_vec();
    decisions.sort_by(|a, b| a.item_id.cmp(&b.item_id));

    Ok(ObservationReport {
        schema_version: SCHEMA_VERSION,
        dft_file_number: header.dft_file_number.clone(),
        case_id: header.case_id.clone(),
        member_id: header.member_id.clone(),
        items: sections,
        notes: input.notes.to_string(),
        threshold_decisions: decisions,
        manifests,
        created_at: Utc::now(),
    })
}

/// Structural problems; empty for a valid report. Needs no evidence.
pub fn validate_report(report: &ObservationReport) -> Vec<String> {
    let mut errors = Vec::new();
    if report.schema_version != SCHEMA_VERSION {
        errors.push(format!("unsupported schema_version {}", report.schema_version));
    }
    for (name, value) in
        [("dft_file_number", &report.dft_file_number), ("case_id", &report.case_id), ("member_id", &report.member_id)]
    {
        if value.trim().is_empty() {
            errors.push(format!("{name} is empty"));
        }
    }

    let mut hits_by_item: BTreeMap<&str, BTreeSet<HitRef>> = BTreeMap::new();
    for section in &report.items {
        let id = section.item_id.as_str();
        if hits_by_item.contains_key(id) {
            errors.push(format!("item `{id}` appears twice"));
            continue;
        }
        if section.searches_run.is_empty() {
            errors.push(format!("item `{id}` has no searches_run listing"));
        }
        if !(0.0..=1.0).contains(&section.priority) {
            errors.push(format!("item `{id}` has priority {} outside [0, 1]", section.priority));
        }
        let refs = hits_by_item.entry(id).or_default();
        for hit in &section.hits {
            if hit.value.is_empty() {
                errors.push(format!("item `{id}` has a hit with an empty value at {}", hit.location));
            }
            if !section.searches_run.iter().any(|s| s.scanner_id == hit.scanner_id) {
                errors.push(format!("item `{id}` has a hit from `{}`, which is not in searches_run", hit.scanner_id));
            }
            if !refs.insert(HitRef::of(id, hit)) {
                errors.push(format!("item `{id}` lists the hit at {} from `{}` twice", hit.location, hit.scanner_id));
            }
        }
        if section.hits.windows(2).any(|w| hit_order(&w[0], &w[1]).is_gt()) {
            errors.push(format!("item `{id}` hits are out of order"));
        }
    }

    let manifest_items: BTreeSet<&str> = report.manifests.iter().map(|m| m.item_id.as_str()).collect();
    for id in hits_by_item.keys() {
        if !manifest_items.contains(id) {
            errors.push(format!("item `{id}` has no manifest reference"));
        }
    }
    for m in &report.manifests {
        if !hits_by_item.contains_key(m.item_id.as_str()) {
            errors.push(format!("manifest reference to unknown item `{}`", m.item_id));
        }
        if m.fingerprint.len() != 64 || !m.fingerprint.bytes().all(|b| b.is_ascii_hexdigit()) {
            errors.push(format!("manifest fingerprint for `{}` is not a SHA-256 digest", m.item_id));
        }
    }

    for d in &report.threshold_decisions {
        let Some(refs) = hits_by_item.get(d.item_id.as_str()) else {
            errors.push(format!("threshold decision for unknown item `{}`", d.item_id));
            continue;
        };
        if d.basis.is_empty() {
            errors.push(format!("threshold decision for `{}` cites no basis", d.item_id));
        }
        for basis in &d.basis {
            if let Basis::Hit(r) = basis {
                if !refs.contains(r) {
                    errors.push(format!(
                        "threshold decision for `{}` cites a hit that is not in the report: {r}",
                        d.item_id
                    ));
                }
            }
        }
        if d.decision == Decision::DoesNotMeet {
            let section = report.items.iter().find(|s| s.item_id == d.item_id).unwrap();
            let blocking = section.checklist.blocking_rows();
            if !blocking.is_empty() {
                let rows: Vec<_> = blocking.iter().map(|q| q.as_str()).collect();
                errors.push(format!(
                    "item `{}` does_not_meet with checklist rows not performed: {}",
                    d.item_id,
                    rows.join(", ")
                ));
            }
        }
    }
    errors
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Structured,
    Readable,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "structured" => Ok(Self::Structured),
            "readable" => Ok(Self::Readable),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// Rebuilds every object with its keys in byte order.
fn sorted(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

/// Sorted-key, two-space indented JSON with a trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let value = sorted(serde_json::to_value(value).expect("report types always serialize"));
    let mut out = serde_json::to_string_pretty(&value).expect("values always serialize");
    out.push('\n');
    out
}

impl ObservationReport {
    /// The report with every timestamp set to the epoch.
    pub fn core(&self) -> ObservationReport {
        let mut core = self.clone();
        core.created_at = DateTime::<Utc>::UNIX_EPOCH;
        for d in &mut core.threshold_decisions {
            d.decided_at = DateTime::<Utc>::UNIX_EPOCH;
        }
        core
    }

    /// Canonical structured text of [`Self::core`].
    pub fn core_text(&self) -> String {
        canonical_json(&self.core())
    }

    /// Content address of the report core.
    pub fn report_id(&self) -> String {
        hex::encode(Sha256::digest(self.core_text().as_bytes()))
    }

    /// Every hit with its item, flagged first.
    pub fn hits_flagged_first(&self) -> Vec<(&str, &ArtifactHit)> {
        let mut all: Vec<_> =
            self.items.iter().flat_map(|s| s.hits.iter().map(move |h| (s.item_id.as_str(), h))).collect();
        all.sort_by_key(|(_, h)| !h.flagged);
        all
    }
}

pub fn render_report(report: &ObservationReport, format: ReportFormat) -> Result<Vec<u8>, ReportError> {
    let errors = validate_report(report);
    if !errors.is_empty() {
        return Err(ReportError::InvalidReport(errors));
    }
    let structured = canonical_json(report);
    Ok(match format {
        ReportFormat::Structured => structured.into_bytes(),
        ReportFormat::Readable => readable(report, &structured).into_bytes(),
    })
}

/// Accepts either rendering.
pub fn parse_report(bytes: &[u8]) -> Result<ObservationReport, ReportError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ReportError::Parse(e.to_string()))?;
    let json = if text.trim_start().starts_with('{') {
        text
    } else {
        let start =
            text.find(FENCE_OPEN).ok_or_else(|| ReportError::Parse("no structured block".into()))? + FENCE_OPEN.len();
        let end = text[start..]
            .find(FENCE_CLOSE)
            .ok_or_else(|| ReportError::Parse("unterminated structured block".into()))?;
        &text[start..start + end]
    };
    serde_json::from_str(json).map_err(|e| ReportError::Parse(e.to_string()))
}

fn readable(report: &ObservationReport, structured: &str) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "# Observation Report\n");
    let _ = writeln!(w, "- DFT file number: {}", report.dft_file_number);
    let _ = writeln!(w, "- Case: {}", report.case_id);
    let _ = writeln!(w, "- Member: {}", report.member_id);
    let _ = writeln!(w, "- Created: {}", report.created_at.to_rfc3339());

    for section in &report.items {
        let _ = writeln!(w, "\n## Item {}\n", section.item_id);
        if !section.description.is_empty() {
            let _ = writeln!(w, "{}\n", section.description);
        }
        let _ = writeln!(w, "Priority: {:.3}\n", section.priority);
        let _ = writeln!(w, "### Searches run\n");
        for s in &section.searches_run {
            let digest = &s.config_digest[..s.config_digest.len().min(12)];
            match &s.not_applicable {
                None => writeln!(w, "- `{}` (config {digest})", s.scanner_id),
                Some(why) => writeln!(w, "- `{}` (config {digest}), not applicable: {why}", s.scanner_id),
            }
            .ok();
        }
        let _ = writeln!(w, "\n### Hits\n");
        if section.hits.is_empty() {
            let _ = writeln!(w, "None.");
        } else {
            let _ = writeln!(w, "| flag | kind | value | location | scanner | note |");
            let _ = writeln!(w, "|---|---|---|---|---|---|");
            for h in &section.hits {
                let _ = writeln!(
                    w,
                    "| {} | {} | `{}` | {} | {} | {} |",
                    if h.flagged { "*" } else { "" },
                    h.kind,
                    h.value.replace('|', "\\|"),
                    h.location.to_string().replace('|', "\\|"),
                    h.scanner_id,
                    h.note.as_deref().unwrap_or("").replace('|', "\\|"),
                );
            }
        }
        let _ = writeln!(w, "\n### Encryption\n");
        match &section.encryption {
            None => {
                let _ = writeln!(w, "Not checked.");
            }
            Some(f) => {
                let _ = writeln!(w, "Summary: {}", f.summary.as_str());
                for s in &f.fde_signatures {
                    let _ = writeln!(w, "- {} volume header at {}", s.name, s.location);
                }
                for p in &f.suspect_programs {
                    let _ = writeln!(w, "- {} at `{}`", p.name, p.path);
                }
            }
        }
        let _ = writeln!(w, "\n### Checklist\n");
        for row in &section.checklist.rows {
            match &row.detail {
                Some(d) => writeln!(w, "- {}: {} ({d})", row.question, row.answer),
                None => writeln!(w, "- {}: {}", row.question, row.answer),
            }
            .ok();
        }
    }

    let _ = writeln!(w, "\n## Notes\n");
    let _ = writeln!(w, "{}", if report.notes.is_empty() { "None." } else { report.notes.as_str() });

    let _ = writeln!(w, "\n## Threshold decisions\n");
    if report.threshold_decisions.is_empty() {
        let _ = writeln!(w, "None.");
    }
    for d in &report.threshold_decisions {
        let _ = writeln!(w, "- {}: {} by {} at {}", d.item_id, d.decision, d.decided_by, d.decided_at.to_rfc3339());
        for b in &d.basis {
            match b {
                Basis::Hit(r) => writeln!(w, "  - hit {r}"),
                Basis::Checklist(q) => writeln!(w, "  - checklist {q}"),
            }
            .ok();
        }
    }

    let _ = writeln!(w, "\n## Manifests\n");
    for m in &report.manifests {
        let _ = writeln!(w, "- {}: {}", m.item_id, m.fingerprint);
    }

    let _ = writeln!(w, "\n## Structured record\n");
    let _ = writeln!(w, "{FENCE_OPEN}{}{FENCE_CLOSE}", structured.trim_end());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanners::{ArtifactKind, Location};
    use crate::triage::{Answer, DeviceClass, OwnerPrior, OwnerRelation};

    fn hit(scanner: &str, kind: ArtifactKind, value: &str, offset: u64) -> ArtifactHit {
        ArtifactHit {
            kind,
            value: value.into(),
            location: Location::Offset(offset),
            length: value.len() as u64,
            scanner_id: scanner.into(),
            flagged: false,
            note: None,
        }
    }

    fn fixture() -> (Vec<EvidenceItem<f64>>, Vec<Assessment>) {
        let mut item = EvidenceItem::new("pc", OwnerRelation::Suspect, OwnerPrior::None, DeviceClass::Computer);
        item.priority = 0.7;
        let mut a = Assessment::new("pc");
        a.searches_run = vec![
            SearchRecord { scanner_id: "pattern:email".into(), config_digest: "e".repeat(64), not_applicable: None },
            SearchRecord { scanner_id: "cards".into(), config_digest: "c".repeat(64), not_applicable: None },
        ];
        a.hits = vec![
            hit("pattern:email", ArtifactKind::Email, "bob@example.com", 8),
            hit("cards", ArtifactKind::CardNumber, "4111111111111111", 40),
        ];
        a.encryption = Some(EncryptionFindings::none());
        a.reasoning = Some("suspect's own laptop".into());
        (vec![item], vec![a])
    }

    fn header() -> ReportHeader {
        ReportHeader { dft_file_number: "DFT-2015-000001".into(), case_id: "case-1".into(), member_id: "m1".into() }
    }

    fn manifests() -> BTreeMap<String, String> {
        BTreeMap::from([("pc".to_string(), "a".repeat(64))])
    }

    fn build(flags: BTreeSet<HitRef>) -> Result<ObservationReport, ReportError> {
        let (items, assessments) = fixture();
        build_report(
            &header(),
            &ReportInput {
                items: &items,
                assessments: &assessments,
                manifests: manifests(),
                flags,
                notes: "seized at home",
                decisions: &[],
            },
        )
    }

    #[test]
    fn one_of_two_hits_flagged() {
        let flag = HitRef { item_id: "pc".into(), scanner_id: "cards".into(), location: Location::Offset(40) };
        let report = build(BTreeSet::from([flag])).unwrap();
        let hits = &report.items[0].hits;
        assert_eq!(hits.len(), 2);
        assert_eq!(hits.iter().filter(|h| h.flagged).count(), 1);
        assert_eq!(hits[0].scanner_id, "cards");
        assert!(hits[0].flagged);
        assert!(validate_report(&report).is_empty());
        assert_eq!(report.hits_flagged_first()[0].1.value, "4111111111111111");
    }

    #[test]
    fn unknown_flag_and_missing_manifest() {
        let flag = HitRef { item_id: "pc".into(), scanner_id: "cards".into(), location: Location::Offset(41) };
        assert!(matches!(build(BTreeSet::from([flag])), Err(ReportError::UnknownFlagReference(_))));

        let (items, assessments) = fixture();
        let err =
            build_report(&header(), &ReportInput { items: &items, assessments: &assessments, ..Default::default() });
        assert_eq!(err, Err(ReportError::MissingManifest("pc".into())));
    }

    #[test]
    fn empty_case_is_valid() {
        let mut item = EvidenceItem::new("usb", OwnerRelation::Unknown, OwnerPrior::None, DeviceClass::ExternalStorage);
        item.priority = 0.25;
        let mut a = Assessment::new("usb");
        a.searches_run =
            vec![SearchRecord { scanner_id: "encryption".into(), config_digest: "f".repeat(64), not_applicable: None }];
        a.encryption = Some(EncryptionFindings::none());
        a.reasoning = Some("found in desk".into());
        let items = [item];
        let report = build_report(
            &header(),
            &ReportInput {
                items: &items,
                assessments: std::slice::from_ref(&a),
                manifests: BTreeMap::from([("usb".to_string(), "b".repeat(64))]),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.items[0].hits.is_empty());
        assert!(report.items[0].checklist.all_yes());
        assert!(validate_report(&report).is_empty());
    }

    #[test]
    fn cores_are_deterministic() {
        let a = build(BTreeSet::new()).unwrap();
        let b = build(BTreeSet::new()).unwrap();
        assert_eq!(a.core_text(), b.core_text());
        assert_eq!(a.report_id(), b.report_id());
    }

    #[test]
    fn validation_finds_structural_errors() {
        let mut report = build(BTreeSet::new()).unwrap();
        report.items[0].searches_run.clear();
        let errors = validate_report(&report);
        assert!(errors.iter().any(|e| e.contains("`pc` has no searches_run")), "{errors:?}");

        let mut report = build(BTreeSet::new()).unwrap();
        report.threshold_decisions.push(ThresholdDecision {
            item_id: "ghost".into(),
            decision: Decision::Meets,
            basis: vec![],
            decided_by: "m1".into(),
            decided_at: Utc::now(),
        });
        assert!(validate_report(&report).iter().any(|e| e.contains("unknown item `ghost`")));
        assert!(matches!(render_report(&report, ReportFormat::Structured), Err(ReportError::InvalidReport(_))));
    }

    #[test]
    fn renders_round_trip() {
        let mut report = build(BTreeSet::new()).unwrap();
        report.notes = "line one\n```\nline | three".into();
        let s1 = render_report(&report, ReportFormat::Structured).unwrap();
        let s2 = render_report(&report, ReportFormat::Structured).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(parse_report(&s1).unwrap(), report);

        let readable = render_report(&report, ReportFormat::Readable).unwrap();
        let text = String::from_utf8(readable.clone()).unwrap();
        assert_eq!(text.matches("\n## Item ").count(), 1);
        assert_eq!(parse_report(&readable).unwrap(), report);
    }

    #[test]
    fn structured_keys_are_sorted() {
        let text =
            String::from_utf8(render_report(&build(BTreeSet::new()).unwrap(), ReportFormat::Structured).unwrap())
                .unwrap();
        let top: Vec<&str> = text
            .lines()
            .filter(|l| l.starts_with("  \"") && !l.starts_with("   "))
            .map(|l| l.trim().split('"').nth(1).unwrap())
            .collect();
        let mut want = top.clone();
        want.sort();
        assert_eq!(top, want);
        assert_eq!(top.first(), Some(&"case_id"));
    }

    #[test]
    fn does_not_meet_needs_checklist() {
        let mut report = build(BTreeSet::new()).unwrap();
        report.items[0].checklist = absence_checklist(Some(&fixture().0[0]), None, Some("x"));
        assert_eq!(
            report.items[0].checklist.answer(crate::triage::ChecklistQuestion::EncryptionProgramsChecked),
            Answer::NotPerformed
        );
        report.threshold_decisions.push(ThresholdDecision {
            item_id: "pc".into(),
            decision: Decision::DoesNotMeet,
            basis: vec![Basis::Checklist(crate::triage::ChecklistQuestion::EncryptionSignaturesChecked)],
            decided_by: "m1".into(),
            decided_at: Utc::now(),
        });
        assert!(validate_report(&report).iter().any(|e| e.contains("not performed")));
    }
}
