//! Case workspaces.
//!
//! A workspace is a directory holding one case and everything derived from
//! it:
//!
//! ```text
//! case.toml          case description, evidence paths made absolute
//! audit.log          append-only audit events, one JSON object per line
//! manifests/<item>.manifest
//! hits/<item>.json   assessment (searches run, hits, encryption findings)
//! hits/<item>.tsv    hits as delimited text
//! hits/<item>.cards.tsv   card numbers grouped by bank code
//! ranking.tsv        evidence ranking after attachment propagation
//! threshold/<item>.json   threshold decision
//! flags.tsv          hit references flagged by the member
//! notes.txt          notes entered at finalization
//! report.obsreport   structured Observation Report
//! report.md          readable Observation Report
//! .lock              present while a process has the workspace open
//! ```
//!
//! Every operation on evidence, triage or the report appends exactly one
//! audit event, whether it succeeds or fails. Rerunning an operation on an
//! unchanged workspace rewrites its output files with identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity::{
    compute_manifest, open_evidence, verify_manifest, AuditEvent, AuditLog, EvidenceHandle, HashManifest,
    IntegrityError, SourceKind, VerificationResult,
};
use crate::profiles::{load_profile, ProfileError, ProfileSource, ScannerSpec, SearchProfile};
use crate::report::{
    build_report, canonical_json, parse_report, render_report, validate_report, ObservationReport, ReportError,
    ReportFormat, ReportHeader, ReportInput,
};
use crate::scanners::{
    detect_encryption_indicators, extract_attached_devices, extract_card_numbers, inventory_media_files, scan_pattern,
    sort_by_bank_code, ArtifactHit, EncryptionFindings, PatternSet, ProgramList, ScanError,
};
use crate::triage::{
    absence_checklist, evaluate_threshold, propagate_attachment_priority, rank_evidence, Assessment, Basis,
    ChecklistQuestion, ChecklistResult, Decision, DeviceClass, EvidenceItem, HitRef, OwnerPrior, OwnerRelation,
    SearchRecord, ThresholdDecision, TriageConfig, TriageError,
};

pub const CASE_FILE: &str = "case.toml";
pub const AUDIT_FILE: &str = "audit.log";
pub const MANIFEST_DIR: &str = "manifests";
pub const HITS_DIR: &str = "hits";
pub const RANKING_FILE: &str = "ranking.tsv";
pub const THRESHOLD_DIR: &str = "threshold";
pub const FLAGS_FILE: &str = "flags.tsv";
pub const NOTES_FILE: &str = "notes.txt";
pub const REPORT_FILE: &str = "report.obsreport";
pub const READABLE_FILE: &str = "report.md";
pub const LOCK_FILE: &str = ".lock";

/// One evidence item as described by the investigator and member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseItem {
    pub item_id: String,
    #[serde(default)]
    pub description: String,
    /// Relative paths resolve against the case file's directory.
    pub path: PathBuf,
    pub kind: SourceKind,
    pub owner_relation: OwnerRelation,
    pub owner_prior: OwnerPrior,
    pub device_class: DeviceClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attached_to: Option<String>,
    /// Why the item is expected to hold artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

impl CaseItem {
    fn evidence_item(&self) -> EvidenceItem<f64> {
        let mut item =
            EvidenceItem::new(self.item_id.clone(), self.owner_relation, self.owner_prior, self.device_class);
        item.description = self.description.clone();
        item.attached_to = self.attached_to.clone();
        item
    }
}

/// Contents of `case.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDescription {
    pub case_id: String,
    /// May be left out of the file and supplied when the case is opened.
    #[serde(default)]
    pub dft_file_number: String,
    #[serde(default)]
    pub member_id: String,
    #[serde(default)]
    pub investigation_id: String,
    /// Built-in crime type or path to a profile file.
    pub profile: String,
    #[serde(default)]
    pub notes: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triage: Option<TriageConfig<f64>>,
    #[serde(default)]
    pub items: Vec<CaseItem>,
}

impl CaseDescription {
    pub fn parse(text: &str) -> Result<Self> {
        let case: Self = toml::from_str(text).map_err(|e| SessionError::InvalidCase(e.to_string()))?;
        case.check()?;
        Ok(case)
    }

    /// Reads a case file and resolves item paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let case = Self::read(path)?;
        case.check()?;
        Ok(case)
    }

    /// As [`Self::load`] without the final check, so that a caller can
    /// fill in the file number or member first.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        let mut case: Self = toml::from_str(&text).map_err(|e| SessionError::InvalidCase(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for item in &mut case.items {
            if item.path.is_relative() {
                item.path = base.join(&item.path);
            }
            item.path = item.path.canonicalize().map_err(|e| io(&item.path, e))?;
        }
        let profile = Path::new(&case.profile);
        if profile.is_relative() && base.join(profile).is_file() {
            case.profile = base.join(profile).canonicalize().map_err(|e| io(profile, e))?.display().to_string();
        }
        Ok(case)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("case descriptions serialize")
    }

    pub fn check(&self) -> Result<()> {
        let mut errors = Vec::new();
        for (name, v) in
            [("case_id", &self.case_id), ("dft_file_number", &self.dft_file_number), ("member_id", &self.member_id)]
        {
            if v.trim().is_empty() {
                errors.push(format!("{name} is empty"));
            }
        }
        let mut ids = BTreeSet::new();
        for item in &self.items {
            let id = &item.item_id;
            if id.is_empty() || id.contains(['/', '\\', '|', '\t', '\n']) || id.starts_with('.') {
                errors.push(format!("item id `{id}` is not usable as a file name"));
            }
            if !ids.insert(id.as_str()) {
                errors.push(format!("item id `{id}` repeated"));
            }
        }
        if let Some(t) = &self.triage {
            errors.extend(t.check());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(SessionError::InvalidCase(errors.join("; ")))
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid case description: {0}")]
    InvalidCase(String),
    #[error("workspace {0} is held by process {1}")]
    Locked(PathBuf, String),
    #[error("workspace already holds a different case; refusing to overwrite {0}")]
    CaseMismatch(PathBuf),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("`{step}` has not been run{}", .item.as_ref().map(|i| format!(" for `{i}`")).unwrap_or_default())]
    MissingStep { step: &'static str, item: Option<String> },
    #[error("no hit matches {0}")]
    StaleHitReference(String),
    #[error("manifest for `{item}` no longer matches the evidence ({mismatches} mismatched entries)")]
    ManifestChanged { item: String, mismatches: usize },
    #[error("decision `{decision}` for `{item}` is not supported: {reason}")]
    UnsupportedDecision { item: String, decision: Decision, reason: String },
    #[error("checklist for `{item}` incomplete: {}", .rows.join(", "))]
    ChecklistIncomplete { item: String, rows: Vec<String> },
    #[error(transparent)]
    Integrity(#[from] IntegrityError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl SessionError {
    /// Module the error originates from.
    pub fn module(&self) -> &'static str {
        match self {
            Self::Integrity(_) => "integrity",
            Self::Scan(ScanError::Integrity(_)) => "integrity",
            Self::Scan(_) => "scanners",
            Self::Profile(_) => "profiles",
            Self::Triage(_) => "triage",
            Self::Report(_) => "report",
            _ => "workspace",
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::InvalidCase(_) => "invalid_case",
            Self::Locked(..) => "locked",
            Self::CaseMismatch(_) => "case_mismatch",
            Self::UnknownItem(_) => "unknown_item",
            Self::MissingStep { .. } => "missing_step",
            Self::StaleHitReference(_) => "stale_hit_reference",
            Self::ManifestChanged { .. } => "manifest_changed",
            Self::UnsupportedDecision { .. } => "unsupported_decision",
            Self::ChecklistIncomplete { .. } => "checklist_incomplete",
            Self::Integrity(e) => e.code(),
            Self::Scan(e) => e.code(),
            Self::Profile(e) => e.code(),
            Self::Triage(e) => e.code(),
            Self::Report(e) => e.code(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SessionError>;

fn io(path: &Path, source: std::io::Error) -> SessionError {
    SessionError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(text)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io(path, e)),
    }
}

/// Escapes tabs, newlines and backslashes for delimited output.
fn cell(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n").replace('\r', "\\r")
}

struct WorkspaceLock {
    path: PathBuf,
}

impl WorkspaceLock {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| io(&path, e))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default().trim().to_string();
                    let alive = !holder.is_empty() && Path::new("/proc").join(&holder).exists();
                    if alive || !Path::new("/proc/self").exists() {
                        return Err(SessionError::Locked(root.to_path_buf(), holder));
                    }
                    // Left behind by a process that no longer exists.
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(io(&path, e)),
            }
        }
        Err(SessionError::Locked(root.to_path_buf(), String::new()))
    }
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// An item with its hits, flags applied, as shown to the member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub description: String,
    pub priority: f64,
    pub attached_to: Option<String>,
    pub scanned: bool,
    /// Flagged hits first, then hits the profile marks salient.
    pub hits: Vec<HitView>,
    pub encryption: Option<EncryptionFindings>,
    pub checklist: ChecklistResult,
    pub decision: Option<ThresholdDecision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitView {
    pub reference: String,
    pub salient: bool,
    pub hit: ArtifactHit,
}

/// Current state of a case, items in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub case_id: String,
    pub dft_file_number: String,
    pub member_id: String,
    pub profile: String,
    pub items: Vec<ItemView>,
    pub notes: String,
    pub report_id: Option<String>,
}

/// An open case workspace. Holds the workspace lock until dropped.
pub struct Workspace {
    root: PathBuf,
    case: CaseDescription,
    profile: SearchProfile,
    programs: ProgramList,
    triage: TriageConfig<f64>,
    audit: AuditLog,
    _lock: WorkspaceLock,
}

impl Workspace {
    /// Creates a workspace for `case`, or opens it if it already holds the
    /// same case.
    pub fn create(root: &Path, case: &CaseDescription) -> Result<Self> {
        case.check()?;
        fs::create_dir_all(root).map_err(|e| io(root, e))?;
        let path = root.join(CASE_FILE);
        let text = case.to_toml();
        match read_optional(&path)? {
            Some(existing) if existing != text => return Err(SessionError::CaseMismatch(path)),
            Some(_) => {}
            None => write_file(&path, text.as_bytes())?,
        }
        Self::open(root)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(CASE_FILE);
        let text = read_optional(&path)?.ok_or_else(|| io(&path, std::io::ErrorKind::NotFound.into()))?;
        let case = CaseDescription::parse(&text)?;
        let lock = WorkspaceLock::acquire(root)?;
        let profile = load_profile(&ProfileSource::resolve(&case.profile)?)?;
        let audit = AuditLog::open(root.join(AUDIT_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            triage: case.triage.unwrap_or_default(),
            case,
            profile,
            programs: ProgramList::default(),
            audit,
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn case(&self) -> &CaseDescription {
        &self.case
    }

    pub fn profile(&self) -> &SearchProfile {
        &self.profile
    }

    pub fn audit_events(&self) -> Vec<AuditEvent> {
        self.audit.events()
    }

    fn item(&self, item_id: &str) -> Result<&CaseItem> {
        self.case.items.iter().find(|i| i.item_id == item_id).ok_or_else(|| SessionError::UnknownItem(item_id.into()))
    }

    fn manifest_path(&self, item_id: &str) -> PathBuf {
        self.root.join(MANIFEST_DIR).join(format!("{item_id}.manifest"))
    }

    fn assessment_path(&self, item_id: &str) -> PathBuf {
        self.root.join(HITS_DIR).join(format!("{item_id}.json"))
    }

    fn decision_path(&self, item_id: &str) -> PathBuf {
        self.root.join(THRESHOLD_DIR).join(format!("{item_id}.json"))
    }

    /// Runs `op` and records one audit event describing it and its outcome.
    fn audited<T>(
        &self,
        action: &str,
        mut params: BTreeMap<String, String>,
        op: impl FnOnce(&mut BTreeMap<String, String>) -> Result<T>,
    ) -> Result<T> {
        let result = op(&mut params);
        params.insert(
            "outcome".into(),
            match &result {
                Ok(_) => "ok".into(),
                Err(e) => format!("{}.{}", e.module(), e.code()),
            },
        );
        self.audit.record(&self.case.member_id, action, params)?;
        result
    }

    fn params(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn handle(&self, item: &CaseItem) -> Result<EvidenceHandle> {
        Ok(open_evidence(&item.path, item.kind)?)
    }

    /// Opens an item read-only and records its manifest. If a manifest is
    /// already on file the evidence must still match it.
    pub fn open_item(&self, item_id: &str) -> Result<HashManifest> {
        let item = self.item(item_id)?;
        self.audited("integrity.open_evidence", Self::params(&[("item", item_id)]), |p| {
            let handle = self.handle(item)?;
            let manifest = compute_manifest(&handle)?;
            p.insert("kind".into(), item.kind.to_string());
            p.insert("bytes".into(), handle.byte_length().to_string());
            p.insert("fingerprint".into(), manifest.fingerprint());
            let path = self.manifest_path(item_id);
            if let Some(text) = read_optional(&path)? {
                let stored = HashManifest::parse(&text)?;
                if let VerificationResult::Mismatches(m) = verify_manifest(&handle, &stored)? {
                    return Err(SessionError::ManifestChanged { item: item_id.into(), mismatches: m.len() });
                }
            }
            write_file(&path, manifest.to_text().as_bytes())?;
            Ok(manifest)
        })
    }

    pub fn open_all(&self) -> Result<Vec<(String, HashManifest)>> {
        self.case.items.iter().map(|i| Ok((i.item_id.clone(), self.open_item(&i.item_id)?))).collect()
    }

    fn stored_manifest(&self, item_id: &str) -> Result<HashManifest> {
        let text = read_optional(&self.manifest_path(item_id))?
            .ok_or_else(|| SessionError::MissingStep { step: "open", item: Some(item_id.into()) })?;
        Ok(HashManifest::parse(&text)?)
    }

    /// Re-hashes every opened item against its stored manifest.
    pub fn verify(&self) -> Result<Vec<(String, VerificationResult)>> {
        let mut out = Vec::new();
        for item in &self.case.items {
            let id = item.item_id.as_str();
            let result = self.audited("integrity.verify_manifest", Self::params(&[("item", id)]), |p| {
                let manifest = self.stored_manifest(id)?;
                let result = verify_manifest(&self.handle(item)?, &manifest)?;
                p.insert("mismatches".into(), result.mismatches().len().to_string());
                Ok(result)
            })?;
            out.push((id.to_string(), result));
        }
        Ok(out)
    }

    /// Runs one scanner; one audit event.
    fn run_scanner(
        &self,
        item: &CaseItem,
        handle: &EvidenceHandle,
        spec: &ScannerSpec,
        assessment: &mut Assessment,
        cards: &mut Option<String>,
    ) -> Result<()> {
        let action = match spec {
            ScannerSpec::Cards => "scanners.extract_card_numbers",
            ScannerSpec::Media => "scanners.inventory_media_files",
            ScannerSpec::Encryption => "scanners.detect_encryption_indicators",
            ScannerSpec::Devices => "scanners.extract_attached_devices",
            ScannerSpec::Pattern(_) => "scanners.scan_pattern",
        };
        let id = spec.id();
        let digest = spec.config_digest();
        let params = Self::params(&[("item", &item.item_id), ("scanner", &id), ("config_digest", &digest)]);
        self.audited(action, params, |p| {
            let outcome: std::result::Result<Vec<ArtifactHit>, ScanError> = match spec {
                ScannerSpec::Cards => extract_card_numbers(handle).map(|found| {
                    *cards = Some(cards_tsv(&found));
                    found.iter().map(|c| c.to_artifact()).collect()
                }),
                ScannerSpec::Media => inventory_media_files(handle),
                ScannerSpec::Encryption => detect_encryption_indicators(handle, &self.programs).map(|f| {
                    let hits = f.to_artifacts();
                    p.insert("summary".into(), f.summary.as_str().into());
                    assessment.encryption = Some(f);
                    hits
                }),
                ScannerSpec::Devices => {
                    extract_attached_devices(handle).map(|d| d.iter().map(|r| r.to_artifact()).collect())
                }
                ScannerSpec::Pattern(named) => {
                    PatternSet::new(vec![named.clone()]).compile().and_then(|set| scan_pattern(handle, &set))
                }
            };
            let mut record =
                SearchRecord { scanner_id: id.clone(), config_digest: digest.clone(), not_applicable: None };
            match outcome {
                Ok(hits) => {
                    p.insert("hits".into(), hits.len().to_string());
                    assessment.hits.extend(hits);
                }
                Err(ScanError::UnsupportedSource { kind, .. }) => {
                    let why = format!("{kind} source");
                    p.insert("not_applicable".into(), why.clone());
                    record.not_applicable = Some(why);
                }
                Err(e) => return Err(e.into()),
            }
            assessment.searches_run.push(record);
            Ok(())
        })
    }

    /// Runs every scanner of the profile over an opened item and stores the
    /// assessment.
    pub fn scan_item(&self, item_id: &str) -> Result<Assessment> {
        let item = self.item(item_id)?;
        self.stored_manifest(item_id)?;
        let handle = self.handle(item)?;
        let mut assessment = Assessment::new(item_id);
        assessment.reasoning = item.reasoning.clone();
        let mut cards = None;
        for spec in &self.profile.scanners {
            self.run_scanner(item, &handle, spec, &mut assessment, &mut cards)?;
        }
        write_file(&self.assessment_path(item_id), canonical_json(&assessment).as_bytes())?;
        write_file(&self.root.join(HITS_DIR).join(format!("{item_id}.tsv")), hits_tsv(&assessment.hits).as_bytes())?;
        if let Some(text) = cards {
            write_file(&self.root.join(HITS_DIR).join(format!("{item_id}.cards.tsv")), text.as_bytes())?;
        }
        Ok(assessment)
    }

    pub fn scan_all(&self) -> Result<Vec<Assessment>> {
        self.case.items.iter().map(|i| self.scan_item(&i.item_id)).collect()
    }

    pub fn assessment(&self, item_id: &str) -> Result<Assessment> {
        self.item(item_id)?;
        let text = read_optional(&self.assessment_path(item_id))?
            .ok_or_else(|| SessionError::MissingStep { step: "scan", item: Some(item_id.into()) })?;
        serde_json::from_str(&text).map_err(|e| io(&self.assessment_path(item_id), std::io::Error::other(e)))
    }

    fn assessments(&self) -> Result<Vec<Assessment>> {
        let mut out = Vec::new();
        for item in &self.case.items {
            match self.assessment(&item.item_id) {
                Ok(a) => out.push(a),
                Err(SessionError::MissingStep { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Scores, ranks and propagates attachment priority; two audit events.
    pub fn rank(&self) -> Result<Vec<EvidenceItem<f64>>> {
        let items: Vec<_> = self.case.items.iter().map(CaseItem::evidence_item).collect();
        let count = items.len().to_string();
        let ranked = self.audited("triage.rank_evidence", Self::params(&[("items", &count)]), |_| {
            Ok(rank_evidence(items, &self.triage)?)
        })?;
        let ranked = self.audited("triage.propagate_attachment_priority", Self::params(&[("items", &count)]), |p| {
            let before: BTreeMap<String, f64> = ranked.iter().map(|i| (i.item_id.clone(), i.priority)).collect();
            let out = propagate_attachment_priority(ranked, &self.triage)?;
            let lifted = out.iter().filter(|i| i.priority > before[&i.item_id]).count();
            p.insert("lifted".into(), lifted.to_string());
            Ok(out)
        })?;
        write_file(&self.root.join(RANKING_FILE), ranking_tsv(&ranked).as_bytes())?;
        Ok(ranked)
    }

    /// The stored ranking.
    pub fn ranking(&self) -> Result<Vec<EvidenceItem<f64>>> {
        let path = self.root.join(RANKING_FILE);
        let text = read_optional(&path)?.ok_or(SessionError::MissingStep { step: "rank", item: None })?;
        let mut out = Vec::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || io(&path, std::io::Error::other(format!("bad ranking line `{line}`")));
            let (id, priority) = match fields.as_slice() {
                [_, id, priority, ..] => (*id, priority.parse::<f64>().map_err(|_| bad())?),
                _ => return Err(bad()),
            };
            let mut item = self.item(id)?.evidence_item();
            item.priority = priority;
            out.push(item);
        }
        Ok(out)
    }

    fn ranked_item(&self, item_id: &str) -> Result<EvidenceItem<f64>> {
        self.ranking()?
            .into_iter()
            .find(|i| i.item_id == item_id)
            .ok_or_else(|| SessionError::MissingStep { step: "rank", item: Some(item_id.into()) })
    }

    /// Evaluates the forwarding threshold for a scanned, ranked item.
    pub fn threshold(&self, item_id: &str) -> Result<ThresholdDecision> {
        self.item(item_id)?;
        self.audited("triage.evaluate_threshold", Self::params(&[("item", item_id)]), |p| {
            let assessment = self.assessment(item_id)?;
            let item = self.ranked_item(item_id)?;
            let decision = evaluate_threshold(&assessment, &item, &self.profile, &self.triage, &self.case.member_id)?;
            p.insert("decision".into(), decision.decision.to_string());
            self.store_decision(&decision)?;
            Ok(decision)
        })
    }

    pub fn threshold_all(&self) -> Result<Vec<ThresholdDecision>> {
        self.case.items.iter().map(|i| self.threshold(&i.item_id)).collect()
    }

    fn store_decision(&self, decision: &ThresholdDecision) -> Result<()> {
        let path = self.decision_path(&decision.item_id);
        // Keep the original timestamp when nothing else changed.
        if let Some(old) = self.decision(&decision.item_id)? {
            let same = ThresholdDecision { decided_at: decision.decided_at, ..old } == *decision;
            if same {
                return Ok(());
            }
        }
        write_file(&path, canonical_json(decision).as_bytes())
    }

    pub fn decision(&self, item_id: &str) -> Result<Option<ThresholdDecision>> {
        let path = self.decision_path(item_id);
        match read_optional(&path)? {
            None => Ok(None),
            Some(text) => serde_json::from_str(&text).map(Some).map_err(|e| io(&path, std::io::Error::other(e))),
        }
    }

    /// Records a decision entered by the member. `meets` cites the flagged
    /// hits (or, with none flagged, the profile target hits); the other
    /// decisions cite checklist rows and need the encryption rows done.
    pub fn record_decision(&self, item_id: &str, decision: Decision) -> Result<ThresholdDecision> {
        self.item(item_id)?;
        let params = Self::params(&[("item", item_id), ("decision", decision.as_str())]);
        self.audited("triage.record_decision", params, |_| {
            let assessment = self.assessment(item_id)?;
            let item = self.ranked_item(item_id)?;
            let flags = self.flags()?;
            let checklist =
                absence_checklist(Some(&item), assessment.encryption.as_ref(), assessment.reasoning.as_deref());
            let refs: Vec<HitRef> = assessment.hits.iter().map(|h| HitRef::of(item_id, h)).collect();
            let basis = match decision {
                Decision::Meets => {
                    let flagged: Vec<_> = refs.iter().filter(|r| flags.contains(r)).cloned().collect();
                    let cited = if flagged.is_empty() {
                        assessment
                            .hits
                            .iter()
                            .filter(|h| self.profile.is_threshold_target(h.kind))
                            .map(|h| HitRef::of(item_id, h))
                            .collect()
                    } else {
                        flagged
                    };
                    if cited.is_empty() {
                        return Err(SessionError::UnsupportedDecision {
                            item: item_id.into(),
                            decision,
                            reason: "no flagged or target hits to cite".into(),
                        });
                    }
                    let mut cited: Vec<Basis> = cited.into_iter().map(Basis::Hit).collect();
                    cited.sort();
                    cited
                }
                Decision::ForwardDespiteNoFindings | Decision::DoesNotMeet => {
                    let blocking = checklist.blocking_rows();
                    if !blocking.is_empty() {
                        return Err(SessionError::ChecklistIncomplete {
                            item: item_id.into(),
                            rows: blocking.iter().map(|q| q.as_str().to_string()).collect(),
                        });
                    }
                    let mut rows = vec![
                        Basis::Checklist(ChecklistQuestion::EncryptionSignaturesChecked),
                        Basis::Checklist(ChecklistQuestion::EncryptionProgramsChecked),
                    ];
                    if decision == Decision::ForwardDespiteNoFindings {
                        rows.push(Basis::Checklist(ChecklistQuestion::PrioritizationReasoningRecorded));
                    }
                    rows
                }
            };
            let decision = ThresholdDecision {
                item_id: item_id.into(),
                decision,
                basis,
                decided_by: self.case.member_id.clone(),
                decided_at: chrono::Utc::now(),
            };
            self.store_decision(&decision)?;
            Ok(decision)
        })
    }

    pub fn flags(&self) -> Result<BTreeSet<HitRef>> {
        let path = self.root.join(FLAGS_FILE);
        let Some(text) = read_optional(&path)? else { return Ok(BTreeSet::new()) };
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<HitRef>().map_err(|e| io(&path, std::io::Error::other(e))))
            .collect()
    }

    /// Sets or clears the flag on one hit.
    pub fn set_flag(&self, reference: &HitRef, flagged: bool) -> Result<()> {
        let text = reference.to_string();
        let params = Self::params(&[("hit", &text), ("flagged", if flagged { "true" } else { "false" })]);
        self.audited("report.flag_hit", params, |_| {
            let assessment = match self.assessment(&reference.item_id) {
                Ok(a) => a,
                Err(SessionError::UnknownItem(_) | SessionError::MissingStep { .. }) => {
                    return Err(SessionError::StaleHitReference(text.clone()))
                }
                Err(e) => return Err(e),
            };
            if !assessment.hits.iter().any(|h| HitRef::of(&reference.item_id, h) == *reference) {
                return Err(SessionError::StaleHitReference(text.clone()));
            }
            let mut flags = self.flags()?;
            if flagged {
                flags.insert(reference.clone());
            } else {
                flags.remove(reference);
            }
            let body: String = flags.iter().map(|f| format!("{f}\n")).collect();
            write_file(&self.root.join(FLAGS_FILE), body.as_bytes())
        })
    }

    pub fn notes(&self) -> Result<String> {
        Ok(read_optional(&self.root.join(NOTES_FILE))?.unwrap_or_else(|| self.case.notes.clone()))
    }

    pub fn set_notes(&self, notes: &str) -> Result<()> {
        write_file(&self.root.join(NOTES_FILE), notes.as_bytes())
    }

    /// Builds, validates and renders the report; four audit events.
    pub fn build_report(&self) -> Result<ObservationReport> {
        let header = ReportHeader {
            dft_file_number: self.case.dft_file_number.clone(),
            case_id: self.case.case_id.clone(),
            member_id: self.case.member_id.clone(),
        };
        let report = self.audited("report.build_report", BTreeMap::new(), |p| {
            let items = self.ranking()?;
            let assessments = self.assessments()?;
            let mut manifests = BTreeMap::new();
            for a in &assessments {
                manifests.insert(a.item_id.clone(), self.stored_manifest(&a.item_id)?.fingerprint());
            }
            let mut decisions = Vec::new();
            for item in &self.case.items {
                decisions.extend(self.decision(&item.item_id)?);
            }
            let notes = self.notes()?;
            let input = ReportInput {
                items: &items,
                assessments: &assessments,
                manifests,
                flags: self.flags()?,
                notes: &notes,
                decisions: &decisions,
            };
            let report = build_report(&header, &input)?;
            p.insert("report_id".into(), report.report_id());
            p.insert("items".into(), report.items.len().to_string());
            Ok(report)
        })?;
        self.audited("report.validate_report", Self::params(&[("report_id", &report.report_id())]), |p| {
            let errors = validate_report(&report);
            p.insert("errors".into(), errors.len().to_string());
            if errors.is_empty() {
                Ok(())
            } else {
                Err(ReportError::InvalidReport(errors).into())
            }
        })?;
        for (format, file) in [(ReportFormat::Structured, REPORT_FILE), (ReportFormat::Readable, READABLE_FILE)] {
            let name = if format == ReportFormat::Structured { "structured" } else { "readable" };
            self.audited("report.render_report", Self::params(&[("format", name), ("file", file)]), |_| {
                let bytes = render_report(&report, format)?;
                write_file(&self.root.join(file), &bytes)
            })?;
        }
        Ok(report)
    }

    /// Records the member's decisions and notes, then builds the report.
    pub fn finalize(&self, decisions: &[(String, Decision)], notes: Option<&str>) -> Result<ObservationReport> {
        for (item, decision) in decisions {
            self.record_decision(item, *decision)?;
        }
        if let Some(notes) = notes {
            self.set_notes(notes)?;
        }
        self.build_report()
    }

    pub fn report(&self) -> Result<ObservationReport> {
        let path = self.root.join(REPORT_FILE);
        let text = read_optional(&path)?.ok_or(SessionError::MissingStep { step: "report", item: None })?;
        Ok(parse_report(text.as_bytes())?)
    }

    /// Snapshot of the case for review.
    pub fn view(&self) -> Result<CaseView> {
        let ranking = match self.ranking() {
            Ok(r) => r,
            Err(SessionError::MissingStep { .. }) => self.case.items.iter().map(CaseItem::evidence_item).collect(),
            Err(e) => return Err(e),
        };
        let flags = self.flags()?;
        let mut items = Vec::new();
        for item in &ranking {
            let id = item.item_id.as_str();
            let assessment = match self.assessment(id) {
                Ok(a) => Some(a),
                Err(SessionError::MissingStep { .. }) => None,
                Err(e) => return Err(e),
            };
            let encryption = assessment.as_ref().and_then(|a| a.encryption.clone());
            let reasoning = self.item(id)?.reasoning.clone();
            let mut hits: Vec<HitView> = assessment
                .iter()
                .flat_map(|a| a.hits.iter())
                .map(|h| {
                    let r = HitRef::of(id, h);
                    let mut hit = h.clone();
                    hit.flagged = flags.contains(&r);
                    HitView { reference: r.to_string(), salient: self.profile.is_salient(h), hit }
                })
                .collect();
            hits.sort_by_key(|h| (!h.hit.flagged, !h.salient));
            items.push(ItemView {
                item_id: id.to_string(),
                description: item.description.clone(),
                priority: item.priority,
                attached_to: item.attached_to.clone(),
                scanned: assessment.is_some(),
                hits,
                checklist: absence_checklist(Some(item), encryption.as_ref(), reasoning.as_deref()),
                encryption,
                decision: self.decision(id)?,
            });
        }
        let report_id = match self.report() {
            Ok(r) => Some(r.report_id()),
            Err(SessionError::MissingStep { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(CaseView {
            case_id: self.case.case_id.clone(),
            dft_file_number: self.case.dft_file_number.clone(),
            member_id: self.case.member_id.clone(),
            profile: self.profile.crime_type.as_str().to_string(),
            items,
            notes: self.notes()?,
            report_id,
        })
    }
}

fn hits_tsv(hits: &[ArtifactHit]) -> String {
    let mut out = String::from("kind\tvalue\tlocation\tlength\tscanner\tnote\n");
    for h in hits {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            h.kind,
            cell(&h.value),
            cell(&h.location.to_string()),
            h.length,
            h.scanner_id,
            cell(h.note.as_deref().unwrap_or(""))
        );
    }
    out
}

fn cards_tsv(cards: &[crate::scanners::CardHit]) -> String {
    let mut out = String::from("bank_code\tpan\toccurrences\tlocations\n");
    for group in sort_by_bank_code(cards.to_vec()) {
        for hit in &group.hits {
            let locations: Vec<String> = hit.occurrences.iter().map(|o| cell(&o.location.to_string())).collect();
            let _ =
                writeln!(out, "{}\t{}\t{}\t{}", group.bank_code, hit.pan, hit.occurrences.len(), locations.join(","));
        }
    }
    out
}

fn ranking_tsv(items: &[EvidenceItem<f64>]) -> String {
    let mut out = String::from("rank\titem_id\tpriority\tattached_to\n");
    for (i, item) in items.iter().enumerate() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            i + 1,
            item.item_id,
            item.priority,
            item.attached_to.as_deref().unwrap_or("-")
        );
    }
    out
}
