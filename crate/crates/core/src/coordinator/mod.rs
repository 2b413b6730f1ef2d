//! Coordinator state: members, DFT file numbers, assessment counts,
//! qualification and program metrics.
//!
//! All mutations go through one lock and are appended to an optional
//! journal (one JSON object per line) before they become visible. Opening a
//! coordinator on an existing journal replays it.

mod tables;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Datelike, NaiveDate, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::report::{validate_report, ObservationReport};
use crate::triage::Decision;

pub use tables::{
    export_historical, export_locations, export_years, parse_historical, HistoricalTable, LocationRow, LocationTable,
    YearRow, YearTable, TABLE1_HEADER, TABLE2_HEADER,
};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("unknown member `{0}`")]
    UnknownMember(String),
    #[error("member `{0}` is not certified")]
    NotCertified(String),
    #[error("member `{0}` is already registered")]
    DuplicateMember(String),
    #[error("unknown file number `{0}`")]
    UnknownFileNumber(String),
    #[error("report `{report_id}` already recorded for `{file_number}`")]
    DuplicateReportForFileNumber { file_number: String, report_id: String },
    #[error("invalid report: {}", .0.join("; "))]
    InvalidReport(Vec<String>),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("no data for the requested period")]
    NoData,
    #[error("invalid coordinator config: {0}")]
    InvalidConfig(String),
    #[error("journal {path}: {source}")]
    Journal { path: PathBuf, source: std::io::Error },
    #[error("journal {path} line {line} is corrupt: {reason}")]
    JournalCorrupt { path: PathBuf, line: usize, reason: String },
}

impl CoordinatorError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownMember(_) => "unknown_member",
            Self::NotCertified(_) => "not_certified",
            Self::DuplicateMember(_) => "duplicate_member",
            Self::UnknownFileNumber(_) => "unknown_file_number",
            Self::DuplicateReportForFileNumber { .. } => "duplicate_report_for_file_number",
            Self::InvalidReport(_) => "invalid_report",
            Self::MalformedRow { .. } => "malformed_row",
            Self::NoData => "no_data",
            Self::InvalidConfig(_) => "invalid_config",
            Self::Journal { .. } => "journal",
            Self::JournalCorrupt { .. } => "journal_corrupt",
        }
    }
}

pub type Result<T> = std::result::Result<T, CoordinatorError>;

/// Source of "now"; replaceable in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
pub struct FixedClock(Mutex<DateTime<Utc>>);

impl FixedClock {
    pub fn new(at: DateTime<Utc>) -> Self {
        Self(Mutex::new(at))
    }

    pub fn set(&self, at: DateTime<Utc>) {
        *self.0.lock() = at;
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum District {
    HQ,
    D1,
    D2,
    D3,
    D4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BusinessLine {
    /// Computer field triage.
    DCFT,
    /// Mobile device field triage.
    DMFT,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub member_id: String,
    pub name: String,
    pub station: String,
    pub district: District,
    pub business_lines: BTreeSet<BusinessLine>,
    /// `None` until the course is passed.
    pub certified_on: Option<NaiveDate>,
    /// Files assessed per calendar year, one per file number.
    #[serde(default)]
    pub assessments_by_year: BTreeMap<i32, u32>,
}

impl MemberRecord {
    pub fn new(member_id: impl Into<String>, district: District, certified_on: Option<NaiveDate>) -> Self {
        Self {
            member_id: member_id.into(),
            name: String::new(),
            station: String::new(),
            district,
            business_lines: BTreeSet::from([BusinessLine::DCFT]),
            certified_on,
            assessments_by_year: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DftFileNumber {
    /// `DFT-<year>-<six digit sequence>`.
    pub value: String,
    pub member_id: String,
    pub investigation_id: String,
    pub issued_at: DateTime<Utc>,
}

/// What the coordinator keeps of a submitted report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRef {
    pub report_id: String,
    pub exhibits_assessed: u32,
    pub exhibits_forwarded: u32,
}

impl ReportRef {
    /// Counts an item as forwarded when its decision is anything but
    /// `does_not_meet`.
    pub fn from_report(report: &ObservationReport) -> Self {
        let forwarded = report
            .threshold_decisions
            .iter()
            .filter(|d| d.decision != Decision::DoesNotMeet)
            .map(|d| d.item_id.as_str())
            .collect::<BTreeSet<_>>()
            .len();
        Self {
            report_id: report.report_id(),
            exhibits_assessed: report.items.len() as u32,
            exhibits_forwarded: forwarded as u32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qualification {
    Current,
    Lapsed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacklogSnapshot {
    pub total: u32,
    pub dft_assessed: u32,
}

impl BacklogSnapshot {
    pub fn dft_share(&self) -> f64 {
        self.dft_assessed as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    #[serde(default = "default_minimum")]
    pub qualification_minimum: u32,
    /// Reported as-is; when absent the ratio is computed from recorded
    /// reports.
    #[serde(default)]
    pub exhibit_reduction: Option<f64>,
    #[serde(default)]
    pub backlog_snapshot: Option<BacklogSnapshot>,
}

fn default_minimum() -> u32 {
    4
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self { qualification_minimum: default_minimum(), exhibit_reduction: None, backlog_snapshot: None }
    }
}

impl CoordinatorConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CoordinatorError::InvalidConfig(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoordinatorError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn check(&self) -> Result<()> {
        if let Some(r) = self.exhibit_reduction {
            if !(0.0..=1.0).contains(&r) {
                return Err(CoordinatorError::InvalidConfig(format!("exhibit_reduction {r} is outside [0, 1]")));
            }
        }
        if let Some(s) = self.backlog_snapshot {
            if s.total == 0 || s.dft_assessed > s.total {
                return Err(CoordinatorError::InvalidConfig(format!(
                    "backlog snapshot needs 0 <= dft_assessed <= total and total > 0, got {}/{}",
                    s.dft_assessed, s.total
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    All,
    Year(i32),
    /// Inclusive.
    Years {
        from: i32,
        to: i32,
    },
}

impl Period {
    fn contains(&self, year: i32) -> bool {
        match *self {
            Self::All => true,
            Self::Year(y) => y == year,
            Self::Years { from, to } => (from..=to).contains(&year),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioSource {
    Configured,
    Recorded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Historical rows within the period.
    pub rows: Vec<YearRow>,
    /// Files recorded through this coordinator, by year.
    pub recorded_files: BTreeMap<i32, u32>,
    pub exhibit_reduction_ratio: Option<f64>,
    pub exhibit_reduction_source: Option<RatioSource>,
    pub backlog_snapshot: Option<BacklogSnapshot>,
    pub backlog_dft_share: Option<f64>,
}

impl MetricsSummary {
    pub fn row(&self, year: i32) -> Option<&YearRow> {
        self.rows.iter().find(|r| r.year() == year)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
enum JournalEntry {
    Member { record: MemberRecord },
    FileNumber { number: DftFileNumber },
    Assessment { file_number: String, year: i32, report: ReportRef },
    Historical { text: String },
}

#[derive(Default)]
struct State {
    members: BTreeMap<String, MemberRecord>,
    by_pair: HashMap<(String, String), String>,
    numbers: HashMap<String, DftFileNumber>,
    next_seq: BTreeMap<i32, u64>,
    reports: HashMap<String, Vec<ReportRef>>,
    recorded_files: BTreeMap<i32, u32>,
    locations: Option<LocationTable>,
    years: Option<YearTable>,
}

impl State {
    fn apply(&mut self, entry: &JournalEntry) -> Result<()> {
        match entry {
            JournalEntry::Member { record } => {
                self.members.insert(record.member_id.clone(), record.clone());
            }
            JournalEntry::FileNumber { number } => {
                let year = number.issued_at.year();
                let seq = parse_seq(&number.value).unwrap_or(0);
                let next = self.next_seq.entry(year).or_insert(1);
                *next = (*next).max(seq + 1);
                self.by_pair.insert((number.member_id.clone(), number.investigation_id.clone()), number.value.clone());
                self.numbers.insert(number.value.clone(), number.clone());
            }
            JournalEntry::Assessment { file_number, year, report } => {
                let reports = self.reports.entry(file_number.clone()).or_default();
                let first = reports.is_empty();
                reports.push(report.clone());
                if first {
                    let member = &self.numbers[file_number].member_id;
                    *self.members.get_mut(member).unwrap().assessments_by_year.entry(*year).or_insert(0) += 1;
                    *self.recorded_files.entry(*year).or_insert(0) += 1;
                }
            }
            JournalEntry::Historical { text } => match parse_historical(text)? {
                HistoricalTable::Locations(t) => self.locations = Some(t),
                HistoricalTable::Years(t) => self.years = Some(t),
            },
        }
        Ok(())
    }
}

fn parse_seq(value: &str) -> Option<u64> {
    value.rsplit('-').next()?.parse().ok()
}

struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    fn append(&mut self, entry: &JournalEntry) -> Result<()> {
        let mut line = serde_json::to_string(entry).expect("journal entries serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| CoordinatorError::Journal { path: self.path.clone(), source })
    }
}

/// Coordinator state, shareable across threads.
pub struct Coordinator {
    state: RwLock<State>,
    journal: Mutex<Option<Journal>>,
    clock: Arc<dyn Clock>,
    config: CoordinatorConfig,
}

impl Coordinator {
    /// Volatile coordinator with no journal.
    pub fn in_memory(config: CoordinatorConfig, clock: Arc<dyn Clock>) -> Self {
        Self { state: RwLock::new(State::default()), journal: Mutex::new(None), clock, config }
    }

    /// Replays `path` if it exists, then journals every change to it.
    pub fn open(path: &Path, config: CoordinatorConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        config.check()?;
        let mut state = State::default();
        let io = |source| CoordinatorError::Journal { path: path.to_path_buf(), source };
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt =
                    |reason: String| CoordinatorError::JournalCorrupt { path: path.to_path_buf(), line: i + 1, reason };
                let entry: JournalEntry = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                state.apply(&entry).map_err(|e| corrupt(e.to_string()))?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self {
            state: RwLock::new(state),
            journal: Mutex::new(Some(Journal { path: path.to_path_buf(), file })),
            clock,
            config,
        })
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.config
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// Journals then applies; callers hold the state write lock.
    fn commit(&self, state: &mut State, entry: JournalEntry) -> Result<()> {
        if let Some(journal) = self.journal.lock().as_mut() {
            journal.append(&entry)?;
        }
        state.apply(&entry)
    }

    pub fn register_member(&self, mut record: MemberRecord) -> Result<MemberRecord> {
        let mut state = self.state.write();
        if state.members.contains_key(&record.member_id) {
            return Err(CoordinatorError::DuplicateMember(record.member_id));
        }
        record.assessments_by_year.clear();
        self.commit(&mut state, JournalEntry::Member { record: record.clone() })?;
        Ok(record)
    }

    pub fn member(&self, member_id: &str) -> Result<MemberRecord> {
        self.state
            .read()
            .members
            .get(member_id)
            .cloned()
            .ok_or_else(|| CoordinatorError::UnknownMember(member_id.into()))
    }

    pub fn members(&self) -> Vec<MemberRecord> {
        self.state.read().members.values().cloned().collect()
    }

    /// Returns the member's number for the investigation, issuing the next
    /// one in the current year's sequence on first request.
    pub fn issue_file_number(&self, member_id: &str, investigation_id: &str) -> Result<DftFileNumber> {
        let mut state = self.state.write();
        let member = state.members.get(member_id).ok_or_else(|| CoordinatorError::UnknownMember(member_id.into()))?;
        let now = self.clock.now();
        match member.certified_on {
            Some(day) if day <= now.date_naive() => {}
            _ => return Err(CoordinatorError::NotCertified(member_id.into())),
        }
        if let Some(value) = state.by_pair.get(&(member_id.to_string(), investigation_id.to_string())) {
            return Ok(state.numbers[value].clone());
        }
        let year = now.year();
        let seq = state.next_seq.get(&year).copied().unwrap_or(1);
        let number = DftFileNumber {
            value: format!("DFT-{year}-{seq:06}"),
            member_id: member_id.to_string(),
            investigation_id: investigation_id.to_string(),
            issued_at: now,
        };
        self.commit(&mut state, JournalEntry::FileNumber { number: number.clone() })?;
        Ok(number)
    }

    pub fn file_number(&self, value: &str) -> Result<DftFileNumber> {
        self.state.read().numbers.get(value).cloned().ok_or_else(|| CoordinatorError::UnknownFileNumber(value.into()))
    }

    /// Records a report under a file number. The member's count for the
    /// current year rises only with the first report on the number;
    /// resubmitting the same report is an error.
    pub fn record_assessment(&self, file_number: &str, report: &ReportRef) -> Result<MemberRecord> {
        let mut state = self.state.write();
        let member_id = state
            .numbers
            .get(file_number)
            .ok_or_else(|| CoordinatorError::UnknownFileNumber(file_number.into()))?
            .member_id
            .clone();
        if state.reports.get(file_number).is_some_and(|rs| rs.iter().any(|r| r.report_id == report.report_id)) {
            return Err(CoordinatorError::DuplicateReportForFileNumber {
                file_number: file_number.into(),
                report_id: report.report_id.clone(),
            });
        }
        let entry = JournalEntry::Assessment {
            file_number: file_number.into(),
            year: self.clock.now().year(),
            report: report.clone(),
        };
        self.commit(&mut state, entry)?;
        Ok(state.members[&member_id].clone())
    }

    /// Validates a full report and records it under its own file number.
    pub fn record_report(&self, report: &ObservationReport) -> Result<MemberRecord> {
        let errors = validate_report(report);
        if !errors.is_empty() {
            return Err(CoordinatorError::InvalidReport(errors));
        }
        self.record_assessment(&report.dft_file_number, &ReportRef::from_report(report))
    }

    pub fn reports_for(&self, file_number: &str) -> Vec<ReportRef> {
        self.state.read().reports.get(file_number).cloned().unwrap_or_default()
    }

    /// `minimum` defaults to the configured qualification minimum.
    pub fn qualification_status(&self, member_id: &str, year: i32, minimum: Option<u32>) -> Result<Qualification> {
        let state = self.state.read();
        let member = state.members.get(member_id).ok_or_else(|| CoordinatorError::UnknownMember(member_id.into()))?;
        let count = member.assessments_by_year.get(&year).copied().unwrap_or(0);
        Ok(if count >= minimum.unwrap_or(self.config.qualification_minimum) {
            Qualification::Current
        } else {
            Qualification::Lapsed
        })
    }

    /// Stores a Table 1 or Table 2 document, replacing any earlier one of
    /// the same kind.
    pub fn ingest_historical(&self, text: &str) -> Result<HistoricalTable> {
        let table = parse_historical(text)?;
        let mut state = self.state.write();
        self.commit(&mut state, JournalEntry::Historical { text: text.to_string() })?;
        Ok(table)
    }

    pub fn export_locations(&self) -> Option<String> {
        self.state.read().locations.as_ref().map(export_locations)
    }

    pub fn export_years(&self) -> Option<String> {
        self.state.read().years.as_ref().map(export_years)
    }

    pub fn locations(&self) -> Option<LocationTable> {
        self.state.read().locations.clone()
    }

    pub fn program_metrics(&self, period: Period) -> Result<MetricsSummary> {
        let state = self.state.read();
        let rows: Vec<YearRow> =
            state.years.iter().flat_map(|t| t.rows.iter()).filter(|r| period.contains(r.year())).cloned().collect();
        let recorded_files: BTreeMap<i32, u32> =
            state.recorded_files.iter().filter(|(y, _)| period.contains(**y)).map(|(y, n)| (*y, *n)).collect();
        if rows.is_empty() && recorded_files.is_empty() {
            return Err(CoordinatorError::NoData);
        }

        let (ratio, source) = match self.config.exhibit_reduction {
            Some(r) => (Some(r), Some(RatioSource::Configured)),
            None => {
                let (assessed, forwarded) =
                    state.reports.values().flatten().fold((0u64, 0u64), |(a, f), r| {
                        (a + r.exhibits_assessed as u64, f + r.exhibits_forwarded as u64)
                    });
                if assessed == 0 {
                    (None, None)
                } else {
                    (Some(1.0 - forwarded as f64 / assessed as f64), Some(RatioSource::Recorded))
                }
            }
        };
        let snapshot = self.config.backlog_snapshot;
        Ok(MetricsSummary {
            rows,
            recorded_files,
            exhibit_reduction_ratio: ratio,
            exhibit_reduction_source: source,
            backlog_snapshot: snapshot,
            backlog_dft_share: snapshot.map(|s| s.dft_share()),
        })
    }
}
