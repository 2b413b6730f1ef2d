//! Loopback HTTP API over the coordinator and the case workspaces.
//!
//! Coordinator routes:
//!
//! ```text
//! POST /members                     register a member (MemberRecord)
//! GET  /members/{id}/status?year=&minimum=
//! POST /file-numbers                {member_id, investigation_id}
//! POST /assessments                 a structured or readable Observation Report
//! GET  /metrics?year= | ?from=&to=
//! POST /historical                  Table 1 or Table 2 as delimited text
//! ```
//!
//! Case routes, for the assessment console. `{id}` names a workspace
//! directory under the cases root:
//!
//! ```text
//! GET  /cases
//! GET  /cases/{id}                  CaseView, items in rank order
//! POST /cases/{id}/flags            {hit, flagged}
//! POST /cases/{id}/finalize         {decisions: {item: decision}, notes}
//! GET  /cases/{id}/report?format=structured|readable
//! ```
//!
//! Responses are sorted-key JSON, the same text form as structured
//! reports. Errors are `{"error": {"module", "code", "message"}}` with an
//! optional `details` list.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Datelike;
use dft_core::coordinator::{Coordinator, CoordinatorError, HistoricalTable, MemberRecord, Period, Qualification};
use dft_core::report::{canonical_json, parse_report, render_report, ReportFormat};
use dft_core::session::{SessionError, Workspace, CASE_FILE};
use dft_core::triage::{Decision, HitRef};
use serde::{Deserialize, Serialize};

/// Shared state behind every route.
#[derive(Clone)]
pub struct ServiceState {
    coordinator: Arc<Coordinator>,
    cases_root: PathBuf,
    /// One lock per case so requests on a case run one at a time instead
    /// of tripping over the workspace lock file.
    case_locks: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

impl ServiceState {
    pub fn new(coordinator: Arc<Coordinator>, cases_root: impl Into<PathBuf>) -> Self {
        Self { coordinator, cases_root: cases_root.into(), case_locks: Arc::default() }
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coordinator
    }

    fn case_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.case_locks.lock().unwrap().entry(id.to_string()).or_default().clone()
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/members", post(register_member))
        .route("/members/{id}/status", get(member_status))
        .route("/file-numbers", post(issue_file_number))
        .route("/assessments", post(record_assessment))
        .route("/metrics", get(metrics))
        .route("/historical", post(ingest_historical))
        .route("/cases", get(list_cases))
        .route("/cases/{id}", get(fetch_case))
        .route("/cases/{id}/flags", post(submit_flag))
        .route("/cases/{id}/finalize", post(finalize))
        .route("/cases/{id}/report", get(fetch_report))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: ServiceState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// A failed request, as sent to the client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub module: String,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    error: ApiError,
}

impl ApiError {
    fn new(status: StatusCode, module: &str, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            module: module.into(),
            code: code.into(),
            message: message.into(),
            details: Vec::new(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "service", "bad_request", message)
    }

    /// Decodes an error body returned by the service.
    pub fn from_body(status: u16, body: &str) -> Option<Self> {
        let parsed: ErrorBody = serde_json::from_str(body).ok()?;
        Some(Self { status, ..parsed.error })
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}: {}", self.module, self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<CoordinatorError> for ApiError {
    fn from(e: CoordinatorError) -> Self {
        use CoordinatorError as E;
        let status = match &e {
            E::UnknownMember(_) | E::UnknownFileNumber(_) | E::NoData => StatusCode::NOT_FOUND,
            E::NotCertified(_) => StatusCode::FORBIDDEN,
            E::DuplicateMember(_) | E::DuplicateReportForFileNumber { .. } => StatusCode::CONFLICT,
            E::InvalidReport(_) | E::MalformedRow { .. } | E::InvalidConfig(_) => StatusCode::UNPROCESSABLE_ENTITY,
            E::Journal { .. } | E::JournalCorrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut err = Self::new(status, "coordinator", e.code(), e.to_string());
        if let E::InvalidReport(problems) = e {
            err.details = problems;
        }
        err
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use SessionError as E;
        let status = match &e {
            E::UnknownItem(_) => StatusCode::NOT_FOUND,
            E::Locked(..)
            | E::MissingStep { .. }
            | E::StaleHitReference(_)
            | E::ManifestChanged { .. }
            | E::CaseMismatch(_) => StatusCode::CONFLICT,
            E::Io { .. } | E::Integrity(_) | E::Scan(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let mut err = Self::new(status, e.module(), e.code(), e.to_string());
        if let E::ChecklistIncomplete { rows, .. } = e {
            err.details = rows;
        }
        err
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json(status, &ErrorBody { error: self })
    }
}

type ApiResult = Result<Response, ApiError>;

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], canonical_json(value)).into_response()
}

fn ok<T: Serialize>(value: &T) -> ApiResult {
    Ok(json(StatusCode::OK, value))
}

async fn register_member(State(s): State<ServiceState>, body: Result<Json<MemberRecord>, JsonRejection>) -> ApiResult {
    let Json(record) = body?;
    Ok(json(StatusCode::CREATED, &s.coordinator.register_member(record)?))
}

#[derive(Deserialize)]
struct StatusQuery {
    year: Option<i32>,
    minimum: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberStatus {
    pub member_id: String,
    pub year: i32,
    pub assessments: u32,
    pub minimum: u32,
    pub status: Qualification,
}

async fn member_status(
    State(s): State<ServiceState>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<StatusQuery>, QueryRejection>,
) -> ApiResult {
    let Query(q) = query?;
    let c = &s.coordinator;
    let year = q.year.unwrap_or_else(|| c.now().year());
    let status = c.qualification_status(&id, year, q.minimum)?;
    let member = c.member(&id)?;
    ok(&MemberStatus {
        assessments: member.assessments_by_year.get(&year).copied().unwrap_or(0),
        member_id: id,
        year,
        minimum: q.minimum.unwrap_or(c.config().qualification_minimum),
        status,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileNumberRequest {
    pub member_id: String,
    pub investigation_id: String,
}

async fn issue_file_number(
    State(s): State<ServiceState>,
    body: Result<Json<FileNumberRequest>, JsonRejection>,
) -> ApiResult {
    let Json(req) = body?;
    // Issuance takes the coordinator's write lock; keep it off the
    // async workers.
    let number =
        tokio::task::spawn_blocking(move || s.coordinator.issue_file_number(&req.member_id, &req.investigation_id))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "service", "task", e.to_string()))??;
    ok(&number)
}

async fn record_assessment(State(s): State<ServiceState>, body: Bytes) -> ApiResult {
    let report = parse_report(&body).map_err(|e| {
        let mut err = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "report", e.code(), e.to_string());
        if let dft_core::report::ReportError::InvalidReport(problems) = e {
            err.details = problems;
        }
        err
    })?;
    ok(&s.coordinator.record_report(&report)?)
}

#[derive(Deserialize)]
struct MetricsQuery {
    year: Option<i32>,
    from: Option<i32>,
    to: Option<i32>,
}

async fn metrics(State(s): State<ServiceState>, query: Result<Query<MetricsQuery>, QueryRejection>) -> ApiResult {
    let Query(q) = query?;
    let period = match (q.year, q.from, q.to) {
        (None, None, None) => Period::All,
        (Some(y), None, None) => Period::Year(y),
        (None, Some(from), Some(to)) if from <= to => Period::Years { from, to },
        _ => return Err(ApiError::bad_request("give `year`, or `from` and `to` with from <= to, or nothing")),
    };
    ok(&s.coordinator.program_metrics(period)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub table: String,
    pub rows: usize,
}

async fn ingest_historical(State(s): State<ServiceState>, body: Bytes) -> ApiResult {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let summary = match s.coordinator.ingest_historical(text)? {
        HistoricalTable::Locations(t) => IngestSummary { table: "locations".into(), rows: t.rows.len() },
        HistoricalTable::Years(t) => IngestSummary { table: "years".into(), rows: t.rows.len() },
    };
    ok(&summary)
}

fn valid_case_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b))
}

fn case_root(s: &ServiceState, id: &str) -> Result<PathBuf, ApiError> {
    let root = s.cases_root.join(id);
    if !valid_case_id(id) || !root.join(CASE_FILE).is_file() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "service", "unknown_case", format!("no case `{id}`")));
    }
    Ok(root)
}

/// Opens the case workspace and runs `op` on a blocking thread, one
/// request per case at a time.
async fn with_case<T, F>(s: &ServiceState, id: &str, op: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Workspace) -> Result<T, ApiError> + Send + 'static,
{
    let root = case_root(s, id)?;
    let guard = s.case_lock(id).lock_owned().await;
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let ws = Workspace::open(&root)?;
        op(&ws)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "service", "task", e.to_string()))?
}

async fn list_cases(State(s): State<ServiceState>) -> ApiResult {
    let mut ids = Vec::new();
    if let Ok(entries) = std::fs::read_dir(&s.cases_root) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_case_id(&name) && is_case(&entry.path()) {
                ids.push(name);
            }
        }
    }
    ids.sort();
    ok(&ids)
}

fn is_case(dir: &Path) -> bool {
    dir.join(CASE_FILE).is_file()
}

async fn fetch_case(State(s): State<ServiceState>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let view = with_case(&s, &id, |ws| Ok(ws.view()?)).await?;
    ok(&view)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlagRequest {
    /// `item|scanner|location`, as listed in the case view.
    pub hit: String,
    pub flagged: bool,
}

async fn submit_flag(
    State(s): State<ServiceState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<FlagRequest>, JsonRejection>,
) -> ApiResult {
    let Json(req) = body?;
    let reference: HitRef = req.hit.parse().map_err(ApiError::bad_request)?;
    if reference.item_id.is_empty() {
        return Err(ApiError::bad_request("hit reference names no item"));
    }
    let flagged = req.flagged;
    let ack = with_case(&s, &id, move |ws| {
        ws.set_flag(&reference, flagged)?;
        Ok(FlagRequest { hit: reference.to_string(), flagged })
    })
    .await?;
    ok(&ack)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FinalizeRequest {
    /// Decision per item; items left out keep any decision on file.
    #[serde(default)]
    pub decisions: BTreeMap<String, Decision>,
    /// Replaces the case notes when present.
    #[serde(default)]
    pub notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalizeResponse {
    pub report_id: String,
    pub dft_file_number: String,
    /// The readable rendering, for display.
    pub readable: String,
}

async fn finalize(
    State(s): State<ServiceState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<FinalizeRequest>, JsonRejection>,
) -> ApiResult {
    let Json(req) = body?;
    let out = with_case(&s, &id, move |ws| {
        let decisions: Vec<(String, Decision)> = req.decisions.into_iter().collect();
        let report = ws.finalize(&decisions, req.notes.as_deref())?;
        let readable = render_report(&report, ReportFormat::Readable).map_err(SessionError::from)?;
        Ok(FinalizeResponse {
            report_id: report.report_id(),
            dft_file_number: report.dft_file_number,
            readable: String::from_utf8_lossy(&readable).into_owned(),
        })
    })
    .await?;
    ok(&out)
}

#[derive(Deserialize)]
struct ReportQuery {
    format: Option<String>,
}

async fn fetch_report(
    State(s): State<ServiceState>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<ReportQuery>, QueryRejection>,
) -> ApiResult {
    let Query(q) = query?;
    let (format, content_type) = match q.format.as_deref() {
        None | Some("structured") => (ReportFormat::Structured, "application/json"),
        Some("readable") => (ReportFormat::Readable, "text/markdown; charset=utf-8"),
        Some(other) => return Err(ApiError::bad_request(format!("unknown format `{other}`"))),
    };
    let bytes = with_case(&s, &id, move |ws| {
        let report = ws.report()?;
        Ok(render_report(&report, format).map_err(SessionError::from)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}
