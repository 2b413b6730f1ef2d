//! Blocking client for the coordinator service.

use std::time::Duration;

use dft_core::coordinator::{DftFileNumber, MemberRecord};
use dft_service::{ApiError, FileNumberRequest};
use serde_json::json;

use crate::CliError;

pub struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    /// `addr` is `host:port` or a full `http://` URL.
    pub fn new(addr: &str) -> Self {
        let base = if addr.contains("://") { addr.trim_end_matches('/').to_string() } else { format!("http://{addr}") };
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self { base, agent }
    }

    fn finish(&self, result: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<String, CliError> {
        let mut resp =
            result.map_err(|e| CliError::new("cli", "coordinator_unreachable", format!("{}: {e}", self.base)))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| CliError::new("cli", "coordinator_unreachable", e.to_string()))?;
        if (200..300).contains(&status) {
            return Ok(body);
        }
        Err(match ApiError::from_body(status, &body) {
            Some(e) => e.into(),
            None => CliError::new("cli", "coordinator_error", format!("HTTP {status}: {body}")),
        })
    }

    fn decode<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, CliError> {
        serde_json::from_str(body)
            .map_err(|e| CliError::new("cli", "coordinator_error", format!("unexpected response: {e}")))
    }

    pub fn issue_file_number(&self, member_id: &str, investigation_id: &str) -> Result<DftFileNumber, CliError> {
        let req = FileNumberRequest { member_id: member_id.into(), investigation_id: investigation_id.into() };
        let body = self.finish(self.agent.post(format!("{}/file-numbers", self.base)).send_json(json!(req)))?;
        Self::decode(&body)
    }

    /// Sends a rendered report; returns the member's updated record.
    pub fn submit_report(&self, report: &[u8]) -> Result<MemberRecord, CliError> {
        let body = self.finish(self.agent.post(format!("{}/assessments", self.base)).send(report))?;
        Self::decode(&body)
    }

    /// Raw JSON metrics for a query string such as `year=2014`.
    pub fn metrics(&self, query: &str) -> Result<String, CliError> {
        let url =
            if query.is_empty() { format!("{}/metrics", self.base) } else { format!("{}/metrics?{query}", self.base) };
        self.finish(self.agent.get(url).call())
    }
}
