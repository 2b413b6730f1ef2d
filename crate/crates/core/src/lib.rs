//! Field triage of digital evidence.
//!
//! The crate covers the whole assessment chain a trained field member runs
//! before evidence is sent to the laboratory:
//!
//! * [`integrity`]: read-only evidence handles, SHA-256 manifests and the
//!   append-only audit log.
//! * [`scanners`]: card numbers (Luhn-checked, grouped by bank code),
//!   regular patterns, media inventory, encryption indicators and attached
//!   device history.
//! * [`profiles`]: crime type to scanner set mapping, stored as text.
//! * [`triage`]: evidence prioritization and the forwarding threshold.
//! * [`report`]: the opinion-free Observation Report.
//! * [`coordinator`]: file numbers, member qualification and program metrics.
//! * [`backlog`]: a discrete-event model of the laboratory queue.
//! * [`session`]: audited wrappers tying the above to a case.
//!
//! Numeric code in [`triage`] and [`backlog`] is generic over the scalar
//! type (see [`num::Real`]); the aliases below fix it to `f64`.

pub mod backlog;
pub mod coordinator;
pub mod integrity;
pub mod num;
pub mod profiles;
pub mod report;
pub mod scanners;
pub mod session;
pub mod triage;

pub use num::Real;

/// Priority score type used throughout the case pipeline.
pub type Score = f64;

pub type EvidenceItem = triage::EvidenceItem<f64>;
pub type TriageConfig = triage::TriageConfig<f64>;
pub type SimConfig = backlog::SimConfig<f64>;
pub type SimConfigF32 = backlog::SimConfig<f32>;
pub type BacklogTrace = backlog::BacklogTrace<f64>;

pub use report::ObservationReport;
pub use session::Workspace;
pub use triage::ThresholdDecision;
