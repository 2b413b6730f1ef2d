//! Evidence prioritization and the forwarding threshold.
//!
//! Scores are a capped weighted sum of owner relation, owner history and
//! device class. Items attached to a top-band item are lifted into that
//! band. The threshold is met by any hit of a profile target kind; without
//! one, encryption or a high priority still justify forwarding.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{total_cmp, Real};
use crate::profiles::SearchProfile;
use crate::scanners::{ArtifactHit, EncryptionFindings, EncryptionSummary, Location};

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(format!(concat!("unknown ", stringify!($name), " `{}`"), other)),
                }
            }
        }
    };
}

text_enum!(OwnerRelation {
    Suspect => "suspect",
    Associate => "associate",
    Unrelated => "unrelated",
    Unknown => "unknown",
});

text_enum!(OwnerPrior {
    RelevantRecord => "relevant_record",
    None => "none",
    Unknown => "unknown",
});

text_enum!(DeviceClass {
    Computer => "computer",
    ExternalStorage => "external_storage",
    Phone => "phone",
    Other => "other",
});

/// One seized device, image or tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem<S = f64> {
    pub item_id: String,
    #[serde(default)]
    pub description: String,
    pub owner_relation: OwnerRelation,
    pub owner_prior: OwnerPrior,
    pub device_class: DeviceClass,
    /// Another item of the same case this one was attached to.
    #[serde(default)]
    pub attached_to: Option<String>,
    /// Set by ranking and propagation only.
    #[serde(default)]
    pub priority: S,
    #[serde(default)]
    pub assessed: bool,
}

impl<S: Real> EvidenceItem<S> {
    pub fn new(
        item_id: impl Into<String>,
        owner_relation: OwnerRelation,
        owner_prior: OwnerPrior,
        device_class: DeviceClass,
    ) -> Self {
        Self {
            item_id: item_id.into(),
            description: String::new(),
            owner_relation,
            owner_prior,
            device_class,
            attached_to: None,
            priority: S::zero(),
            assessed: false,
        }
    }

    pub fn attached_to(mut self, parent: impl Into<String>) -> Self {
        self.attached_to = Some(parent.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationWeights<S> {
    pub suspect: S,
    pub associate: S,
    pub unknown: S,
    pub unrelated: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights<S> {
    pub relevant_record: S,
    pub unknown: S,
    pub none: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceWeights<S> {
    pub computer: S,
    pub external_storage: S,
    pub phone: S,
    pub other: S,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringWeights<S> {
    pub owner_relation: RelationWeights<S>,
    pub owner_prior: PriorWeights<S>,
    pub device_class: DeviceWeights<S>,
}

/// Weights and cutoffs; every value is overridable from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageConfig<S = f64> {
    pub weights: ScoringWeights<S>,
    /// Items at or above this score form the top band that attached items
    /// inherit.
    pub priority_band: S,
    /// Items at or above this score are forwarded even without findings.
    pub forward_cutoff: S,
}

impl<S: Real> Default for TriageConfig<S> {
    fn default() -> Self {
        let w = S::of;
        Self {
            weights: ScoringWeights {
                owner_relation: RelationWeights {
                    suspect: w(0.5),
                    associate: w(0.3),
                    unknown: w(0.15),
                    unrelated: w(0.0),
                },
                owner_prior: PriorWeights { relevant_record: w(0.3), unknown: w(0.1), none: w(0.0) },
                device_class: DeviceWeights {
                    computer: w(0.2),
                    external_storage: w(0.15),
                    phone: w(0.15),
                    other: w(0.05),
                },
            },
            priority_band: w(0.7),
            forward_cutoff: w(0.8),
        }
    }
}

impl<S: Real> TriageConfig<S> {
    /// Problems with the configured numbers; empty when usable.
    pub fn check(&self) -> Vec<String> {
        let w = &self.weights;
        let all = [
            ("owner_relation.suspect", w.owner_relation.suspect),
            ("owner_relation.associate", w.owner_relation.associate),
            ("owner_relation.unknown", w.owner_relation.unknown),
            ("owner_relation.unrelated", w.owner_relation.unrelated),
            ("owner_prior.relevant_record", w.owner_prior.relevant_record),
            ("owner_prior.unknown", w.owner_prior.unknown),
            ("owner_prior.none", w.owner_prior.none),
            ("device_class.computer", w.device_class.computer),
            ("device_class.external_storage", w.device_class.external_storage),
            ("device_class.phone", w.device_class.phone),
            ("device_class.other", w.device_class.other),
            ("priority_band", self.priority_band),
            ("forward_cutoff", self.forward_cutoff),
        ];
        all.iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= S::zero() && *v <= S::one()))
            .map(|(name, v)| format!("{name} = {v} is outside [0, 1]"))
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TriageError {
    #[error("duplicate item id `{0}`")]
    DuplicateItemId(String),
    #[error("item `{item}` is attached to unknown item `{target}`")]
    UnknownAttachment { item: String, target: String },
    #[error("attachment cycle through `{0}`")]
    CyclicAttachment(String),
    #[error("assessment of `{item}` incomplete; scanners not run: {}", .missing.join(", "))]
    AssessmentIncomplete { item: String, missing: Vec<String> },
    #[error("checklist for `{item}` incomplete: {}", .rows.join(", "))]
    ChecklistIncomplete { item: String, rows: Vec<String> },
}

impl TriageError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::DuplicateItemId(_) => "duplicate_item_id",
            Self::UnknownAttachment { .. } => "unknown_attachment",
            Self::CyclicAttachment(_) => "cyclic_attachment",
            Self::AssessmentIncomplete { .. } => "assessment_incomplete",
            Self::ChecklistIncomplete { .. } => "checklist_incomplete",
        }
    }
}

/// Weighted sum divided by the largest sum the weights allow, so the
/// score lies in `[0, 1]` and a higher weight always means a higher score.
pub fn score_evidence<S: Real>(item: &EvidenceItem<S>, config: &TriageConfig<S>) -> S {
    let w = &config.weights;
    let relation = match item.owner_relation {
        OwnerRelation::Suspect => w.owner_relation.suspect,
        OwnerRelation::Associate => w.owner_relation.associate,
        OwnerRelation::Unknown => w.owner_relation.unknown,
        OwnerRelation::Unrelated => w.owner_relation.unrelated,
    };
    let prior = match item.owner_prior {
        OwnerPrior::RelevantRecord => w.owner_prior.relevant_record,
        OwnerPrior::Unknown => w.owner_prior.unknown,
        OwnerPrior::None => w.owner_prior.none,
    };
    let device = match item.device_class {
        DeviceClass::Computer => w.device_class.computer,
        DeviceClass::ExternalStorage => w.device_class.external_storage,
        DeviceClass::Phone => w.device_class.phone,
        DeviceClass::Other => w.device_class.other,
    };
    let top = |ws: &[S]| ws.iter().fold(S::zero(), |m, &v| m.max(v));
    let r = &w.owner_relation;
    let p = &w.owner_prior;
    let d = &w.device_class;
    let most = top(&[r.suspect, r.associate, r.unknown, r.unrelated])
        + top(&[p.relevant_record, p.unknown, p.none])
        + top(&[d.computer, d.external_storage, d.phone, d.other]);
    if most <= S::zero() {
        return S::zero();
    }
    ((relation + prior + device) / most).min(S::one())
}

fn order_ranked<S: Real>(items: &mut [EvidenceItem<S>]) {
    items.sort_by(|a, b| total_cmp(b.priority, a.priority).then_with(|| a.item_id.cmp(&b.item_id)));
}

/// Scores every item and orders by descending score, ties by ascending id.
pub fn rank_evidence<S: Real>(
    items: Vec<EvidenceItem<S>>,
    config: &TriageConfig<S>,
) -> Result<Vec<EvidenceItem<S>>, TriageError> {
    let mut seen = HashSet::new();
    for item in &items {
        if !seen.insert(item.item_id.as_str()) {
            return Err(TriageError::DuplicateItemId(item.item_id.clone()));
        }
    }
    let mut ranked: Vec<_> = items
        .into_iter()
        .map(|mut item| {
            item.priority = score_evidence(&item, config);
            item
        })
        .collect();
    order_ranked(&mut ranked);
    Ok(ranked)
}

/// Lifts every item attached, directly or through a chain, to a top-band
/// item up to the band, then re-ranks. Scores never decrease.
pub fn propagate_attachment_priority<S: Real>(
    ranked: Vec<EvidenceItem<S>>,
    config: &TriageConfig<S>,
) -> Result<Vec<EvidenceItem<S>>, TriageError> {
    let index: BTreeMap<&str, usize> = ranked.iter().enumerate().map(|(i, it)| (it.item_id.as_str(), i)).collect();
    if index.len() != ranked.len() {
        let mut seen = HashSet::new();
        let dup = ranked.iter().find(|it| !seen.insert(it.item_id.as_str())).unwrap();
        return Err(TriageError::DuplicateItemId(dup.item_id.clone()));
    }
    let mut parent = vec![None; ranked.len()];
    for (i, item) in ranked.iter().enumerate() {
        if let Some(target) = &item.attached_to {
            let &p = index
                .get(target.as_str())
                .ok_or_else(|| TriageError::UnknownAttachment { item: item.item_id.clone(), target: target.clone() })?;
            parent[i] = Some(p);
        }
    }

    let band = config.priority_band;
    let mut lifted = vec![false; ranked.len()];
    for start in 0..ranked.len() {
        let mut visited = HashSet::from([start]);
        let mut cursor = parent[start];
        while let Some(p) = cursor {
            if !visited.insert(p) {
                return Err(TriageError::CyclicAttachment(ranked[start].item_id.clone()));
            }
            if ranked[p].priority >= band {
                lifted[start] = true;
            }
            cursor = parent[p];
        }
    }

    let mut out: Vec<_> = ranked
        .into_iter()
        .zip(lifted)
        .map(|(mut item, lift)| {
            if lift && item.priority < band {
                item.priority = band;
            }
            item
        })
        .collect();
    order_ranked(&mut out);
    Ok(out)
}

/// Identifies one hit of one item.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HitRef {
    pub item_id: String,
    pub scanner_id: String,
    pub location: Location,
}

impl HitRef {
    pub fn of(item_id: &str, hit: &ArtifactHit) -> Self {
        Self { item_id: item_id.to_string(), scanner_id: hit.scanner_id.clone(), location: hit.location.clone() }
    }
}

impl fmt::Display for HitRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.item_id, self.scanner_id, self.location)
    }
}

impl FromStr for HitRef {
    type Err = String;

    /// `item|scanner|location`, as printed by `Display`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, '|');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(item), Some(scanner), Some(loc)) if !item.is_empty() && !scanner.is_empty() => {
                Ok(Self { item_id: item.to_string(), scanner_id: scanner.to_string(), location: loc.parse()? })
            }
            _ => Err(format!("bad hit reference `{s}`")),
        }
    }
}

/// One scanner run recorded against an item.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SearchRecord {
    pub scanner_id: String,
    pub config_digest: String,
    /// Why the scanner could not look at this kind of source, if it could
    /// not. The search still counts as run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub not_applicable: Option<String>,
}

/// Scanner results for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub item_id: String,
    pub searches_run: Vec<SearchRecord>,
    pub hits: Vec<ArtifactHit>,
    /// Present once the encryption scanner has run.
    pub encryption: Option<EncryptionFindings>,
    /// Why the member and investigator expect artifacts on this item.
    #[serde(default)]
    pub reasoning: Option<String>,
}

impl Assessment {
    pub fn new(item_id: impl Into<String>) -> Self {
        Self { item_id: item_id.into(), searches_run: Vec::new(), hits: Vec::new(), encryption: None, reasoning: None }
    }

    /// Profile scanners with no search record.
    pub fn missing_scanners(&self, profile: &SearchProfile) -> Vec<String> {
        profile
            .scanners
            .iter()
            .map(|s| s.id())
            .filter(|id| !self.searches_run.iter().any(|r| &r.scanner_id == id))
            .collect()
    }
}

text_enum!(ChecklistQuestion {
    EncryptionSignaturesChecked => "encryption_signatures_checked",
    EncryptionProgramsChecked => "encryption_programs_checked",
    PrioritizationReasoningRecorded => "prioritization_reasoning_recorded",
});

text_enum!(Answer {
    Yes => "yes",
    No => "no",
    NotPerformed => "not_performed",
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistRow {
    pub question: ChecklistQuestion,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// What was considered before concluding that an item holds nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistResult {
    pub rows: Vec<ChecklistRow>,
}

impl ChecklistResult {
    pub fn answer(&self, question: ChecklistQuestion) -> Answer {
        self.rows.iter().find(|r| r.question == question).map_or(Answer::NotPerformed, |r| r.answer)
    }

    /// Encryption rows that were never performed. These block a
    /// `does_not_meet` decision.
    pub fn blocking_rows(&self) -> Vec<ChecklistQuestion> {
        self.rows
            .iter()
            .filter(|r| {
                r.answer == Answer::NotPerformed && r.question != ChecklistQuestion::PrioritizationReasoningRecorded
            })
            .map(|r| r.question)
            .collect()
    }

    pub fn all_yes(&self) -> bool {
        self.rows.iter().all(|r| r.answer == Answer::Yes)
    }
}

/// Builds the absence-of-evidence checklist. `item` is `None` for a case
/// with nothing assessed.
pub fn absence_checklist<S: Real>(
    item: Option<&EvidenceItem<S>>,
    findings: Option<&EncryptionFindings>,
    reasoning: Option<&str>,
) -> ChecklistResult {
    let signatures = match findings {
        Some(f) => ChecklistRow {
            question: ChecklistQuestion::EncryptionSignaturesChecked,
            answer: Answer::Yes,
            detail: Some(format!("{} volume signature(s) found", f.fde_signatures.len())),
        },
        None => ChecklistRow {
            question: ChecklistQuestion::EncryptionSignaturesChecked,
            answer: Answer::NotPerformed,
            detail: None,
        },
    };
    let programs = match findings {
        Some(f) => ChecklistRow {
            question: ChecklistQuestion::EncryptionProgramsChecked,
            answer: Answer::Yes,
            detail: Some(format!("{} encryption program(s) found", f.suspect_programs.len())),
        },
        None => ChecklistRow {
            question: ChecklistQuestion::EncryptionProgramsChecked,
            answer: Answer::NotPerformed,
            detail: None,
        },
    };
    let reasoning = match (item, reasoning.map(str::trim).filter(|r| !r.is_empty())) {
        (Some(_), Some(note)) => ChecklistRow {
            question: ChecklistQuestion::PrioritizationReasoningRecorded,
            answer: Answer::Yes,
            detail: Some(note.to_string()),
        },
        (Some(item), None) => ChecklistRow {
            question: ChecklistQuestion::PrioritizationReasoningRecorded,
            answer: Answer::No,
            detail: Some(format!("priority {:.3}", item.priority.as_f64())),
        },
        (None, _) => ChecklistRow {
            question: ChecklistQuestion::PrioritizationReasoningRecorded,
            answer: Answer::NotPerformed,
            detail: None,
        },
    };
    ChecklistResult { rows: vec![signatures, programs, reasoning] }
}

text_enum!(Decision {
    Meets => "meets",
    DoesNotMeet => "does_not_meet",
    ForwardDespiteNoFindings => "forward_despite_no_findings",
});

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Hit(HitRef),
    Checklist(ChecklistQuestion),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    pub item_id: String,
    pub decision: Decision,
    pub basis: Vec<Basis>,
    pub decided_by: String,
    pub decided_at: DateTime<Utc>,
}

/// Decides whether an assessed item goes to the laboratory.
///
/// * `meets` when any hit has a profile target kind; every such hit is
///   cited.
/// * otherwise `forward_despite_no_findings` when encryption was indicated
///   or the item scores at or above the forward cutoff, citing the
///   checklist rows.
/// * otherwise `does_not_meet`, which requires the encryption rows of the
///   checklist to have been performed.
pub fn evaluate_threshold<S: Real>(
    assessment: &Assessment,
    item: &EvidenceItem<S>,
    profile: &SearchProfile,
    config: &TriageConfig<S>,
    decided_by: &str,
) -> Result<ThresholdDecision, TriageError> {
    let missing = assessment.missing_scanners(profile);
    if !missing.is_empty() {
        return Err(TriageError::AssessmentIncomplete { item: item.item_id.clone(), missing });
    }
    let decide = |decision, basis| ThresholdDecision {
        item_id: item.item_id.clone(),
        decision,
        basis,
        decided_by: decided_by.to_string(),
        decided_at: Utc::now(),
    };

    let mut targets: Vec<Basis> = assessment
        .hits
        .iter()
        .filter(|h| profile.is_threshold_target(h.kind))
        .map(|h| Basis::Hit(HitRef::of(&item.item_id, h)))
        .collect();
    if !targets.is_empty() {
        targets.sort();
        return Ok(decide(Decision::Meets, targets));
    }

    let mut grounds = Vec::new();
    if let Some(f) = &assessment.encryption {
        if !f.fde_signatures.is_empty() {
            grounds.push(Basis::Checklist(ChecklistQuestion::EncryptionSignaturesChecked));
        }
        if !f.suspect_programs.is_empty() {
            grounds.push(Basis::Checklist(ChecklistQuestion::EncryptionProgramsChecked));
        }
        debug_assert_eq!(grounds.is_empty(), f.summary == EncryptionSummary::None);
    }
    if item.priority >= config.forward_cutoff {
        grounds.push(Basis::Checklist(ChecklistQuestion::PrioritizationReasoningRecorded));
    }
    if !grounds.is_empty() {
        return Ok(decide(Decision::ForwardDespiteNoFindings, grounds));
    }

    let checklist = absence_checklist(Some(item), assessment.encryption.as_ref(), assessment.reasoning.as_deref());
    let blocking = checklist.blocking_rows();
    if !blocking.is_empty() {
        return Err(TriageError::ChecklistIncomplete {
            item: item.item_id.clone(),
            rows: blocking.iter().map(|q| q.as_str().to_string()).collect(),
        });
    }
    Ok(decide(
        Decision::DoesNotMeet,
        vec![
            Basis::Checklist(ChecklistQuestion::EncryptionSignaturesChecked),
            Basis::Checklist(ChecklistQuestion::EncryptionProgramsChecked),
        ],
    ))
}
