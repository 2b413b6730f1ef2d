//! Crime-type search profiles.
//!
//! A profile names the scanners to run for a crime type, the hits to surface
//! first, and the artifact kinds whose presence meets the forwarding
//! threshold. Profiles are plain text so they can be edited without a
//! rebuild:
//!
//! ```text
//! # comment
//! crime_type = fraud
//!
//! [scanners]
//! cards
//! pattern:email<TAB>[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}
//! encryption
//! devices
//! media
//!
//! [salience]
//! card_number<TAB>any
//! media_file<TAB>contains=passport
//! media_file<TAB>note
//! card_number<TAB>bank_code=451234
//!
//! [threshold]
//! card_number
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scanners::{ArtifactHit, ArtifactKind, NamedPattern, PatternSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrimeType {
    Fraud,
    IdentityTheft,
    ChildExploitation,
    StolenProperty,
    Generic,
}

impl CrimeType {
    pub const ALL: [CrimeType; 5] =
        [Self::Fraud, Self::IdentityTheft, Self::ChildExploitation, Self::StolenProperty, Self::Generic];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fraud => "fraud",
            Self::IdentityTheft => "identity_theft",
            Self::ChildExploitation => "child_exploitation",
            Self::StolenProperty => "stolen_property",
            Self::Generic => "generic",
        }
    }

    fn builtin_text(self) -> &'static str {
        match self {
            Self::Fraud => include_str!("../profiles/fraud.profile"),
            Self::IdentityTheft => include_str!("../profiles/identity_theft.profile"),
            Self::ChildExploitation => include_str!("../profiles/child_exploitation.profile"),
            Self::StolenProperty => include_str!("../profiles/stolen_property.profile"),
            Self::Generic => include_str!("../profiles/generic.profile"),
        }
    }
}

impl fmt::Display for CrimeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CrimeType {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| ProfileError::UnknownCrimeType(s.to_string()))
    }
}

/// One scanner in a profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScannerSpec {
    Cards,
    Media,
    Encryption,
    Devices,
    Pattern(NamedPattern),
}

impl ScannerSpec {
    pub fn id(&self) -> String {
        match self {
            Self::Cards => "cards".into(),
            Self::Media => "media".into(),
            Self::Encryption => "encryption".into(),
            Self::Devices => "devices".into(),
            Self::Pattern(p) => p.scanner_id(),
        }
    }

    /// Configuration text that, together with the id, determines the
    /// scanner's output.
    pub fn config(&self) -> &str {
        match self {
            Self::Pattern(p) => &p.pattern,
            _ => "",
        }
    }

    /// SHA-256 over `id\nconfig`, recorded in the search listing.
    pub fn config_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.id().as_bytes());
        hasher.update(b"\n");
        hasher.update(self.config().as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn produces(&self) -> ArtifactKind {
        match self {
            Self::Cards => ArtifactKind::CardNumber,
            Self::Media => ArtifactKind::MediaFile,
            Self::Encryption => ArtifactKind::EncryptionIndicator,
            Self::Devices => ArtifactKind::AttachedDevice,
            Self::Pattern(p) => p.kind(),
        }
    }

    fn parse(line: &str) -> Result<Self, String> {
        let (head, config) = match line.split_once('\t') {
            Some((h, c)) => (h.trim(), Some(c)),
            None => (line.trim(), None),
        };
        let simple = |spec: ScannerSpec| match config {
            Some(c) if !c.trim().is_empty() => Err(format!("scanner `{head}` takes no configuration")),
            _ => Ok(spec),
        };
        match head {
            "cards" => simple(Self::Cards),
            "media" => simple(Self::Media),
            "encryption" => simple(Self::Encryption),
            "devices" => simple(Self::Devices),
            other => match other.strip_prefix("pattern:") {
                Some(name) => match config {
                    Some(pattern) if !pattern.is_empty() => Ok(Self::Pattern(NamedPattern::new(name, pattern))),
                    _ => Err(format!("pattern scanner `{name}` needs a pattern after a tab")),
                },
                None => Err(format!("unknown scanner `{other}`")),
            },
        }
    }

    fn to_line(&self) -> String {
        match self {
            Self::Pattern(p) => format!("{}\t{}", self.id(), p.pattern),
            _ => self.id(),
        }
    }
}

/// Marks hits of one kind to surface first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SalienceRule {
    pub kind: ArtifactKind,
    pub predicate: SaliencePredicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencePredicate {
    Any,
    /// Case-insensitive substring of the value.
    Contains(String),
    /// The scanner attached a note (e.g. a signature mismatch).
    HasNote,
    /// Card numbers whose value starts with this prefix.
    BankCode(String),
}

impl SaliencePredicate {
    fn parse(text: &str) -> Result<Self, String> {
        let text = text.trim();
        if text == "any" {
            Ok(Self::Any)
        } else if text == "note" {
            Ok(Self::HasNote)
        } else if let Some(s) = text.strip_prefix("contains=") {
            Ok(Self::Contains(s.to_ascii_lowercase()))
        } else if let Some(s) = text.strip_prefix("bank_code=") {
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
                return Err(format!("bank code `{s}` must be digits"));
            }
            Ok(Self::BankCode(s.to_string()))
        } else {
            Err(format!("unknown salience predicate `{text}`"))
        }
    }

    fn to_text(&self) -> String {
        match self {
            Self::Any => "any".into(),
            Self::HasNote => "note".into(),
            Self::Contains(s) => format!("contains={s}"),
            Self::BankCode(s) => format!("bank_code={s}"),
        }
    }
}

impl SalienceRule {
    pub fn matches(&self, hit: &ArtifactHit) -> bool {
        if hit.kind != self.kind {
            return false;
        }
        match &self.predicate {
            SaliencePredicate::Any => true,
            SaliencePredicate::HasNote => hit.note.as_deref().is_some_and(|n| n.starts_with("mismatch")),
            SaliencePredicate::Contains(s) => hit.value.to_ascii_lowercase().contains(s.as_str()),
            SaliencePredicate::BankCode(prefix) => hit.value.starts_with(prefix.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchProfile {
    pub crime_type: CrimeType,
    pub scanners: Vec<ScannerSpec>,
    pub salience_rules: Vec<SalienceRule>,
    pub threshold_targets: Vec<ArtifactKind>,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("unknown crime type `{0}`")]
    UnknownCrimeType(String),
    #[error("invalid profile: {}", .0.join("; "))]
    InvalidProfile(Vec<String>),
    #[error("cannot read profile {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ProfileError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownCrimeType(_) => "unknown_crime_type",
            Self::InvalidProfile(_) => "invalid_profile",
            Self::Io { .. } => "io",
        }
    }
}

/// Where to load a profile from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProfileSource {
    BuiltIn(CrimeType),
    File(PathBuf),
}

impl ProfileSource {
    /// A crime-type name, or else a path to a profile file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ProfileError> {
        match name_or_path.parse::<CrimeType>() {
            Ok(crime) => Ok(Self::BuiltIn(crime)),
            Err(e) => {
                let path = Path::new(name_or_path);
                if path.is_file() {
                    Ok(Self::File(path.to_path_buf()))
                } else {
                    Err(e)
                }
            }
        }
    }
}

/// Loads and validates a profile.
pub fn load_profile(source: &ProfileSource) -> Result<SearchProfile, ProfileError> {
    let profile = match source {
        ProfileSource::BuiltIn(crime) => SearchProfile::parse(crime.builtin_text())?,
        ProfileSource::File(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|source| ProfileError::Io { path: path.clone(), source })?;
            SearchProfile::parse(&text)?
        }
    };
    let violations = validate_profile(&profile);
    if violations.is_empty() {
        Ok(profile)
    } else {
        Err(ProfileError::InvalidProfile(violations))
    }
}

/// Every violated profile invariant, described. Empty means valid.
pub fn validate_profile(profile: &SearchProfile) -> Vec<String> {
    let mut violations = Vec::new();
    if profile.scanners.is_empty() {
        violations.push("no scanners".to_string());
    }
    let mut seen = BTreeSet::new();
    for scanner in &profile.scanners {
        if !seen.insert(scanner.id()) {
            violations.push(format!("scanner `{}` listed twice", scanner.id()));
        }
        if let ScannerSpec::Pattern(p) = scanner {
            if let Err(e) = PatternSet::new(vec![p.clone()]).compile() {
                violations.push(e.to_string());
            }
        }
    }
    let producible: BTreeSet<ArtifactKind> = profile.scanners.iter().map(ScannerSpec::produces).collect();
    for target in &profile.threshold_targets {
        if !producible.contains(target) {
            violations.push(format!("threshold target `{target}` is not produced by any scanner"));
        }
    }
    violations
}

impl SearchProfile {
    pub fn parse(text: &str) -> Result<Self, ProfileError> {
        #[derive(PartialEq)]
        enum Section {
            Header,
            Scanners,
            Salience,
            Threshold,
        }
        let mut errors = Vec::new();
        let mut crime_type = None;
        let mut scanners = Vec::new();
        let mut salience_rules = Vec::new();
        let mut threshold_targets = Vec::new();
        let mut section = Section::Header;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            match trimmed {
                "[scanners]" => {
                    section = Section::Scanners;
                    continue;
                }
                "[salience]" => {
                    section = Section::Salience;
                    continue;
                }
                "[threshold]" => {
                    section = Section::Threshold;
                    continue;
                }
                _ => {}
            }
            let result: Result<(), String> = match section {
                Section::Header => match trimmed.split_once('=') {
                    Some((key, value)) if key.trim() == "crime_type" => {
                        value.trim().parse::<CrimeType>().map(|c| crime_type = Some(c)).map_err(|e| e.to_string())
                    }
                    _ => Err(format!("unexpected header line `{trimmed}`")),
                },
                // Keep the raw line: pattern text may carry meaningful spaces.
                Section::Scanners => ScannerSpec::parse(raw.trim_start()).map(|s| scanners.push(s)),
                Section::Salience => match trimmed.split_once('\t') {
                    Some((kind, pred)) => kind
                        .trim()
                        .parse::<ArtifactKind>()
                        .and_then(|kind| {
                            SaliencePredicate::parse(pred).map(|predicate| SalienceRule { kind, predicate })
                        })
                        .map(|rule| salience_rules.push(rule)),
                    None => Err("salience lines are `kind<TAB>predicate`".into()),
                },
                Section::Threshold => trimmed.parse::<ArtifactKind>().map(|k| threshold_targets.push(k)),
            };
            if let Err(e) = result {
                errors.push(format!("line {line_no}: {e}"));
            }
        }
        if crime_type.is_none() {
            errors.push("missing `crime_type = ...`".into());
        }
        if !errors.is_empty() {
            return Err(ProfileError::InvalidProfile(errors));
        }
        Ok(Self { crime_type: crime_type.unwrap(), scanners, salience_rules, threshold_targets })
    }

    /// Canonical text form, parseable by [`SearchProfile::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!("crime_type = {}\n\n[scanners]\n", self.crime_type);
        for s in &self.scanners {
            out.push_str(&s.to_line());
            out.push('\n');
        }
        out.push_str("\n[salience]\n");
        for r in &self.salience_rules {
            out.push_str(&format!("{}\t{}\n", r.kind, r.predicate.to_text()));
        }
        out.push_str("\n[threshold]\n");
        for t in &self.threshold_targets {
            out.push_str(t.as_str());
            out.push('\n');
        }
        out
    }

    pub fn is_salient(&self, hit: &ArtifactHit) -> bool {
        self.salience_rules.iter().any(|r| r.matches(hit))
    }

    pub fn is_threshold_target(&self, kind: ArtifactKind) -> bool {
        self.threshold_targets.contains(&kind)
    }

    /// Pattern scanners of this profile as one set.
    pub fn pattern_set(&self) -> PatternSet {
        PatternSet::new(
            self.scanners
                .iter()
                .filter_map(|s| match s {
                    ScannerSpec::Pattern(p) => Some(p.clone()),
                    _ => None,
                })
                .collect(),
        )
    }

    /// Orders hits so that salient ones come first, keeping relative order
    /// otherwise.
    pub fn salient_first(&self, hits: &mut [ArtifactHit]) {
        hits.sort_by_key(|h| !self.is_salient(h));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanners::Location;

    fn builtin(c: CrimeType) -> SearchProfile {
        load_profile(&ProfileSource::BuiltIn(c)).unwrap()
    }

    #[test]
    fn every_builtin_validates() {
        for c in CrimeType::ALL {
            let p = builtin(c);
            assert_eq!(p.crime_type, c);
            assert!(validate_profile(&p).is_empty(), "{c}");
        }
    }

    #[test]
    fn fraud_targets_cards() {
        let p = builtin(CrimeType::Fraud);
        assert!(p.scanners.contains(&ScannerSpec::Cards));
        assert!(p.threshold_targets.contains(&ArtifactKind::CardNumber));
    }

    #[test]
    fn child_exploitation_targets_media() {
        let p = builtin(CrimeType::ChildExploitation);
        assert!(p.scanners.contains(&ScannerSpec::Media));
        assert!(p.threshold_targets.contains(&ArtifactKind::MediaFile));
    }

    #[test]
    fn generic_runs_everything_and_decides_nothing() {
        let p = builtin(CrimeType::Generic);
        let produced: BTreeSet<_> = p.scanners.iter().map(ScannerSpec::produces).collect();
        for kind in [
            ArtifactKind::CardNumber,
            ArtifactKind::Email,
            ArtifactKind::MediaFile,
            ArtifactKind::EncryptionIndicator,
            ArtifactKind::AttachedDevice,
        ] {
            assert!(produced.contains(&kind), "{kind}");
        }
        assert!(p.threshold_targets.is_empty());
    }

    #[test]
    fn empty_scanners_rejected() {
        let p = SearchProfile {
            crime_type: CrimeType::Generic,
            scanners: vec![],
            salience_rules: vec![],
            threshold_targets: vec![],
        };
        assert_eq!(validate_profile(&p), vec!["no scanners".to_string()]);
    }

    #[test]
    fn unproducible_target_named() {
        let mut p = builtin(CrimeType::Fraud);
        p.threshold_targets.push(ArtifactKind::MediaFile);
        let v = validate_profile(&p);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("media_file"));
    }

    #[test]
    fn unknown_crime_type() {
        assert!(matches!("arson".parse::<CrimeType>(), Err(ProfileError::UnknownCrimeType(_))));
        assert!(matches!(ProfileSource::resolve("arson"), Err(ProfileError::UnknownCrimeType(_))));
    }

    #[test]
    fn text_round_trip() {
        for c in CrimeType::ALL {
            let p = builtin(c);
            assert_eq!(SearchProfile::parse(&p.to_text()).unwrap(), p);
        }
    }

    #[test]
    fn file_profiles_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.profile");
        std::fs::write(&path, "crime_type = fraud\n[scanners]\nmedia\n[threshold]\ncard_number\n").unwrap();
        match load_profile(&ProfileSource::resolve(path.to_str().unwrap()).unwrap()) {
            Err(ProfileError::InvalidProfile(v)) => assert!(v[0].contains("card_number")),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "crime_type = fraud\n[scanners]\nshredder\n").unwrap();
        assert!(matches!(load_profile(&ProfileSource::File(path)), Err(ProfileError::InvalidProfile(_))));
    }

    #[test]
    fn salience_rules_match() {
        let p = builtin(CrimeType::IdentityTheft);
        let mut photo = ArtifactHit {
            kind: ArtifactKind::MediaFile,
            value: "Pictures/Passport_scan.jpg".into(),
            location: Location::File { path: "Pictures/Passport_scan.jpg".into(), offset: 0 },
            length: 3,
            scanner_id: "media".into(),
            flagged: false,
            note: None,
        };
        assert!(p.is_salient(&photo));
        photo.value = "Pictures/beach.jpg".into();
        assert!(!p.is_salient(&photo));
    }
}
