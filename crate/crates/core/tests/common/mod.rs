//! Fixtures and the end-to-end checks shared by the acceptance runner and
//! the per-module integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dft_core::backlog::{compare_disciplines, simulate, Severity};
use dft_core::coordinator::{Coordinator, CoordinatorConfig, District, FixedClock, MemberRecord, Period, RatioSource};
use dft_core::integrity::{compute_manifest, verify_manifest, EvidenceHandle, SourceKind};
use dft_core::profiles::{load_profile, CrimeType, ProfileSource};
use dft_core::scanners::{
    extract_card_numbers, luhn_check, ArtifactHit, ArtifactKind, EncryptionFindings, FdeSignature, Location,
};
use dft_core::session::{CaseDescription, Workspace};
use dft_core::triage::{
    evaluate_threshold, propagate_attachment_priority, rank_evidence, Assessment, Basis, ChecklistQuestion, Decision,
    DeviceClass, HitRef, OwnerPrior, OwnerRelation, SearchRecord,
};
use dft_core::{EvidenceItem, SimConfig, TriageConfig};

pub type Check = Result<String, String>;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration, what: &str) -> Result<Duration, String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("{what} took {took:.2?}, limit {limit:?}"))?;
    Ok(took)
}

/// Luhn validity found by trying all ten check digits: exactly one makes
/// the doubled-digit sum a multiple of ten.
pub fn luhn_oracle(s: &str) -> bool {
    const DOUBLED: [u32; 10] = [0, 2, 4, 6, 8, 1, 3, 5, 7, 9];
    let digits: Vec<u32> = s.bytes().map(|b| u32::from(b - b'0')).collect();
    let (payload, check) = digits.split_at(digits.len() - 1);
    let payload_sum: u32 =
        payload.iter().rev().enumerate().map(|(i, &d)| if i % 2 == 0 { DOUBLED[d as usize] } else { d }).sum();
    let good = (0..10u32).filter(|c| (payload_sum + c).is_multiple_of(10)).collect::<Vec<_>>();
    good == [check[0]]
}

pub fn random_pan(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut s: String = (0..len - 1)
        .map(|i| char::from(b'0' + if i == 0 { rng.random_range(1..10) } else { rng.random_range(0..10) }))
        .collect();
    let c = (0..10).find(|c| luhn_oracle(&format!("{s}{c}"))).unwrap();
    s.push(char::from(b'0' + c));
    s
}

pub fn luhn_equivalence() -> Check {
    let started = Instant::now();
    let mut buf = String::with_capacity(6);
    for n in 0..1_000_000u32 {
        buf.clear();
        use std::fmt::Write;
        write!(buf, "{n:06}").unwrap();
        let got = luhn_check(&buf).map_err(|e| format!("{buf}: {e}"))?;
        ensure(got == luhn_oracle(&buf), || format!("disagree on {buf}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let len = rng.random_range(13..=19);
        let s: String = (0..len).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect();
        ensure(luhn_check(&s).unwrap() == luhn_oracle(&s), || format!("disagree on {s}"))?;
    }
    let took = within(started, Duration::from_secs(5), "luhn")?;
    Ok(format!("1010000 strings agree in {took:.2?}"))
}

/// Random text with planted card numbers; returns the bytes and each
/// planted `(offset, pan)`.
pub fn planted_corpus(seed: u64, size: usize, plants: usize) -> (Vec<u8>, Vec<(u64, String)>) {
    // Digit-heavy so that random Luhn-valid runs occur too.
    const NOISE: &[u8] = b"abcdefghijklmnopqrstuvwxyz .,;:\n-0123456789012345678901234567890123456789";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes: Vec<u8> = (0..size).map(|_| NOISE[rng.random_range(0..NOISE.len())]).collect();
    let mut planted = Vec::new();
    let stride = size / plants;
    for i in 0..plants {
        let len = rng.random_range(13..=19);
        let pan = random_pan(&mut rng, len);
        let at = i * stride + rng.random_range(8..stride - pan.len() - 8);
        bytes[at - 1] = b'|';
        bytes[at..at + pan.len()].copy_from_slice(pan.as_bytes());
        bytes[at + pan.len()] = b'|';
        planted.push((at as u64, pan));
    }
    (bytes, planted)
}

pub fn planted_pan_recall() -> Check {
    let (bytes, planted) = planted_corpus(11, 10 << 20, 50);
    let handle = EvidenceHandle::from_bytes("corpus", SourceKind::RawImage, bytes.clone());
    let started = Instant::now();
    let hits = extract_card_numbers(&handle).map_err(|e| e.to_string())?;
    let took = within(started, Duration::from_secs(10), "scan")?;
    for (at, pan) in &planted {
        let found =
            hits.iter().any(|h| &h.pan == pan && h.occurrences.iter().any(|o| o.location == Location::Offset(*at)));
        ensure(found, || format!("planted {pan} at {at} not recovered"))?;
    }
    let mut extra = 0;
    for h in &hits {
        for o in &h.occurrences {
            let Location::Offset(at) = o.location else { return Err(format!("{} has a non-offset location", h.pan)) };
            let raw = &bytes[at as usize..(at + o.length) as usize];
            let digits: String = raw.iter().filter(|b| b.is_ascii_digit()).map(|&b| char::from(b)).collect();
            let separators_ok = raw.iter().all(|b| b.is_ascii_digit() || *b == b' ' || *b == b'-');
            ensure(
                separators_ok && digits == h.pan && (13..=19).contains(&digits.len()) && luhn_oracle(&digits),
                || format!("hit {} at {at} is not a Luhn-valid digit run", h.pan),
            )?;
            if !planted.iter().any(|(p, _)| *p == at) {
                extra += 1;
            }
        }
    }
    Ok(format!("50/50 planted recovered, {extra} other valid runs confirmed, scan {took:.2?}"))
}

/// A small seized-evidence fixture: a directory tree and a raw image.
pub fn evidence_fixture(dir: &Path) -> PathBuf {
    let tree = dir.join("laptop");
    fs::create_dir_all(tree.join("Pictures")).unwrap();
    fs::create_dir_all(tree.join("var/log")).unwrap();
    fs::write(tree.join("Pictures/holiday.jpg"), [0xFF, 0xD8, 0xFF, 0xE0, 0, 0x10, b'J', b'F', b'I', b'F']).unwrap();
    fs::write(tree.join("Pictures/invoice.txt"), [0xFF, 0xD8, 0xFF, 0xE1, 0, 0x10]).unwrap();
    fs::write(
        tree.join("notes.txt"),
        "cards: 4111 1111 1111 1111 and 5500-0000-0000-0004\ncontact fence@example.net\nnot a card 1234567890123\n",
    )
    .unwrap();
    fs::write(
        tree.join("var/log/kern.log"),
        "2015-03-02T10:11:12+00:00 host kernel: usb 1-1: New USB device found, idVendor=0781, idProduct=5567\n\
         2015-03-02T10:11:12+00:00 host kernel: usb 1-1: SerialNumber: 4C530001230517115083\n",
    )
    .unwrap();
    let mut image = vec![0u8; 64 * 1024];
    image[512..518].copy_from_slice(b"LUKS\xba\xbe");
    let card = b"4012888888881881";
    image[4096..4096 + card.len()].copy_from_slice(card);
    fs::write(dir.join("usb.img"), image).unwrap();

    let case = r#"
case_id = "case-7"
dft_file_number = "DFT-2015-000007"
member_id = "m-07"
investigation_id = "inv-7"
profile = "fraud"
notes = "seized at the suspect's residence"

[[items]]
item_id = "laptop"
description = "suspect laptop, logical copy"
path = "laptop"
kind = "directory_tree"
owner_relation = "suspect"
owner_prior = "relevant_record"
device_class = "computer"
reasoning = "suspect's own computer"

[[items]]
item_id = "usb"
description = "thumb drive found beside the laptop"
path = "usb.img"
kind = "raw_image"
owner_relation = "unknown"
owner_prior = "unknown"
device_class = "external_storage"
attached_to = "laptop"
"#;
    fs::write(dir.join("case.toml"), case).unwrap();
    dir.join("case.toml")
}

fn full_run(case: &CaseDescription, ws_dir: &Path) -> Result<(Vec<(String, String)>, String), String> {
    let ws = Workspace::create(ws_dir, case).map_err(|e| e.to_string())?;
    let manifests = ws.open_all().map_err(|e| e.to_string())?;
    ws.scan_all().map_err(|e| e.to_string())?;
    ws.rank().map_err(|e| e.to_string())?;
    ws.threshold_all().map_err(|e| e.to_string())?;
    let report = ws.build_report().map_err(|e| e.to_string())?;
    let verified = ws.verify().map_err(|e| e.to_string())?;
    ensure(verified.iter().all(|(_, r)| r.is_ok()), || format!("verify after run: {verified:?}"))?;
    Ok((manifests.into_iter().map(|(id, m)| (id, m.to_text())).collect(), report.core_text()))
}

pub fn repeatability() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let case = CaseDescription::load(&evidence_fixture(dir.path())).map_err(|e| e.to_string())?;
    let (m1, r1) = full_run(&case, &dir.path().join("run-1"))?;
    let (m2, r2) = full_run(&case, &dir.path().join("run-2"))?;
    ensure(m1 == m2, || "manifests differ between runs".into())?;
    ensure(r1 == r2, || "report cores differ between runs".into())?;
    for name in ["manifests/laptop.manifest", "manifests/usb.manifest", "hits/laptop.json", "ranking.tsv"] {
        let a = fs::read(dir.path().join("run-1").join(name)).map_err(|e| e.to_string())?;
        let b = fs::read(dir.path().join("run-2").join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} manifests and a {} byte report core identical; verify ok after each run", m1.len(), r1.len()))
}

pub fn mutation_sensitivity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let original: Vec<u8> = (0..256 * 1024).map(|_| rng.random()).collect();
    let manifest = compute_manifest(&EvidenceHandle::from_bytes("img", SourceKind::RawImage, original.clone()))
        .map_err(|e| e.to_string())?;
    for i in 0..1000 {
        let mut bytes = original.clone();
        let at = rng.random_range(0..bytes.len());
        bytes[at] ^= rng.random_range(1..=255u8);
        let handle = EvidenceHandle::from_bytes("img", SourceKind::RawImage, bytes);
        let result = verify_manifest(&handle, &manifest).map_err(|e| e.to_string())?;
        ensure(!result.mismatches().is_empty(), || format!("mutation {i} at byte {at} went unnoticed"))?;
    }
    Ok("1000/1000 single-byte mutations detected".into())
}

pub fn coordinator_at(day: (i32, u32, u32)) -> Coordinator {
    let clock = FixedClock::new(Utc.with_ymd_and_hms(day.0, day.1, day.2, 12, 0, 0).unwrap());
    let config = CoordinatorConfig::load(&fixtures().join("coordinator.toml")).unwrap();
    Coordinator::in_memory(config, Arc::new(clock))
}

pub fn file_number_law() -> Check {
    let coord = Arc::new(coordinator_at((2015, 6, 1)));
    let certified = NaiveDate::from_ymd_opt(2014, 1, 1);
    for m in 0..10 {
        coord
            .register_member(MemberRecord::new(format!("m{m}"), District::D1, certified))
            .map_err(|e| e.to_string())?;
    }
    let threads: Vec<_> = (0..10)
        .map(|m| {
            let coord = Arc::clone(&coord);
            std::thread::spawn(move || {
                (0..100)
                    .map(|i| coord.issue_file_number(&format!("m{m}"), &format!("inv-{m}-{i}")).unwrap().value)
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let mut values = BTreeSet::new();
    for t in threads {
        values.extend(t.join().map_err(|_| "issuing thread panicked".to_string())?);
    }
    ensure(values.len() == 1000, || format!("{} unique numbers from 1000 issuances", values.len()))?;
    let again = coord.issue_file_number("m3", "inv-3-42").map_err(|e| e.to_string())?;
    let twice = coord.issue_file_number("m3", "inv-3-42").map_err(|e| e.to_string())?;
    ensure(again.value == twice.value && values.contains(&again.value), || {
        "repeat issuance changed the number".into()
    })?;
    let a = coord.issue_file_number("m1", "shared").map_err(|e| e.to_string())?;
    let b = coord.issue_file_number("m2", "shared").map_err(|e| e.to_string())?;
    ensure(a.value != b.value, || "two members on one investigation share a number".into())?;
    Ok(format!("1000 unique, repeat idempotent ({}), shared investigation {} / {}", again.value, a.value, b.value))
}

pub fn table_fidelity() -> Check {
    let coord = coordinator_at((2015, 6, 1));
    for name in ["table1.csv", "table2.csv"] {
        let text = fs::read_to_string(fixtures().join(name)).map_err(|e| e.to_string())?;
        coord.ingest_historical(&text).map_err(|e| e.to_string())?;
        let exported = if name == "table1.csv" { coord.export_locations() } else { coord.export_years() };
        ensure(exported.as_deref() == Some(text.as_str()), || format!("{name} export differs from input"))?;
    }
    let m = coord.program_metrics(Period::All).map_err(|e| e.to_string())?;
    let row = m.row(2014).ok_or("no 2014 row")?;
    let got = (row.dft_files, row.dcft_members, row.dmft_members, row.tcu_files);
    ensure(got == (409, 118, 84, 329), || format!("2014 row reads {got:?}"))?;
    let share = m.backlog_dft_share.ok_or("no backlog share")?;
    ensure((share - 30.0 / 58.0).abs() < 1e-4 && (share - 0.5172).abs() < 1e-4, || format!("share {share}"))?;
    ensure(
        m.exhibit_reduction_ratio == Some(0.75) && m.exhibit_reduction_source == Some(RatioSource::Configured),
        || format!("reduction {:?} from {:?}", m.exhibit_reduction_ratio, m.exhibit_reduction_source),
    )?;
    Ok(format!("tables round-trip; 2014 = {got:?}; share {share:.4}; reduction 0.75 configured"))
}

pub fn prioritization_direction() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let trials = 10_000;
    for t in 0..trials {
        let mut rel: Vec<f64> = (0..4).map(|_| rng.random()).collect();
        rel.sort_by(|a, b| b.total_cmp(a));
        if rel.windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        let mut cfg = TriageConfig::default();
        let w = &mut cfg.weights;
        (w.owner_relation.suspect, w.owner_relation.associate, w.owner_relation.unknown, w.owner_relation.unrelated) =
            (rel[0], rel[1], rel[2], rel[3]);
        (w.owner_prior.relevant_record, w.owner_prior.unknown, w.owner_prior.none) =
            (rng.random(), rng.random(), rng.random());
        (w.device_class.computer, w.device_class.external_storage, w.device_class.phone, w.device_class.other) =
            (rng.random(), rng.random(), rng.random(), rng.random());
        let prior = [OwnerPrior::RelevantRecord, OwnerPrior::Unknown, OwnerPrior::None][rng.random_range(0..3)];
        // "a" sorts first, so a tie would put the unrelated computer on top.
        let items = vec![
            EvidenceItem::new("a-roommate", OwnerRelation::Unrelated, prior, DeviceClass::Computer),
            EvidenceItem::new("b-suspect", OwnerRelation::Suspect, prior, DeviceClass::Computer),
        ];
        let ranked = rank_evidence(items, &cfg).map_err(|e| e.to_string())?;
        ensure(ranked[0].item_id == "b-suspect" && ranked[0].priority > ranked[1].priority, || {
            format!("trial {t}: unrelated computer ranked level with or above suspect's")
        })?;
    }
    let cfg = TriageConfig::default();
    let items = vec![
        EvidenceItem::new("laptop", OwnerRelation::Suspect, OwnerPrior::RelevantRecord, DeviceClass::Computer),
        EvidenceItem::new("usb-a", OwnerRelation::Unknown, OwnerPrior::Unknown, DeviceClass::ExternalStorage),
        EvidenceItem::new("usb-b", OwnerRelation::Unknown, OwnerPrior::Unknown, DeviceClass::ExternalStorage)
            .attached_to("laptop"),
    ];
    let out = propagate_attachment_priority(rank_evidence(items, &cfg).unwrap(), &cfg).map_err(|e| e.to_string())?;
    let pos = |id: &str| out.iter().position(|i| i.item_id == id).unwrap();
    ensure(pos("usb-b") < pos("usb-a") && out[pos("usb-b")].priority > out[pos("usb-a")].priority, || {
        "linked USB not lifted above unlinked twin".into()
    })?;
    Ok(format!("suspect strictly ahead in {trials} random ordinal weightings; linked USB lifted"))
}

fn threshold_hit(kind: ArtifactKind, at: u64) -> ArtifactHit {
    let scanner = match kind {
        ArtifactKind::CardNumber => "cards",
        ArtifactKind::Email => "pattern:email",
        _ => "devices",
    };
    let location = if kind == ArtifactKind::AttachedDevice { Location::Record(at) } else { Location::Offset(at) };
    ArtifactHit {
        kind,
        value: format!("{kind}-{at}"),
        location,
        length: 1,
        scanner_id: scanner.into(),
        flagged: false,
        note: None,
    }
}

pub fn threshold_soundness() -> Check {
    let profile = load_profile(&ProfileSource::BuiltIn(CrimeType::Fraud)).map_err(|e| e.to_string())?;
    let cfg = TriageConfig::default();
    let kinds = [ArtifactKind::CardNumber, ArtifactKind::Email, ArtifactKind::AttachedDevice];
    let mut cases = 0;
    for len in 0..=3u32 {
        for code in 0..3usize.pow(len) {
            let seq: Vec<ArtifactKind> = (0..len).map(|i| kinds[code / 3usize.pow(i) % 3]).collect();
            for encrypted in [false, true] {
                for high in [false, true] {
                    let mut a = Assessment::new("item");
                    a.searches_run = profile
                        .scanners
                        .iter()
                        .map(|s| SearchRecord {
                            scanner_id: s.id(),
                            config_digest: s.config_digest(),
                            not_applicable: None,
                        })
                        .collect();
                    a.hits = seq.iter().enumerate().map(|(i, &k)| threshold_hit(k, i as u64)).collect();
                    let sigs = if encrypted {
                        vec![FdeSignature { name: "luks".into(), location: Location::Offset(0) }]
                    } else {
                        vec![]
                    };
                    a.encryption = Some(EncryptionFindings::from_parts(sigs, vec![]));
                    let mut item =
                        EvidenceItem::new("item", OwnerRelation::Unknown, OwnerPrior::None, DeviceClass::Computer);
                    item.priority = if high { 0.9 } else { 0.3 };
                    let got = evaluate_threshold(&a, &item, &profile, &cfg, "m").map_err(|e| e.to_string())?;

                    // The table: target hits meet; else encryption or high
                    // priority forwards; else does not meet.
                    let targets: Vec<Basis> = a
                        .hits
                        .iter()
                        .filter(|h| h.kind == ArtifactKind::CardNumber)
                        .map(|h| Basis::Hit(HitRef::of("item", h)))
                        .collect::<BTreeSet<_>>()
                        .into_iter()
                        .collect();
                    let (want, basis) = if !targets.is_empty() {
                        (Decision::Meets, targets)
                    } else if encrypted || high {
                        let mut b = Vec::new();
                        if encrypted {
                            b.push(Basis::Checklist(ChecklistQuestion::EncryptionSignaturesChecked));
                        }
                        if high {
                            b.push(Basis::Checklist(ChecklistQuestion::PrioritizationReasoningRecorded));
                        }
                        (Decision::ForwardDespiteNoFindings, b)
                    } else {
                        (
                            Decision::DoesNotMeet,
                            vec![
                                Basis::Checklist(ChecklistQuestion::EncryptionSignaturesChecked),
                                Basis::Checklist(ChecklistQuestion::EncryptionProgramsChecked),
                            ],
                        )
                    };
                    ensure(got.decision == want && got.basis == basis, || {
                        format!("{seq:?} encrypted={encrypted} high={high}: got {} {:?}", got.decision, got.basis)
                    })?;
                    cases += 1;
                }
            }
        }
    }
    ensure(cases == 160, || format!("enumerated {cases} cases"))?;
    Ok("160/160 enumerated cases match the decision table".into())
}

pub fn overload(seed: u64) -> SimConfig {
    SimConfig {
        arrival_rate: 2.0,
        analysts: 4,
        exhibits_per_case: 3.0,
        service_days: 1.0,
        horizon: 365.0,
        seed,
        ..SimConfig::default()
    }
}

pub fn backlog_direction() -> Check {
    let mut lower = 0;
    let mut fraud_ok = 0;
    for seed in 0..20 {
        let base = overload(seed);
        ensure(base.baseline_utilization() > 1.0, || "baseline is not overloaded".into())?;
        let without = simulate(&base).map_err(|e| e.to_string())?;
        let with = simulate(&SimConfig { dft_enabled: true, exhibit_reduction: 0.75, ..base.clone() })
            .map_err(|e| e.to_string())?;
        if with.final_backlog < without.final_backlog {
            lower += 1;
        }
        let cmp = compare_disciplines(&base).map_err(|e| e.to_string())?;
        let (fifo, sev) = cmp.waits(Severity::Fraud).ok_or("no fraud cases")?;
        if sev >= fifo {
            fraud_ok += 1;
        }
    }
    ensure(lower == 20, || format!("DFT lowered final backlog for {lower}/20 seeds"))?;
    ensure(fraud_ok == 20, || format!("fraud waited at least as long under severity for {fraud_ok}/20 seeds"))?;

    // Desk scale: about 10^4 cases over the horizon.
    let big = SimConfig { arrival_rate: 30.0, analysts: 60, horizon: 334.0, seed: 1, ..SimConfig::default() };
    let mut slowest = Duration::ZERO;
    for cfg in [big.clone(), SimConfig { dft_enabled: true, ..big.clone() }] {
        let started = Instant::now();
        let t = simulate(&cfg).map_err(|e| e.to_string())?;
        let cmp = compare_disciplines(&cfg).map_err(|e| e.to_string())?;
        slowest = slowest.max(within(started, Duration::from_secs(5), "desk-scale run")?);
        ensure(t.arrivals + t.diverted >= 9_000, || format!("only {} cases generated", t.arrivals + t.diverted))?;
        drop(cmp);
    }
    Ok(format!("DFT lower 20/20, fraud wait severity >= FIFO 20/20, 10^4-case run {slowest:.2?}"))
}
