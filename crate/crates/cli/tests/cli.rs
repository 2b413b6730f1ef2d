use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dft"))
        .args(args)
        .current_dir(dir)
        .env_remove("DFT_COORDINATOR")
        .env_remove("DFT_WORKSPACE")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn succeeds(dir: &Path, args: &[&str]) -> String {
    let o = dft(dir, args);
    assert!(o.status.success(), "dft {args:?} failed: {}", stderr(&o));
    stdout(&o)
}

/// The one error line of a failed command.
#[track_caller]
fn fails(dir: &Path, args: &[&str]) -> String {
    let o = dft(dir, args);
    assert!(!o.status.success(), "dft {args:?} should fail");
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err.trim_end().to_string()
}

/// Independent Luhn: the digit string with every check digit tried.
fn luhn_pan(rng: &mut ChaCha8Rng, len: usize) -> String {
    let body: String = (0..len - 1)
        .map(|i| char::from(b'0' + if i == 0 { rng.random_range(3..7) } else { rng.random_range(0..10) }))
        .collect();
    for c in 0..10u8 {
        let s = format!("{body}{c}");
        let sum: u32 = s
            .bytes()
            .rev()
            .enumerate()
            .map(|(i, b)| {
                let d = u32::from(b - b'0');
                if i % 2 == 1 {
                    let x = d * 2;
                    if x > 9 {
                        x - 9
                    } else {
                        x
                    }
                } else {
                    d
                }
            })
            .sum();
        if sum.is_multiple_of(10) {
            return s;
        }
    }
    unreachable!()
}

#[test]
fn scan_without_a_case_groups_planted_pans() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bytes: Vec<u8> = (0..200_000).map(|_| b"abcdef ghij\n.,"[rng.random_range(0..14)]).collect();
    let mut planted = BTreeSet::new();
    for i in 0..20 {
        let pan = luhn_pan(&mut rng, [16, 15, 13, 19][i % 4]);
        let at = 1000 + i * 9000;
        bytes[at..at + pan.len()].copy_from_slice(pan.as_bytes());
        planted.insert(pan);
    }
    fs::write(dir.path().join("img.raw"), &bytes).unwrap();

    let out = succeeds(dir.path(), &["scan", "--profile", "fraud", "--evidence", "img.raw", "--workspace", "ws"]);
    assert!(out.contains("img.cards.tsv"), "{out}");
    let cards = fs::read_to_string(dir.path().join("ws/hits/img.cards.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = cards.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let found: BTreeSet<String> = rows.iter().map(|r| r[1].to_string()).collect();
    assert_eq!(found, planted);
    let banks: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert!(banks.windows(2).all(|w| w[0] <= w[1]));
    assert!(rows.iter().all(|r| r[1].starts_with(r[0])));
}

fn write_case(dir: &Path, file_number: Option<&str>) -> PathBuf {
    let ev = dir.join("evidence");
    fs::create_dir_all(ev.join("laptop/docs")).unwrap();
    fs::write(ev.join("laptop/docs/ledger.txt"), "card 4111 1111 1111 1111 mailed to fence@example.net\n").unwrap();
    fs::write(ev.join("usb.raw"), vec![0u8; 8192]).unwrap();
    let number = file_number.map(|n| format!("dft_file_number = \"{n}\"\n")).unwrap_or_default();
    let text = format!(
        r#"case_id = "case-9"
{number}member_id = "m9"
investigation_id = "inv-9"
profile = "fraud"

[[items]]
item_id = "laptop"
path = "evidence/laptop"
kind = "directory_tree"
owner_relation = "suspect"
owner_prior = "relevant_record"
device_class = "computer"

[[items]]
item_id = "usb"
path = "evidence/usb.raw"
kind = "raw_image"
owner_relation = "unrelated"
owner_prior = "none"
device_class = "external_storage"
reasoning = "found in a shared drawer"
"#
    );
    fs::write(dir.join("case.toml"), text).unwrap();
    dir.join("case.toml")
}

fn workspace_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                if !["audit.log", "report.obsreport", "report.md"].contains(&rel.as_str()) {
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_run_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    write_case(dir.path(), Some("DFT-2015-000042"));
    let d = dir.path();
    fn with<'a>(cmd: &[&'a str]) -> Vec<&'a str> {
        [cmd, &["--case", "case.toml"][..]].concat()
    }

    let opened = succeeds(d, &with(&["open"]));
    assert!(opened.contains("workspaces/DFT-2015-000042"), "{opened}");
    let ws = d.join("workspaces/DFT-2015-000042");
    assert!(ws.join("manifests/laptop.manifest").is_file());

    succeeds(d, &with(&["scan"]));
    let ranked = succeeds(d, &with(&["rank"]));
    assert!(ranked.starts_with("1\tlaptop\t"), "{ranked}");

    let decided = succeeds(d, &with(&["threshold"]));
    assert!(decided.contains("laptop\tmeets\t"), "{decided}");
    assert!(decided.contains("usb\tdoes_not_meet\t"), "{decided}");
    assert!(decided.contains("  encryption_signatures_checked: yes"), "{decided}");

    let readable = succeeds(d, &with(&["report", "--format", "readable"]));
    assert!(readable.starts_with("# Observation Report"), "{readable}");
    assert!(readable.contains("fence@example.net"));
    assert!(ws.join("report.obsreport").is_file());

    assert_eq!(succeeds(d, &with(&["verify"])).trim(), "integrity: ok");

    // Rerunning every step reproduces the outputs.
    let before = workspace_files(&ws);
    for cmd in ["open", "scan", "rank", "threshold", "report"] {
        succeeds(d, &with(&[cmd]));
    }
    assert_eq!(workspace_files(&ws), before);
    let audit = fs::read_to_string(ws.join("audit.log")).unwrap();
    assert!(audit.lines().count() > 20);

    fs::write(d.join("evidence/laptop/docs/ledger.txt"), "tampered").unwrap();
    let err = fails(d, &with(&["verify"]));
    assert!(err.starts_with("error: integrity.integrity_violation:"), "{err}");
    let err = fails(d, &with(&["open"]));
    assert!(err.starts_with("error: workspace.manifest_changed:"), "{err}");
}

#[test]
fn errors_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = fails(d, &["frobnicate"]);
    assert!(err.starts_with("error: cli.unknown_command:"), "{err}");
    assert_eq!(dft(d, &["frobnicate"]).status.code(), Some(2));
    let err = fails(d, &["rank"]);
    assert!(err.starts_with("error: workspace.io:"), "{err}");
    let err = fails(d, &["scan", "--profile", "arson", "--evidence", "."]);
    assert!(err.starts_with("error: profiles."), "{err}");
    let err = fails(d, &["open"]);
    assert!(err.starts_with("error: cli.no_case:"), "{err}");
    let err = fails(d, &["metrics"]);
    assert!(err.starts_with("error: cli.no_coordinator:"), "{err}");

    write_case(d, Some("DFT-2015-000001"));
    succeeds(d, &["open", "--case", "case.toml"]);
    let err = fails(d, &["threshold", "--case", "case.toml"]);
    assert!(err.starts_with("error: workspace.missing_step:"), "{err}");
}

#[test]
fn simulate_and_local_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = succeeds(d, &["simulate", "--seed", "5"]);
    assert_eq!(a, succeeds(d, &["simulate", "--seed", "5"]));
    assert!(a.starts_with("day\tbacklog\n"));
    assert_eq!(a.lines().count(), 1 + 366);

    fs::write(
        d.join("sim.toml"),
        "horizon = 200.0\narrival_rate = 2.0\nanalysts = 4\nservice_days = 1.0\nexhibits_per_case = 3.0\n\
         discipline = \"fifo\"\ndft_enabled = false\ndft_threshold_pass = 0.5\nexhibit_reduction = 0.75\nseed = 1\n\
         [severity_mix]\nperson_crime = 0.3\nproperty = 0.4\nfraud = 0.3\n",
    )
    .unwrap();
    let cmp = succeeds(d, &["simulate", "--config", "sim.toml", "--compare"]);
    let wait = |name: &str| -> (f64, f64) {
        let cols: Vec<f64> = cmp
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap()
            .split('\t')
            .skip(1)
            .map(|x| x.parse().unwrap())
            .collect();
        (cols[0], cols[1])
    };
    let (fifo, sev) = wait("fraud");
    assert!(sev >= fifo, "{cmp}");
    let (fifo, sev) = wait("person_crime");
    assert!(sev <= fifo, "{cmp}");
    assert!(fails(d, &["simulate", "--config", "missing.toml"]).starts_with("error: cli.io:"));

    let table2 = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/table2.csv");
    let out = succeeds(d, &["metrics", "--table", table2.to_str().unwrap(), "--year", "2014"]);
    let m: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(m["rows"][0]["dft_files"], 409);
    assert_eq!(m["rows"][0]["tcu_files"], 329);
}

struct Service(Child, String);

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_service(dir: &Path) -> Service {
    let mut child = Command::new(env!("CARGO_BIN_EXE_dft"))
        .args(["serve", "--listen", "127.0.0.1:0", "--journal", "coord.journal"])
        .current_dir(dir)
        .env_remove("DFT_COORDINATOR")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("{line}")).to_string();
    Service(child, addr)
}

#[test]
fn file_numbers_and_submission_through_the_service() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let svc = start_service(d);
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let resp = agent
        .post(format!("{}/members", svc.1))
        .send_json(serde_json::json!({"member_id": "m9", "district": "HQ", "name": "", "station": "",
            "business_lines": ["DCFT"], "certified_on": "2012-01-01"}))
        .unwrap();
    assert_eq!(resp.status().as_u16(), 201);

    write_case(d, None);
    let run = |args: &[&str]| {
        let o = Command::new(env!("CARGO_BIN_EXE_dft"))
            .args(args)
            .current_dir(d)
            .env("DFT_COORDINATOR", &svc.1)
            .output()
            .unwrap();
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    let opened = run(&["open", "--case", "case.toml"]);
    let ws_line = opened.lines().find(|l| l.starts_with("workspace: ")).unwrap();
    let ws = ws_line.trim_start_matches("workspace: ").to_string();
    assert!(ws.contains("DFT-"), "{ws}");
    let ws_args = |cmd: &str| vec![cmd.to_string(), "--workspace".into(), ws.clone()];
    for cmd in ["scan", "rank", "threshold"] {
        run(&ws_args(cmd).iter().map(String::as_str).collect::<Vec<_>>());
    }
    let mut report = ws_args("report");
    report.push("--submit".into());
    run(&report.iter().map(String::as_str).collect::<Vec<_>>());

    let number = Path::new(&ws).file_name().unwrap().to_string_lossy().into_owned();
    let year: i32 = number[4..8].parse().unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&run(&["metrics", "--year", &year.to_string()])).unwrap();
    assert_eq!(metrics["recorded_files"][year.to_string()], 1);
    // Both items were assessed and one was forwarded.
    assert_eq!(metrics["exhibit_reduction_ratio"], 0.5);

    // Submitting the same report again is refused with the coordinator's code.
    let o = Command::new(env!("CARGO_BIN_EXE_dft"))
        .args(["report", "--submit", "--workspace", &ws])
        .current_dir(d)
        .env("DFT_COORDINATOR", &svc.1)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error: coordinator.duplicate_report_for_file_number:"), "{}", stderr(&o));
}
