//! `dft`: the field triage command line.
//!
//! Each subcommand runs one step on a case workspace and appends its audit
//! events there. Failures print one line, `error: <module>.<code>: <message>`,
//! and exit nonzero.

mod client;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use dft_core::backlog::{compare_disciplines, simulate, BacklogError, Severity};
use dft_core::coordinator::{Coordinator, CoordinatorConfig, CoordinatorError, Period, SystemClock};
use dft_core::integrity::SourceKind;
use dft_core::report::{canonical_json, render_report, ReportFormat};
use dft_core::session::{CaseDescription, CaseItem, SessionError, Workspace, READABLE_FILE, REPORT_FILE};
use dft_core::triage::{Basis, Decision, DeviceClass, OwnerPrior, OwnerRelation};
use dft_core::SimConfig;
use dft_service::{ApiError, ServiceState};

use client::Client;

/// Directory that holds one workspace per DFT file number unless
/// `--workspace` says otherwise.
const WORKSPACES: &str = "workspaces";
const DEFAULT_LISTEN: &str = "127.0.0.1:7878";

#[derive(Parser)]
#[command(name = "dft", version, about = "Field triage of digital evidence")]
struct Cli {
    /// Workspace directory. Defaults to workspaces/<file number> of the
    /// case given with --case, else the current directory.
    #[arg(long, global = true, env = "DFT_WORKSPACE")]
    workspace: Option<PathBuf>,
    /// Case description file.
    #[arg(long, global = true)]
    case: Option<PathBuf>,
    /// Coordinator service address (host:port or URL).
    #[arg(long, global = true, env = "DFT_COORDINATOR")]
    coordinator: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create the workspace for --case and hash every evidence item.
    Open {
        /// Overrides the member in the case file.
        #[arg(long)]
        member: Option<String>,
        /// Overrides the file number; without one anywhere, a number is
        /// requested from --coordinator.
        #[arg(long)]
        file_number: Option<String>,
        /// Crime type or profile file; overrides the case file.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Run the profile's scanners. With --evidence, opens and scans a
    /// single source without a case file.
    Scan {
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        evidence: Option<PathBuf>,
        #[arg(long)]
        member: Option<String>,
        #[arg(long)]
        file_number: Option<String>,
        /// Scan one item only.
        #[arg(long)]
        item: Option<String>,
    },
    /// Rank evidence items and propagate priority along attachments.
    Rank,
    /// Apply the threshold rule to every scanned item.
    Threshold {
        #[arg(long)]
        item: Option<String>,
    },
    /// Build, validate and render the Observation Report.
    Report {
        /// Also print this rendering to stdout.
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Replace the case notes first.
        #[arg(long)]
        notes: Option<String>,
        /// Send the report to --coordinator.
        #[arg(long)]
        submit: bool,
    },
    /// Recompute every manifest and compare.
    Verify,
    /// Run the coordinator service.
    Serve {
        /// Listen address; defaults to --coordinator, then 127.0.0.1:7878.
        #[arg(long)]
        listen: Option<String>,
        /// Journal file; without one state lives in memory.
        #[arg(long)]
        journal: Option<PathBuf>,
        /// Coordinator config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of case workspaces served under /cases.
        #[arg(long, default_value = WORKSPACES)]
        cases: PathBuf,
    },
    /// Run the backlog simulator and print the daily backlog.
    Simulate {
        /// Simulation config (TOML); defaults apply without one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run FIFO and severity order on the same cases and print waits.
        #[arg(long)]
        compare: bool,
    },
    /// Program metrics, from --coordinator or from table files.
    Metrics {
        #[arg(long)]
        year: Option<i32>,
        #[arg(long, requires = "to")]
        from: Option<i32>,
        #[arg(long, requires = "from")]
        to: Option<i32>,
        /// Table 1 or Table 2 files to compute from locally.
        #[arg(long)]
        table: Vec<PathBuf>,
        /// Coordinator config for local computation.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Structured,
    Readable,
}

/// A failure, printed as `error: <module>.<code>: <message>`.
#[derive(Debug)]
pub struct CliError {
    module: String,
    code: String,
    message: String,
}

impl CliError {
    pub fn new(module: &str, code: &str, message: impl Into<String>) -> Self {
        let message: String = message.into();
        // One line, whatever the source error looked like.
        let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
        Self { module: module.into(), code: code.into(), message }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}: {}", self.module, self.code, self.message)
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        Self::new(e.module(), e.code(), e.to_string())
    }
}

impl From<CoordinatorError> for CliError {
    fn from(e: CoordinatorError) -> Self {
        Self::new("coordinator", e.code(), e.to_string())
    }
}

impl From<BacklogError> for CliError {
    fn from(e: BacklogError) -> Self {
        Self::new("backlog", e.code(), e.to_string())
    }
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        Self::new(&e.module, &e.code, e.message)
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("cli", "io", format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
                    let _ = e.print();
                    return ExitCode::from(2);
                }
                ErrorKind::InvalidSubcommand => "unknown_command",
                _ => "usage",
            };
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error: {}", CliError::new("cli", code, first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Open { member, file_number, profile } => {
            open(&cli, member.as_deref(), file_number.as_deref(), profile.as_deref())
        }
        Command::Scan { profile, evidence: Some(evidence), member, file_number, .. } => {
            scan_source(&cli, profile.as_deref(), evidence, member.as_deref(), file_number.as_deref())
        }
        Command::Scan { item, .. } => scan(&open_workspace(&cli)?, item.as_deref()),
        Command::Rank => rank(&open_workspace(&cli)?),
        Command::Threshold { item } => threshold(&open_workspace(&cli)?, item.as_deref()),
        Command::Report { format, notes, submit } => report(&cli, *format, notes.as_deref(), *submit),
        Command::Verify => verify(&open_workspace(&cli)?),
        Command::Serve { listen, journal, config, cases } => {
            let listen = listen.clone().or_else(|| cli.coordinator.clone()).unwrap_or_else(|| DEFAULT_LISTEN.into());
            serve(&listen, journal.as_deref(), config.as_deref(), cases)
        }
        Command::Simulate { config, seed, out, compare } => {
            run_simulation(config.as_deref(), *seed, out.as_deref(), *compare)
        }
        Command::Metrics { year, from, to, table, config } => {
            let period = match (year, from, to) {
                (Some(y), _, _) => Period::Year(*y),
                (None, Some(from), Some(to)) => Period::Years { from: *from, to: *to },
                _ => Period::All,
            };
            metrics(&cli, period, table, config.as_deref())
        }
    }
}

fn workspace_dir(cli: &Cli, file_number: Option<&str>) -> Result<PathBuf> {
    if let Some(w) = &cli.workspace {
        return Ok(w.clone());
    }
    if let Some(n) = file_number {
        return Ok(Path::new(WORKSPACES).join(n));
    }
    if let Some(case) = &cli.case {
        let case = CaseDescription::read(case)?;
        if !case.dft_file_number.is_empty() {
            return Ok(Path::new(WORKSPACES).join(case.dft_file_number));
        }
    }
    Ok(PathBuf::from("."))
}

fn open_workspace(cli: &Cli) -> Result<Workspace> {
    Ok(Workspace::open(&workspace_dir(cli, None)?)?)
}

fn coordinator(cli: &Cli) -> Result<Client> {
    cli.coordinator
        .as_deref()
        .map(Client::new)
        .ok_or_else(|| CliError::new("cli", "no_coordinator", "give --coordinator or set DFT_COORDINATOR"))
}

/// Fills in the member and file number, asking the coordinator for a
/// number when none is known.
fn complete_case(cli: &Cli, case: &mut CaseDescription, member: Option<&str>, file_number: Option<&str>) -> Result<()> {
    if let Some(m) = member {
        case.member_id = m.to_string();
    }
    if let Some(n) = file_number {
        case.dft_file_number = n.to_string();
    }
    if case.dft_file_number.is_empty() && !case.member_id.is_empty() {
        if let Some(addr) = &cli.coordinator {
            let investigation = if case.investigation_id.is_empty() { &case.case_id } else { &case.investigation_id };
            case.dft_file_number = Client::new(addr).issue_file_number(&case.member_id, investigation)?.value;
        }
    }
    Ok(case.check()?)
}

fn open(cli: &Cli, member: Option<&str>, file_number: Option<&str>, profile: Option<&str>) -> Result<()> {
    let path = cli.case.as_deref().ok_or_else(|| CliError::new("cli", "no_case", "`open` needs --case"))?;
    let mut case = CaseDescription::read(path)?;
    if let Some(p) = profile {
        case.profile = resolve_profile(p);
    }
    complete_case(cli, &mut case, member, file_number)?;
    let root = workspace_dir(cli, Some(&case.dft_file_number))?;
    let ws = Workspace::create(&root, &case)?;
    for (id, manifest) in ws.open_all()? {
        println!("{id}\t{}", manifest.fingerprint());
    }
    println!("workspace: {}", root.display());
    Ok(())
}

/// Profile names pass through; relative profile files become absolute so
/// the workspace does not depend on the current directory.
fn resolve_profile(p: &str) -> String {
    let path = Path::new(p);
    if path.is_file() {
        if let Ok(abs) = path.canonicalize() {
            return abs.display().to_string();
        }
    }
    p.to_string()
}

fn file_safe(text: &str) -> String {
    let s: String =
        text.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    s.trim_start_matches('.').to_string()
}

fn scan_source(
    cli: &Cli,
    profile: Option<&str>,
    evidence: &Path,
    member: Option<&str>,
    file_number: Option<&str>,
) -> Result<()> {
    let profile = profile.ok_or_else(|| CliError::new("cli", "no_profile", "`scan --evidence` needs --profile"))?;
    let path = evidence.canonicalize().map_err(|e| io_error(evidence, e))?;
    let stem = path
        .file_stem()
        .map(|s| file_safe(&s.to_string_lossy()))
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "evidence".into());
    let kind = if path.is_dir() { SourceKind::DirectoryTree } else { SourceKind::RawImage };
    let case_id = format!("scan-{stem}");
    let mut case = CaseDescription {
        case_id: case_id.clone(),
        dft_file_number: String::new(),
        member_id: std::env::var("USER").unwrap_or_else(|_| "unknown".into()),
        investigation_id: String::new(),
        profile: resolve_profile(profile),
        notes: String::new(),
        triage: None,
        items: vec![CaseItem {
            item_id: stem.clone(),
            description: path.display().to_string(),
            path,
            kind,
            owner_relation: OwnerRelation::Unknown,
            owner_prior: OwnerPrior::Unknown,
            device_class: DeviceClass::Other,
            attached_to: None,
            reasoning: None,
        }],
    };
    complete_case_lenient(cli, &mut case, member, file_number)?;
    let root = match &cli.workspace {
        Some(w) => w.clone(),
        None => Path::new(WORKSPACES).join(&case_id),
    };
    let ws = Workspace::create(&root, &case)?;
    ws.open_all()?;
    scan(&ws, None)
}

/// Single-source scans may run before any file number exists.
fn complete_case_lenient(
    cli: &Cli,
    case: &mut CaseDescription,
    member: Option<&str>,
    file_number: Option<&str>,
) -> Result<()> {
    match complete_case(cli, case, member, file_number) {
        Err(e) if e.code == "invalid_case" && case.dft_file_number.is_empty() => {
            case.dft_file_number = "unassigned".into();
            Ok(case.check()?)
        }
        other => other,
    }
}

fn scan(ws: &Workspace, item: Option<&str>) -> Result<()> {
    let assessments = match item {
        Some(id) => vec![ws.scan_item(id)?],
        None => ws.scan_all()?,
    };
    for a in &assessments {
        println!("{}\t{} hits\t{} searches", a.item_id, a.hits.len(), a.searches_run.len());
        for file in [format!("{}.tsv", a.item_id), format!("{}.cards.tsv", a.item_id)] {
            let path = ws.root().join("hits").join(&file);
            if path.is_file() {
                println!("  {}", path.display());
            }
        }
    }
    Ok(())
}

fn rank(ws: &Workspace) -> Result<()> {
    for (i, item) in ws.rank()?.iter().enumerate() {
        println!("{}\t{}\t{:.4}\t{}", i + 1, item.item_id, item.priority, item.attached_to.as_deref().unwrap_or("-"));
    }
    Ok(())
}

fn threshold(ws: &Workspace, item: Option<&str>) -> Result<()> {
    let decisions = match item {
        Some(id) => vec![ws.threshold(id)?],
        None => ws.threshold_all()?,
    };
    let view = ws.view()?;
    for d in &decisions {
        let basis: Vec<String> = d
            .basis
            .iter()
            .map(|b| match b {
                Basis::Hit(r) => r.to_string(),
                Basis::Checklist(q) => q.to_string(),
            })
            .collect();
        println!("{}\t{}\t{}", d.item_id, d.decision, basis.join(", "));
        if d.decision != Decision::Meets {
            if let Some(item) = view.items.iter().find(|i| i.item_id == d.item_id) {
                for row in &item.checklist.rows {
                    println!("  {}: {}", row.question, row.answer);
                }
            }
        }
    }
    Ok(())
}

fn report(cli: &Cli, format: Option<Format>, notes: Option<&str>, submit: bool) -> Result<()> {
    let client = if submit { Some(coordinator(cli)?) } else { None };
    let ws = open_workspace(cli)?;
    if let Some(notes) = notes {
        ws.set_notes(notes)?;
    }
    let report = ws.build_report()?;
    match format {
        Some(f) => {
            let f = match f {
                Format::Structured => ReportFormat::Structured,
                Format::Readable => ReportFormat::Readable,
            };
            let bytes = render_report(&report, f).map_err(SessionError::from)?;
            print!("{}", String::from_utf8_lossy(&bytes));
        }
        None => {
            println!("report: {}", report.report_id());
            println!("  {}", ws.root().join(REPORT_FILE).display());
            println!("  {}", ws.root().join(READABLE_FILE).display());
        }
    }
    if let Some(client) = client {
        let path = ws.root().join(REPORT_FILE);
        let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
        let member = client.submit_report(&bytes)?;
        eprintln!(
            "submitted; {} has {} assessment(s) on file",
            member.member_id,
            member.assessments_by_year.values().sum::<u32>()
        );
    }
    Ok(())
}

fn verify(ws: &Workspace) -> Result<()> {
    let mut changed = 0;
    for (id, result) in ws.verify()? {
        for m in result.mismatches() {
            println!(
                "{id}\t{}\texpected {}\tfound {}",
                m.label,
                m.expected.as_deref().unwrap_or("-"),
                m.actual.as_deref().unwrap_or("-")
            );
        }
        changed += usize::from(!result.is_ok());
    }
    if changed > 0 {
        return Err(CliError::new(
            "integrity",
            "integrity_violation",
            format!("{changed} item(s) no longer match their manifests"),
        ));
    }
    println!("integrity: ok");
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<CoordinatorConfig> {
    Ok(match path {
        Some(p) => CoordinatorConfig::load(p)?,
        None => CoordinatorConfig::default(),
    })
}

fn serve(listen: &str, journal: Option<&Path>, config: Option<&Path>, cases: &Path) -> Result<()> {
    let config = load_config(config)?;
    let clock = Arc::new(SystemClock);
    let coordinator = match journal {
        Some(j) => Coordinator::open(j, config, clock)?,
        None => Coordinator::in_memory(config, clock),
    };
    let listen = listen.trim_start_matches("http://").trim_end_matches('/');
    let state = ServiceState::new(Arc::new(coordinator), cases);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("cli", "runtime", e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .map_err(|e| CliError::new("cli", "bind", format!("{listen}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::new("cli", "bind", e.to_string()))?;
        eprintln!("listening on http://{addr}");
        dft_service::serve(listener, state).await.map_err(|e| CliError::new("cli", "serve", e.to_string()))
    })
}

fn run_simulation(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>, compare: bool) -> Result<()> {
    let mut config = match config {
        Some(p) => SimConfig::parse(&fs::read_to_string(p).map_err(|e| io_error(p, e))?)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if compare {
        let c = compare_disciplines(&config)?;
        println!("severity\tfifo_mean_wait\tseverity_mean_wait");
        for s in [Severity::PersonCrime, Severity::Property, Severity::Fraud] {
            if let Some((fifo, sev)) = c.waits(s) {
                println!("{}\t{fifo:.3}\t{sev:.3}", s.as_str());
            }
        }
        println!("final_backlog\t{}\t{}", c.fifo.final_backlog, c.severity.final_backlog);
        return Ok(());
    }
    let trace = simulate(&config)?;
    match out {
        Some(p) => fs::write(p, trace.to_tsv()).map_err(|e| io_error(p, e))?,
        None => print!("{}", trace.to_tsv()),
    }
    eprintln!(
        "arrivals {} completions {} final backlog {} diverted {}",
        trace.arrivals, trace.completions, trace.final_backlog, trace.diverted
    );
    Ok(())
}

fn metrics(cli: &Cli, period: Period, tables: &[PathBuf], config: Option<&Path>) -> Result<()> {
    if tables.is_empty() {
        let query = match period {
            Period::All => String::new(),
            Period::Year(y) => format!("year={y}"),
            Period::Years { from, to } => format!("from={from}&to={to}"),
        };
        print!("{}", coordinator(cli)?.metrics(&query)?);
        return Ok(());
    }
    let c = Coordinator::in_memory(load_config(config)?, Arc::new(SystemClock));
    for t in tables {
        c.ingest_historical(&fs::read_to_string(t).map_err(|e| io_error(t, e))?)?;
    }
    print!("{}", canonical_json(&c.program_metrics(period)?));
    Ok(())
}
