//! Command implementations behind the `ktriage` binary.
//!
//! Subcommands: `index` (build/refresh the source index), `triage` (one
//! report), `eval` (batch + summary tables), `replay-verify` (re-run the
//! verifier over a stored audit log), `record` (triage against a live
//! backend while writing a cassette).
//!
//! Exit codes: 0 = verified, 2 = degraded result or drift, 1 = hard error.
//! Settings resolve flags > environment > config file (flat `key=value`).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::{
    classify_correctness, format_failed_violation, hop_position_violation, load_patch_truth,
    AgentError, Correctness, TriageSession, TriageStatus, DEFAULT_MAX_DEPTH, DEFAULT_RETRY_CAP,
};
use crate::audit::{percent, read_audit, AuditEvent, AuditWriter};
use crate::esv::{verify, EsvError, SpecLibrary, VerificationContext, Violation, ViolationClass};
use crate::llm::{LlmBackend, LlmError, ScriptedBackend};
use crate::pcx::{apply_formatted, parse_outcome, PcxError, ProgramLibrary};
use crate::report::{parse_report, ReportError};
use crate::retrieval::{build_index, RetrievalError, SourceIndex, DEFAULT_FILE_GLOBS};

pub const ENV_ENDPOINT: &str = "KTRIAGE_ENDPOINT";
pub const ENV_API_KEY: &str = "KTRIAGE_API_KEY";
pub const ENV_MODEL: &str = "KTRIAGE_MODEL";
const HTTP_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Pcx(#[from] PcxError),
    #[error(transparent)]
    Esv(#[from] EsvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Argument surface (clap derive; the binary only parses and dispatches).

#[derive(Debug, clap::Parser)]
#[command(
    name = "ktriage",
    about = "Crash-report triage via verified pseudo-code execution",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Subcommand)]
pub enum Command {
    /// Build the source index and print its stats (optionally cache it).
    Index(IndexArgs),
    /// Triage one crash report.
    Triage(TriageArgs),
    /// Batch-evaluate a directory of cases and print summary tables.
    Eval(EvalArgs),
    /// Re-run verification over a stored audit log and report drift.
    ReplayVerify(ReplayVerifyArgs),
    /// Triage against the HTTP backend while recording a cassette.
    Record(TriageArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct IndexArgs {
    /// Root of the source corpus.
    pub source_root: PathBuf,
    /// Write the index cache (`index.v1` JSON) here.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Override the file globs (default `**/*.c`, `**/*.h`).
    #[arg(long = "glob")]
    pub globs: Vec<String>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct TriageArgs {
    /// Crash report file (raw sanitizer text).
    pub report: PathBuf,
    /// Root of the source corpus.
    #[arg(long)]
    pub source_root: PathBuf,
    /// Backend: `scripted` (default) or `http`.
    #[arg(long, default_value = "scripted")]
    pub backend: String,
    /// Cassette path: replies for `scripted`, destination for `record`.
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    /// Write the `triage.v1` JSON here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write an `audit.v1` JSON-lines log of every exchange.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RETRY_CAP)]
    pub retry_cap: u32,
    #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
    pub max_depth: u32,
    /// Extra pseudo-program files (`*.txt`) overriding the builtins.
    #[arg(long)]
    pub program_dir: Option<PathBuf>,
    /// Extra execution specs (`*.spec.json`) overriding the builtins.
    #[arg(long)]
    pub spec_dir: Option<PathBuf>,
    /// Reuse/update an index cache at this path.
    #[arg(long)]
    pub index_cache: Option<PathBuf>,
    /// Chat-completions endpoint (env KTRIAGE_ENDPOINT).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Bearer token (env KTRIAGE_API_KEY).
    #[arg(long)]
    pub api_key: Option<String>,
    /// Model name (env KTRIAGE_MODEL).
    #[arg(long)]
    pub model: Option<String>,
    /// Flat `key=value` config file (lowest precedence).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    /// Case directory: each case is `NAME.report.txt` plus
    /// `NAME.cassette.jsonl` and `NAME.truth.json`.
    pub cases: PathBuf,
    #[arg(long)]
    pub source_root: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 4)]
    pub jobs: usize,
    /// Write per-case `triage.v1` and `audit.v1` files here.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RETRY_CAP)]
    pub retry_cap: u32,
    #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
    pub max_depth: u32,
    #[arg(long)]
    pub program_dir: Option<PathBuf>,
    #[arg(long)]
    pub spec_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ReplayVerifyArgs {
    /// The `audit.v1` log to re-verify.
    pub audit: PathBuf,
    #[arg(long)]
    pub source_root: PathBuf,
    #[arg(long)]
    pub program_dir: Option<PathBuf>,
    #[arg(long)]
    pub spec_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Configuration resolution.

/// Flags beat environment beats config file; empty strings don't count.
pub fn resolve_setting(
    flag: Option<String>,
    env: Option<String>,
    file: Option<String>,
) -> Option<String> {
    let nonempty = |s: String| if s.trim().is_empty() { None } else { Some(s) };
    flag.and_then(nonempty)
        .or_else(|| env.and_then(nonempty))
        .or_else(|| file.and_then(nonempty))
}

/// Flat `key = value` file; `#` starts a comment; blank lines ignored.
pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                i + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpSettings {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
}

/// Resolve the HTTP backend settings from flags, an environment lookup,
/// and the optional config file.
pub fn resolve_http_settings(
    args: &TriageArgs,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<HttpSettings, CliError> {
    let file = match &args.config {
        Some(path) => load_config_file(path)?,
        None => BTreeMap::new(),
    };
    let endpoint = resolve_setting(
        args.endpoint.clone(),
        env(ENV_ENDPOINT),
        file.get("endpoint").cloned(),
    )
    .ok_or_else(|| {
        CliError::Config(format!(
            "http backend needs an endpoint (--endpoint, {ENV_ENDPOINT}, or endpoint= in the config file)"
        ))
    })?;
    let model = resolve_setting(
        args.model.clone(),
        env(ENV_MODEL),
        file.get("model").cloned(),
    )
    .ok_or_else(|| {
        CliError::Config(format!(
            "http backend needs a model name (--model, {ENV_MODEL}, or model= in the config file)"
        ))
    })?;
    let api_key = resolve_setting(
        args.api_key.clone(),
        env(ENV_API_KEY),
        file.get("api_key").cloned(),
    );
    Ok(HttpSettings {
        endpoint,
        api_key,
        model,
    })
}

fn make_http_backend(settings: HttpSettings) -> Result<Box<dyn LlmBackend>, CliError> {
    #[cfg(feature = "http")]
    {
        let backend = crate::llm::HttpBackend::new(crate::llm::HttpConfig {
            endpoint: settings.endpoint,
            api_key: settings.api_key,
            model: settings.model,
            timeout_secs: HTTP_TIMEOUT_SECS,
        })?;
        Ok(Box::new(backend))
    }
    #[cfg(not(feature = "http"))]
    {
        let _ = settings;
        Err(CliError::Config(
            "this build lacks the `http` feature; rebuild with --features http".into(),
        ))
    }
}

fn make_backend(
    args: &TriageArgs,
    record: bool,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Box<dyn LlmBackend>, CliError> {
    if record {
        let cassette = args.cassette.as_deref().ok_or_else(|| {
            CliError::Config("record needs --cassette (destination file)".into())
        })?;
        let inner = make_http_backend(resolve_http_settings(args, env)?)?;
        let backend = crate::llm::RecordBackend::create(inner, cassette)?;
        return Ok(Box::new(backend));
    }
    match args.backend.as_str() {
        "scripted" => {
            let cassette = args.cassette.as_deref().ok_or_else(|| {
                CliError::Config("scripted backend needs --cassette (replies file)".into())
            })?;
            Ok(Box::new(ScriptedBackend::from_path(cassette)?))
        }
        "http" => make_http_backend(resolve_http_settings(args, env)?),
        other => Err(CliError::Config(format!(
            "unknown backend {other:?} (expected scripted or http)"
        ))),
    }
}

fn prepare_index(source_root: &Path, cache: Option<&Path>) -> Result<SourceIndex, CliError> {
    if let Some(path) = cache {
        if path.exists() {
            match SourceIndex::load_cache(path, source_root, DEFAULT_FILE_GLOBS) {
                Ok(index) => return Ok(index),
                // Stale or unreadable caches are rebuilt, not fatal.
                Err(RetrievalError::CacheStale(_)) | Err(RetrievalError::CacheInvalid(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let index = build_index(source_root)?;
        index.save_cache(path)?;
        return Ok(index);
    }
    Ok(build_index(source_root)?)
}

fn load_libraries(
    program_dir: Option<&Path>,
    spec_dir: Option<&Path>,
) -> Result<(ProgramLibrary, SpecLibrary), CliError> {
    let programs = match program_dir {
        Some(dir) => ProgramLibrary::with_dir(dir)?,
        None => ProgramLibrary::builtin(),
    };
    let specs = match spec_dir {
        Some(dir) => SpecLibrary::with_dir(dir)?,
        None => SpecLibrary::builtin(),
    };
    Ok((programs, specs))
}

// ---------------------------------------------------------------------------
// index

pub fn cmd_index(args: &IndexArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let globs: Vec<&str> = if args.globs.is_empty() {
        DEFAULT_FILE_GLOBS.to_vec()
    } else {
        args.globs.iter().map(String::as_str).collect()
    };
    let index = crate::retrieval::build_index_with(&args.source_root, &globs)?;
    if let Some(cache) = &args.cache {
        index.save_cache(cache)?;
    }
    let stats = index.stats();
    let summary = json!({
        "schema": "index.v1",
        "root": args.source_root.display().to_string(),
        "files": stats.files_scanned,
        "functions": stats.functions,
        "structures": stats.structures,
        "warnings": stats.warnings,
        "cache": args.cache.as_ref().map(|p| p.display().to_string()),
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&summary).unwrap())
        .map_err(io_err(&args.source_root))?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// triage / record

fn exit_code_for(status: TriageStatus) -> i32 {
    match status {
        TriageStatus::Verified => 0,
        _ => 2,
    }
}

pub fn cmd_triage(
    args: &TriageArgs,
    record: bool,
    out: &mut dyn Write,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<i32, CliError> {
    let raw = std::fs::read_to_string(&args.report).map_err(io_err(&args.report))?;
    let report = parse_report(&raw)?;
    let index = prepare_index(&args.source_root, args.index_cache.as_deref())?;
    let (programs, specs) = load_libraries(args.program_dir.as_deref(), args.spec_dir.as_deref())?;
    let backend = make_backend(args, record, env)?;

    let mut session = TriageSession::new(&index, backend)
        .with_retry_cap(args.retry_cap)
        .with_max_depth(args.max_depth)
        .with_programs(programs)
        .with_specs(specs);
    if let Some(path) = &args.audit {
        session = session.with_audit(AuditWriter::create(path).map_err(io_err(path))?);
    }

    let result = session.triage(&report)?;
    let text = result.to_json_string();
    match &args.output {
        Some(path) => std::fs::write(path, &text).map_err(io_err(path))?,
        None => out.write_all(text.as_bytes()).map_err(io_err(&args.report))?,
    }
    Ok(exit_code_for(result.status))
}

// ---------------------------------------------------------------------------
// eval

/// One scored case, as aggregated into the summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub name: String,
    pub category: String,
    pub correctness: Correctness,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<TriageStatus>,
    /// Why the case was scored Wrong without a completed run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub executions: u64,
    pub violations: u64,
    pub violation_classes: BTreeMap<String, u64>,
    pub tokens_total: u64,
    pub tokens_retry: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub total: u64,
    pub function: u64,
    pub callee: u64,
    pub related: u64,
    pub wrong: u64,
}

impl CategoryRow {
    pub fn correct(&self) -> u64 {
        self.function + self.callee + self.related
    }

    pub fn accuracy_percent(&self) -> String {
        percent(self.correct(), self.total)
    }

    fn add(&mut self, correctness: Correctness) {
        self.total += 1;
        match correctness {
            Correctness::Function => self.function += 1,
            Correctness::Callee => self.callee += 1,
            Correctness::Related => self.related += 1,
            Correctness::Wrong => self.wrong += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecStats {
    pub sum: u64,
    pub avg: f64,
    pub max: u64,
}

fn exec_stats(values: impl Iterator<Item = u64>, cases: u64) -> ExecStats {
    let mut sum = 0;
    let mut max = 0;
    for v in values {
        sum += v;
        max = max.max(v);
    }
    ExecStats {
        sum,
        avg: if cases == 0 { 0.0 } else { sum as f64 / cases as f64 },
        max,
    }
}

/// Aggregated batch results; serializes alongside the four text tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub cases: u64,
    pub per_category: BTreeMap<String, CategoryRow>,
    pub sum: CategoryRow,
    pub executions: ExecStats,
    pub violations: ExecStats,
    pub violation_classes: BTreeMap<String, u64>,
    pub tokens_total: u64,
    pub tokens_retry: u64,
    pub failures: BTreeMap<String, String>,
}

impl BatchSummary {
    pub fn accuracy_percent(&self) -> String {
        self.sum.accuracy_percent()
    }

    /// Violations per execution, as a percentage.
    pub fn violation_rate_percent(&self) -> String {
        percent(self.violations.sum, self.executions.sum)
    }

    /// One class's share of all violations, as a percentage.
    pub fn class_share_percent(&self, class: &str) -> String {
        percent(
            self.violation_classes.get(class).copied().unwrap_or(0),
            self.violations.sum,
        )
    }

    /// Retry (re-analysis) tokens over all tokens, as a percentage.
    pub fn token_ratio_percent(&self) -> String {
        percent(self.tokens_retry, self.tokens_total)
    }
}

pub fn summarize(outcomes: &[CaseOutcome]) -> BatchSummary {
    let mut summary = BatchSummary {
        cases: outcomes.len() as u64,
        ..BatchSummary::default()
    };
    for case in outcomes {
        summary
            .per_category
            .entry(case.category.clone())
            .or_default()
            .add(case.correctness);
        summary.sum.add(case.correctness);
        for (class, count) in &case.violation_classes {
            *summary.violation_classes.entry(class.clone()).or_insert(0) += count;
        }
        summary.tokens_total += case.tokens_total;
        summary.tokens_retry += case.tokens_retry;
        if let Some(reason) = &case.reason {
            summary.failures.insert(case.name.clone(), reason.clone());
        }
    }
    for class in ["unrecognized", "incomplete", "inconsistent"] {
        summary.violation_classes.entry(class.into()).or_insert(0);
    }
    summary.executions = exec_stats(outcomes.iter().map(|c| c.executions), summary.cases);
    summary.violations = exec_stats(outcomes.iter().map(|c| c.violations), summary.cases);
    summary
}

/// The four text tables: accuracy by category, execution/violation stats,
/// violation classes, token spend.
pub fn render_tables(summary: &BatchSummary) -> String {
    let mut out = String::new();

    out.push_str("Blamed-function accuracy\n");
    out.push_str(&format!(
        "{:<28} {:>6} {:>9} {:>7} {:>8} {:>8} {:>6} {:>12}\n",
        "Category", "Total", "Function", "Callee", "Related", "Correct", "Wrong", "Accuracy(%)"
    ));
    let mut row_line = |name: &str, row: &CategoryRow| {
        out.push_str(&format!(
            "{:<28} {:>6} {:>9} {:>7} {:>8} {:>8} {:>6} {:>12}\n",
            name,
            row.total,
            row.function,
            row.callee,
            row.related,
            row.correct(),
            row.wrong,
            row.accuracy_percent()
        ));
    };
    for (category, row) in &summary.per_category {
        row_line(category, row);
    }
    row_line("Sum", &summary.sum);

    out.push_str("\nExecutions and violations\n");
    out.push_str(&format!(
        "{:<12} {:>8} {:>8} {:>6}\n",
        "Metric", "Sum", "Avg", "Max"
    ));
    for (name, stats) in [("Executions", &summary.executions), ("Violations", &summary.violations)]
    {
        out.push_str(&format!(
            "{:<12} {:>8} {:>8.2} {:>6}\n",
            name, stats.sum, stats.avg, stats.max
        ));
    }
    out.push_str(&format!(
        "Violations per execution (%): {}\n",
        summary.violation_rate_percent()
    ));

    out.push_str("\nViolations by class\n");
    out.push_str(&format!("{:<14} {:>6} {:>9}\n", "Class", "Count", "Share(%)"));
    for (class, count) in &summary.violation_classes {
        out.push_str(&format!(
            "{:<14} {:>6} {:>9}\n",
            class,
            count,
            summary.class_share_percent(class)
        ));
    }

    out.push_str("\nToken spend\n");
    out.push_str(&format!(
        "{:<13} {:>13} {:>16}\n",
        "Retry tokens", "Total tokens", "Retry share (%)"
    ));
    out.push_str(&format!(
        "{:<13} {:>13} {:>16}\n",
        summary.tokens_retry,
        summary.tokens_total,
        summary.token_ratio_percent()
    ));
    out
}

struct EvalCase {
    name: String,
    report: PathBuf,
    cassette: PathBuf,
    truth: PathBuf,
}

fn discover_cases(dir: &Path) -> Result<Vec<EvalCase>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(io_err(dir))?;
    let mut cases = Vec::new();
    for entry in entries {
        let path = entry.map_err(io_err(dir))?.path();
        let Some(file_name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(name) = file_name.strip_suffix(".report.txt") else {
            continue;
        };
        cases.push(EvalCase {
            name: name.to_string(),
            report: path.clone(),
            cassette: dir.join(format!("{name}.cassette.jsonl")),
            truth: dir.join(format!("{name}.truth.json")),
        });
    }
    cases.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(cases)
}

fn wrong_case(name: &str, category: &str, reason: String) -> CaseOutcome {
    CaseOutcome {
        name: name.to_string(),
        category: category.to_string(),
        correctness: Correctness::Wrong,
        status: None,
        reason: Some(reason),
        executions: 0,
        violations: 0,
        violation_classes: BTreeMap::new(),
        tokens_total: 0,
        tokens_retry: 0,
    }
}

fn run_eval_case(
    case: &EvalCase,
    index: &SourceIndex,
    programs: &ProgramLibrary,
    specs: &SpecLibrary,
    args: &EvalArgs,
) -> CaseOutcome {
    let raw = match std::fs::read_to_string(&case.report) {
        Ok(raw) => raw,
        Err(e) => return wrong_case(&case.name, "unparsed", format!("report unreadable: {e}")),
    };
    let report = match parse_report(&raw) {
        Ok(report) => report,
        Err(e) => return wrong_case(&case.name, "unparsed", format!("report malformed: {e}")),
    };
    let category = report.bug_category.label().to_string();
    let backend = match ScriptedBackend::from_path(&case.cassette) {
        Ok(backend) => backend,
        Err(e) => return wrong_case(&case.name, &category, format!("cassette: {e}")),
    };
    let mut session = TriageSession::new(index, Box::new(backend))
        .with_retry_cap(args.retry_cap)
        .with_max_depth(args.max_depth)
        .with_programs(programs.clone())
        .with_specs(specs.clone());
    if let Some(dir) = &args.output_dir {
        if let Ok(writer) = AuditWriter::create(&dir.join(format!("{}.audit.jsonl", case.name))) {
            session = session.with_audit(writer);
        }
    }
    let result = match session.triage(&report) {
        Ok(result) => result,
        Err(e) => return wrong_case(&case.name, &category, format!("triage: {e}")),
    };
    if let Some(dir) = &args.output_dir {
        let _ = std::fs::write(
            dir.join(format!("{}.triage.json", case.name)),
            result.to_json_string(),
        );
    }
    let correctness = match load_patch_truth(&case.truth)
        .and_then(|truth| classify_correctness(&result, &truth, index))
    {
        Ok(c) => c,
        Err(e) => return wrong_case(&case.name, &category, format!("ground truth: {e}")),
    };
    CaseOutcome {
        name: case.name.clone(),
        category,
        correctness,
        status: Some(result.status),
        reason: None,
        executions: result.total_executions,
        violations: result.total_violations,
        violation_classes: result.violation_class_counts(),
        tokens_total: result.token_report.total.total(),
        tokens_retry: result.token_report.retry.total(),
    }
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cases = discover_cases(&args.cases)?;
    if let Some(dir) = &args.output_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    if cases.is_empty() {
        let summary = BatchSummary::default();
        writeln!(out, "{}", serde_json::to_string_pretty(&summary).unwrap())
            .map_err(io_err(&args.cases))?;
        writeln!(out, "\nno cases found under {}", args.cases.display())
            .map_err(io_err(&args.cases))?;
        return Ok(1);
    }

    let index = prepare_index(&args.source_root, None)?;
    let (programs, specs) = load_libraries(args.program_dir.as_deref(), args.spec_dir.as_deref())?;

    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<CaseOutcome>> = Mutex::new(Vec::with_capacity(cases.len()));
    let jobs = args.jobs.max(1).min(cases.len());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(case) = cases.get(i) else { break };
                let outcome = run_eval_case(case, &index, &programs, &specs, args);
                outcomes.lock().unwrap().push(outcome);
            });
        }
    });
    let mut outcomes = outcomes.into_inner().unwrap();
    outcomes.sort_by(|a, b| a.name.cmp(&b.name));

    let summary = summarize(&outcomes);
    writeln!(out, "{}", serde_json::to_string_pretty(&summary).unwrap())
        .map_err(io_err(&args.cases))?;
    writeln!(out, "\n{}", render_tables(&summary)).map_err(io_err(&args.cases))?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// replay-verify

/// Recompute the violations for one stored execution event, applying the
/// same pipeline the agent ran: parse → stored format output (if any) →
/// verify → hop-position check.
#[allow(clippy::too_many_arguments)]
fn recompute_violations(
    raw_reply: &str,
    formatted: Option<&serde_json::Value>,
    program: &crate::pcx::PseudoProgram,
    spec: &crate::esv::ExecutionSpec,
    function: &str,
    provided_names: &[String],
    trace: &[crate::report::Frame],
    crash_frame_index: usize,
    index: &SourceIndex,
) -> Result<Vec<Violation>, CliError> {
    let mut outcome = parse_outcome(raw_reply, program);
    if outcome.needs_format_fallback {
        match formatted {
            Some(value) => apply_formatted(&mut outcome, value),
            None => return Ok(vec![format_failed_violation("recorded run had no usable JSON")]),
        }
    }
    let provided: BTreeMap<_, _> = provided_names
        .iter()
        .map(|name| (name.clone(), index.retrieve_one(name)))
        .collect();
    let ctx = VerificationContext::new(function, provided, trace.to_vec(), Some(index));
    let mut violations = verify(&outcome, spec, &ctx)?;
    for (i, record) in outcome.records.iter().enumerate() {
        if let Some(v) = hop_position_violation(record, function, trace, crash_frame_index, i) {
            violations.push(v);
        }
    }
    Ok(violations)
}

fn violation_keys(violations: &[Violation]) -> Vec<(ViolationClass, String)> {
    let mut keys: Vec<_> = violations
        .iter()
        .map(|v| (v.class, v.rule_id.clone()))
        .collect();
    keys.sort();
    keys
}

pub fn cmd_replay_verify(args: &ReplayVerifyArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let events = read_audit(&args.audit).map_err(io_err(&args.audit))?;
    let Some(AuditEvent::RunStart {
        call_trace,
        crash_frame_index,
        ..
    }) = events.first()
    else {
        return Err(CliError::Config(format!(
            "{}: first event is not run_start",
            args.audit.display()
        )));
    };
    let index = prepare_index(&args.source_root, None)?;
    let (programs, specs) = load_libraries(args.program_dir.as_deref(), args.spec_dir.as_deref())?;

    let mut checked = 0u64;
    let mut drifted = 0u64;
    for event in &events {
        let AuditEvent::Execution {
            step,
            attempt,
            spec_ref,
            program_id,
            function,
            provided,
            raw_reply,
            formatted,
            violations,
            ..
        } = event
        else {
            continue;
        };
        if spec_ref.is_empty() {
            continue; // identify pass: nothing to verify against
        }
        if violations.iter().any(|v| v.rule_id == "truncated") {
            continue; // reply never arrived; nothing to recompute
        }
        let program = programs.get(program_id).ok_or_else(|| {
            CliError::Config(format!("program {program_id} not in library"))
        })?;
        let spec = specs
            .get(spec_ref)
            .ok_or_else(|| CliError::Config(format!("spec {spec_ref} not in library")))?;
        let recomputed = recompute_violations(
            raw_reply,
            formatted.as_ref(),
            program,
            spec,
            function,
            provided,
            call_trace,
            *crash_frame_index,
            &index,
        )?;
        checked += 1;
        let stored_keys = violation_keys(violations);
        let recomputed_keys = violation_keys(&recomputed);
        if stored_keys == recomputed_keys {
            writeln!(out, "step {step} attempt {attempt}: ok ({} violations)", violations.len())
                .map_err(io_err(&args.audit))?;
        } else {
            drifted += 1;
            writeln!(
                out,
                "step {step} attempt {attempt}: DRIFT stored={stored_keys:?} recomputed={recomputed_keys:?}"
            )
            .map_err(io_err(&args.audit))?;
        }
    }
    writeln!(out, "replay-verify: {checked} executions checked, {drifted} drifted")
        .map_err(io_err(&args.audit))?;
    Ok(if drifted == 0 { 0 } else { 2 })
}

// ---------------------------------------------------------------------------
// dispatch

/// Run a parsed command line; returns the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let env = |key: &str| std::env::var(key).ok();
    let result = match &cli.command {
        Command::Index(args) => cmd_index(args, out),
        Command::Triage(args) => cmd_triage(args, false, out, &env),
        Command::Record(args) => cmd_triage(args, true, out, &env),
        Command::Eval(args) => cmd_eval(args, out),
        Command::ReplayVerify(args) => cmd_replay_verify(args, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let payload = json!({ "error": e.to_string() });
            let _ = writeln!(err, "{payload}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI_C: &str = "static int g_state;\n\
                          \n\
                          int read_value(int *value)\n\
                          {\n\
                          \tint local = *value;\n\
                          \treturn local + g_state;\n\
                          }\n\
                          \n\
                          void fill_slot(void)\n\
                          {\n\
                          \tint value = 7;\n\
                          \tread_value(&value);\n\
                          }\n";

    const MINI_REPORT: &str = "BUG: KASAN: slab-out-of-bounds in read_value+0x10/0x30\n\
                               Call Trace:\n\
                               \u{20}read_value+0x10/0x30 mini.c:5\n\
                               \u{20}fill_slot+0x22/0x40 mini.c:12\n";

    const CASSETTE: &str = concat!(
        "{\"reply\": \"{\\\"variable\\\": \\\"value\\\"}\", \"prompt_tokens\": 50, \"completion_tokens\": 8}\n",
        "{\"reply\": \"Category: parameter of function\\nVariable: value\\nLine: 12: read_value(&value);\\nCaller: fill_slot\\n\", \"prompt_tokens\": 200, \"completion_tokens\": 30}\n",
        "{\"reply\": \"Category: constant value\\nVariable: value\\nLine: 11: int value = 7;\\nValue: 7\\n\", \"prompt_tokens\": 210, \"completion_tokens\": 25}\n",
    );

    fn no_env(_: &str) -> Option<String> {
        None
    }

    fn write_mini_case(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
        let src = dir.join("src");
        std::fs::create_dir_all(&src).unwrap();
        std::fs::write(src.join("mini.c"), MINI_C).unwrap();
        let report = dir.join("crash.report.txt");
        std::fs::write(&report, MINI_REPORT).unwrap();
        let cassette = dir.join("crash.cassette.jsonl");
        std::fs::write(&cassette, CASSETTE).unwrap();
        (src, report, cassette)
    }

    #[test]
    fn settings_resolve_flag_over_env_over_file() {
        let flag = |s: &str| Some(s.to_string());
        assert_eq!(
            resolve_setting(flag("a"), flag("b"), flag("c")).as_deref(),
            Some("a")
        );
        assert_eq!(resolve_setting(None, flag("b"), flag("c")).as_deref(), Some("b"));
        assert_eq!(resolve_setting(None, None, flag("c")).as_deref(), Some("c"));
        assert_eq!(resolve_setting(None, None, None), None);
        // Blank values do not shadow lower-precedence sources.
        assert_eq!(resolve_setting(flag("  "), flag("b"), None).as_deref(), Some("b"));
    }

    #[test]
    fn config_file_parses_flat_key_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ktriage.conf");
        std::fs::write(&path, "# comment\nendpoint = http://localhost:1/v1/chat\n\nmodel=m1\n")
            .unwrap();
        let map = load_config_file(&path).unwrap();
        assert_eq!(map.get("endpoint").map(String::as_str), Some("http://localhost:1/v1/chat"));
        assert_eq!(map.get("model").map(String::as_str), Some("m1"));

        std::fs::write(&path, "not a pair\n").unwrap();
        assert!(matches!(load_config_file(&path), Err(CliError::Config(_))));
    }

    #[test]
    fn http_settings_respect_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("conf");
        std::fs::write(&config, "endpoint=http://file/v1\nmodel=file-model\napi_key=file-key\n")
            .unwrap();
        let mut args = TriageArgs {
            report: PathBuf::new(),
            source_root: PathBuf::new(),
            backend: "http".into(),
            cassette: None,
            output: None,
            audit: None,
            retry_cap: DEFAULT_RETRY_CAP,
            max_depth: DEFAULT_MAX_DEPTH,
            program_dir: None,
            spec_dir: None,
            index_cache: None,
            endpoint: Some("http://flag/v1".into()),
            api_key: None,
            model: None,
            config: Some(config),
        };
        let env = |key: &str| match key {
            ENV_MODEL => Some("env-model".to_string()),
            _ => None,
        };
        let settings = resolve_http_settings(&args, &env).unwrap();
        assert_eq!(settings.endpoint, "http://flag/v1"); // flag wins
        assert_eq!(settings.model, "env-model"); // env beats file
        assert_eq!(settings.api_key.as_deref(), Some("file-key")); // file fallback

        args.endpoint = None;
        args.config = None;
        let settings = resolve_http_settings(&args, &no_env);
        assert!(matches!(settings, Err(CliError::Config(m)) if m.contains("endpoint")));
    }

    #[test]
    fn scripted_backend_requires_cassette() {
        let args = TriageArgs {
            report: PathBuf::new(),
            source_root: PathBuf::new(),
            backend: "scripted".into(),
            cassette: None,
            output: None,
            audit: None,
            retry_cap: DEFAULT_RETRY_CAP,
            max_depth: DEFAULT_MAX_DEPTH,
            program_dir: None,
            spec_dir: None,
            index_cache: None,
            endpoint: None,
            api_key: None,
            model: None,
            config: None,
        };
        assert!(matches!(
            make_backend(&args, false, &no_env),
            Err(CliError::Config(m)) if m.contains("cassette")
        ));
        let mut unknown = args;
        unknown.backend = "carrier-pigeon".into();
        assert!(matches!(
            make_backend(&unknown, false, &no_env),
            Err(CliError::Config(m)) if m.contains("carrier-pigeon")
        ));
    }

    #[test]
    fn triage_command_writes_result_and_exits_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (src, report, cassette) = write_mini_case(dir.path());
        let output = dir.path().join("result.json");
        let audit = dir.path().join("run.audit.jsonl");
        let args = TriageArgs {
            report,
            source_root: src,
            backend: "scripted".into(),
            cassette: Some(cassette),
            output: Some(output.clone()),
            audit: Some(audit.clone()),
            retry_cap: DEFAULT_RETRY_CAP,
            max_depth: DEFAULT_MAX_DEPTH,
            program_dir: None,
            spec_dir: None,
            index_cache: None,
            endpoint: None,
            api_key: None,
            model: None,
            config: None,
        };
        let mut out = Vec::new();
        let code = cmd_triage(&args, false, &mut out, &no_env).unwrap();
        assert_eq!(code, 0);
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&output).unwrap()).unwrap();
        assert_eq!(value["schema"], "triage.v1");
        assert_eq!(value["blamed_function"], "fill_slot");
        assert_eq!(value["status"], "verified");
        assert!(audit.exists());
    }

    #[test]
    fn replay_verify_accepts_its_own_audit_and_spots_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let (src, report, cassette) = write_mini_case(dir.path());
        let audit = dir.path().join("run.audit.jsonl");
        let args = TriageArgs {
            report,
            source_root: src.clone(),
            backend: "scripted".into(),
            cassette: Some(cassette),
            output: Some(dir.path().join("result.json")),
            audit: Some(audit.clone()),
            retry_cap: DEFAULT_RETRY_CAP,
            max_depth: DEFAULT_MAX_DEPTH,
            program_dir: None,
            spec_dir: None,
            index_cache: None,
            endpoint: None,
            api_key: None,
            model: None,
            config: None,
        };
        let mut sink = Vec::new();
        assert_eq!(cmd_triage(&args, false, &mut sink, &no_env).unwrap(), 0);

        let replay_args = ReplayVerifyArgs {
            audit: audit.clone(),
            source_root: src,
            program_dir: None,
            spec_dir: None,
        };
        let mut out = Vec::new();
        assert_eq!(cmd_replay_verify(&replay_args, &mut out).unwrap(), 0);
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("2 executions checked, 0 drifted"), "{text}");

        // Tamper with a stored reply: the verifier must notice on replay.
        let tampered = std::fs::read_to_string(&audit)
            .unwrap()
            .replace("Caller: fill_slot", "Caller: ghost_fn");
        std::fs::write(&audit, tampered).unwrap();
        let mut out = Vec::new();
        assert_eq!(cmd_replay_verify(&replay_args, &mut out).unwrap(), 2);
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("DRIFT"), "{text}");
    }

    #[test]
    fn eval_scores_cases_and_tolerates_broken_ones() {
        let dir = tempfile::tempdir().unwrap();
        let (src, _, _) = write_mini_case(dir.path());
        let cases = dir.path().join("cases");
        std::fs::create_dir_all(&cases).unwrap();
        // Case A: complete and correct.
        std::fs::write(cases.join("a.report.txt"), MINI_REPORT).unwrap();
        std::fs::write(cases.join("a.cassette.jsonl"), CASSETTE).unwrap();
        std::fs::write(
            cases.join("a.truth.json"),
            "{\"bug_id\": \"a\", \"patched_functions\": [{\"name\": \"fill_slot\", \"file\": \"mini.c\"}]}",
        )
        .unwrap();
        // Case B: cassette missing → Wrong with a reason, batch continues.
        std::fs::write(cases.join("b.report.txt"), MINI_REPORT).unwrap();
        std::fs::write(
            cases.join("b.truth.json"),
            "{\"bug_id\": \"b\", \"patched_functions\": [{\"name\": \"fill_slot\", \"file\": \"mini.c\"}]}",
        )
        .unwrap();

        let out_dir = dir.path().join("out");
        let args = EvalArgs {
            cases,
            source_root: src,
            jobs: 2,
            output_dir: Some(out_dir.clone()),
            retry_cap: DEFAULT_RETRY_CAP,
            max_depth: DEFAULT_MAX_DEPTH,
            program_dir: None,
            spec_dir: None,
        };
        let mut out = Vec::new();
        assert_eq!(cmd_eval(&args, &mut out).unwrap(), 0);
        let text = String::from_utf8(out).unwrap();
        let json_part = text.split("\nBlamed-function accuracy").next().unwrap();
        let json_part = json_part.rsplit_once("\n\n").map(|(a, _)| a).unwrap_or(json_part);
        let summary: BatchSummary = serde_json::from_str(json_part).unwrap();
        assert_eq!(summary.cases, 2);
        assert_eq!(summary.sum.total, 2);
        assert_eq!(summary.sum.function, 1);
        assert_eq!(summary.sum.wrong, 1);
        assert_eq!(summary.accuracy_percent(), "50.00");
        assert_eq!(summary.failures.len(), 1);
        assert!(summary.failures.get("b").unwrap().contains("cassette"));
        assert!(out_dir.join("a.triage.json").exists());
        assert!(text.contains("Blamed-function accuracy"));
        assert!(text.contains("Token spend"));
    }

    #[test]
    fn eval_of_empty_directory_is_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let cases = dir.path().join("cases");
        std::fs::create_dir_all(&cases).unwrap();
        let args = EvalArgs {
            cases,
            source_root: dir.path().to_path_buf(),
            jobs: 1,
            output_dir: None,
            retry_cap: DEFAULT_RETRY_CAP,
            max_depth: DEFAULT_MAX_DEPTH,
            program_dir: None,
            spec_dir: None,
        };
        let mut out = Vec::new();
        assert_eq!(cmd_eval(&args, &mut out).unwrap(), 1);
        assert!(String::from_utf8(out).unwrap().contains("no cases found"));
    }

    #[test]
    fn summary_reproduces_batch_arithmetic_from_raw_counts() {
        // Aggregation arithmetic over a constructed sum row.
        let summary = BatchSummary {
            cases: 170,
            per_category: BTreeMap::new(),
            sum: CategoryRow {
                total: 170,
                function: 64,
                callee: 29,
                related: 45,
                wrong: 32,
            },
            executions: ExecStats { sum: 546, avg: 3.21, max: 19 },
            violations: ExecStats { sum: 139, avg: 0.82, max: 11 },
            violation_classes: BTreeMap::from([
                ("unrecognized".to_string(), 30),
                ("incomplete".to_string(), 24),
                ("inconsistent".to_string(), 85),
            ]),
            tokens_total: 5_361_780,
            tokens_retry: 2_469_374,
            failures: BTreeMap::new(),
        };
        assert_eq!(summary.accuracy_percent(), "81.18");
        assert_eq!(summary.violation_rate_percent(), "25.46");
        assert_eq!(summary.class_share_percent("inconsistent"), "61.15");
        assert_eq!(summary.token_ratio_percent(), "46.06");

        let tables = render_tables(&summary);
        assert!(tables.contains("81.18"));
        assert!(tables.contains("25.46"));
        assert!(tables.contains("61.15"));
        assert!(tables.contains("46.06"));
    }

    #[test]
    fn summarize_aggregates_per_category_rows() {
        let case = |name: &str, category: &str, correctness: Correctness| CaseOutcome {
            name: name.into(),
            category: category.into(),
            correctness,
            status: Some(TriageStatus::Verified),
            reason: None,
            executions: 3,
            violations: 1,
            violation_classes: BTreeMap::from([("inconsistent".to_string(), 1)]),
            tokens_total: 100,
            tokens_retry: 40,
        };
        let outcomes = vec![
            case("a", "use-after-free", Correctness::Function),
            case("b", "use-after-free", Correctness::Wrong),
            case("c", "null-ptr-def", Correctness::Related),
        ];
        let summary = summarize(&outcomes);
        assert_eq!(summary.cases, 3);
        assert_eq!(summary.per_category["use-after-free"].total, 2);
        assert_eq!(summary.per_category["use-after-free"].correct(), 1);
        assert_eq!(summary.sum.correct(), 2);
        assert_eq!(summary.executions.sum, 9);
        assert_eq!(summary.executions.max, 3);
        assert_eq!(summary.violations.sum, 3);
        assert_eq!(summary.tokens_retry, 120);
        // Classes with zero hits still appear in the breakdown.
        assert_eq!(summary.violation_classes["unrecognized"], 0);
    }
}
