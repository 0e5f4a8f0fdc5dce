//! Triage orchestration: identify the crashing variable, then run backward
//! taint-analysis steps — prompt, parse, verify, retry hotter — until the
//! traced value reaches a sink, and name the blamed function.
//!
//! Planning is hard-coded: the model performs exactly one analysis step per
//! exchange and never chooses what happens next. Every exchange is
//! stateless; the only thing carried between steps is the distilled
//! intermediate-result JSON (see [`TaintTask::intermediate_json`]).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audit::{AuditEvent, AuditWriter, AUDIT_SCHEMA};
use crate::esv::{
    verify, EsvError, ExecutionSpec, SpecLibrary, VerificationContext, Violation, ViolationClass,
};
use crate::llm::{
    LlmBackend, LlmError, LlmRequest, LlmSession, TemperatureSchedule, TokenReport,
};
use crate::pcx::{
    apply_formatted, build_prompt, extract_json, format_fallback, parse_outcome, ExecutionOutcome,
    PcxError, PrintRecord, ProgramLibrary, PseudoProgram,
};
use crate::report::{BugCategory, CrashReport, Frame};
use crate::retrieval::{RetrievedSource, SourceIndex};

pub const DEFAULT_RETRY_CAP: u32 = 10;
pub const DEFAULT_MAX_DEPTH: u32 = 24;

pub const CAT_PARAMETER: &str = "parameter of function";
pub const CAT_ASSIGNMENT: &str = "assignment from variable";
pub const CAT_CONSTANT: &str = "constant value";
pub const CAT_GLOBAL: &str = "global variable";
pub const CAT_RETURN: &str = "return value of function call";
pub const CAT_FIELD: &str = "field of a structure";
pub const CAT_STACK: &str = "stack variable";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no source for `{0}` in the index")]
    RetrievalFailed(String),
    #[error("crash variable not identified after retry")]
    VariableUnidentified,
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("ground truth unusable: {0}")]
    GroundTruthMissing(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Pcx(#[from] PcxError),
    #[error(transparent)]
    Esv(#[from] EsvError),
    #[error("audit log: {0}")]
    Audit(#[from] std::io::Error),
}

/// How the current task came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaintOrigin {
    CrashSite,
    ParameterHop,
    AssignmentHop,
}

/// One unit of backward taint analysis: trace `variable` inside `function`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintTask {
    pub variable: String,
    pub function: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hint_line: Option<u32>,
    pub origin: TaintOrigin,
    pub depth: u32,
}

impl TaintTask {
    /// The distilled result of the step that produced this task, in the
    /// uniform `outcome.v1` shape. This JSON — never the raw reply — is
    /// what the next prompt embeds, so each request stays self-contained.
    pub fn intermediate_json(&self) -> Value {
        let mut fields = serde_json::Map::new();
        fields.insert("Variable".into(), json!(self.variable));
        if let Some(line) = self.hint_line {
            fields.insert("Line".into(), json!(line.to_string()));
        }
        let category = match self.origin {
            TaintOrigin::CrashSite => "crash site",
            TaintOrigin::ParameterHop => {
                fields.insert("Caller".into(), json!(self.function));
                CAT_PARAMETER
            }
            TaintOrigin::AssignmentHop => CAT_ASSIGNMENT,
        };
        json!({ "schema": "outcome.v1", "category": category, "fields": fields })
    }
}

/// What a verified record means for the walk: stop at a sink, or hop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Resolution {
    SinkConstant,
    SinkGlobal,
    SinkReturnValue,
    SinkStructField,
    SinkStackVariable,
    HopToCaller { next: TaintTask },
    HopAssignment { next: TaintTask },
}

impl Resolution {
    pub fn is_sink(&self) -> bool {
        !matches!(
            self,
            Resolution::HopToCaller { .. } | Resolution::HopAssignment { .. }
        )
    }
}

/// One completed (or abandoned) taint-analysis step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaintStep {
    pub task: TaintTask,
    pub outcome: ExecutionOutcome,
    /// `None` when the step ended without a verified record (retries
    /// exhausted or a structural dead end — see `failure`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<Resolution>,
    pub attempts_used: u32,
    /// Violations across *all* attempts of this step, in occurrence order.
    pub violations_seen: Vec<Violation>,
    /// Set when no amount of retrying could help (e.g. the verified-against
    /// caller exists only as a macro expansion, so its source can never be
    /// retrieved).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageStatus {
    Verified,
    ExhaustedRetries,
    DepthLimited,
    RetrievalFailed,
}

impl TriageStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TriageStatus::Verified => "verified",
            TriageStatus::ExhaustedRetries => "exhausted_retries",
            TriageStatus::DepthLimited => "depth_limited",
            TriageStatus::RetrievalFailed => "retrieval_failed",
        }
    }
}

/// Full output of one triage run (`triage.v1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageResult {
    pub title: String,
    pub bug_category: BugCategory,
    pub status: TriageStatus,
    pub blamed_function: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blamed_file: Option<String>,
    /// True when the blame is best-effort (dead end mid-walk) rather than
    /// a verified sink.
    pub flagged: bool,
    pub chain: Vec<TaintStep>,
    pub total_executions: u64,
    pub total_violations: u64,
    pub token_report: TokenReport,
}

impl TriageResult {
    pub fn to_json(&self) -> Value {
        let mut value = serde_json::to_value(self).expect("triage result serializes");
        value
            .as_object_mut()
            .expect("triage result is an object")
            .insert("schema".into(), json!("triage.v1"));
        value
    }

    /// Canonical on-disk form: pretty JSON, sorted keys, trailing newline.
    /// Byte-identical across replays of the same cassette.
    pub fn to_json_string(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(&self.to_json()).expect("triage result serializes");
        text.push('\n');
        text
    }

    pub fn violation_class_counts(&self) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        for step in &self.chain {
            for violation in &step.violations_seen {
                let key = match violation.class {
                    ViolationClass::Unrecognized => "unrecognized",
                    ViolationClass::Incomplete => "incomplete",
                    ViolationClass::Inconsistent => "inconsistent",
                };
                *counts.entry(key.to_string()).or_insert(0) += 1;
            }
        }
        counts
    }
}

/// First trace index at or after the crash frame holding `function`.
fn trace_position(trace: &[Frame], crash_frame_index: usize, function: &str) -> Option<usize> {
    trace
        .iter()
        .enumerate()
        .skip(crash_frame_index)
        .find(|(_, f)| f.function == function)
        .map(|(i, _)| i)
}

fn parse_line_number(value: &str) -> Option<u32> {
    let value = value.trim();
    if let Ok(n) = value.parse::<u32>() {
        return Some(n);
    }
    value
        .split_once(':')
        .and_then(|(head, _)| head.trim().parse::<u32>().ok())
}

/// A parameter hop must move outward: the reported Caller has to sit later
/// in the call trace than the function under analysis. Returns a synthetic
/// violation when it does not. (Caller absence from the trace is already
/// an esv predicate; this covers the in-trace-but-inward case.)
pub fn hop_position_violation(
    record: &PrintRecord,
    current_function: &str,
    trace: &[Frame],
    crash_frame_index: usize,
    record_index: usize,
) -> Option<Violation> {
    if record.category != CAT_PARAMETER {
        return None;
    }
    let caller = record.field("Caller")?;
    let current = trace_position(trace, crash_frame_index, current_function)?;
    let caller_pos = trace_position(trace, crash_frame_index, caller)?;
    if caller_pos > current {
        return None;
    }
    Some(Violation {
        class: ViolationClass::Inconsistent,
        rule_id: "hop_position".into(),
        detail: format!(
            "caller `{caller}` does not sit outward of `{current_function}` in the call trace"
        ),
        record_index: Some(record_index),
    })
}

/// The formatter could not coerce the reply into JSON: the execution is
/// unrecognizable.
pub fn format_failed_violation(detail: &str) -> Violation {
    Violation {
        class: ViolationClass::Unrecognized,
        rule_id: "format".into(),
        detail: format!("format fallback failed: {detail}"),
        record_index: None,
    }
}

fn truncated_violation(completion_tokens: u64) -> Violation {
    Violation {
        class: ViolationClass::Unrecognized,
        rule_id: "truncated".into(),
        detail: format!("response truncated at {completion_tokens} completion tokens"),
        record_index: None,
    }
}

/// Map a verified record to what the walk does next.
fn resolve_record(record: &PrintRecord, task: &TaintTask) -> Option<Resolution> {
    match record.category.as_str() {
        CAT_PARAMETER => Some(Resolution::HopToCaller {
            next: TaintTask {
                variable: record.field("Variable")?.to_string(),
                function: record.field("Caller")?.to_string(),
                hint_line: record.field("Line").and_then(parse_line_number),
                origin: TaintOrigin::ParameterHop,
                depth: task.depth + 1,
            },
        }),
        CAT_ASSIGNMENT => Some(Resolution::HopAssignment {
            next: TaintTask {
                variable: record.field("Variable")?.to_string(),
                function: task.function.clone(),
                hint_line: record.field("Line").and_then(parse_line_number),
                origin: TaintOrigin::AssignmentHop,
                depth: task.depth + 1,
            },
        }),
        CAT_CONSTANT => Some(Resolution::SinkConstant),
        CAT_GLOBAL => Some(Resolution::SinkGlobal),
        CAT_RETURN => Some(Resolution::SinkReturnValue),
        CAT_FIELD => Some(Resolution::SinkStructField),
        CAT_STACK => Some(Resolution::SinkStackVariable),
        _ => None,
    }
}

fn extract_variable(text: &str) -> Option<String> {
    if let Some((value, _)) = extract_json(text) {
        let candidate = value
            .get("variable")
            .or_else(|| value.get("Variable"))
            .and_then(Value::as_str)
            .map(str::trim);
        if let Some(v) = candidate {
            if !v.is_empty() {
                return Some(v.to_string());
            }
        }
    }
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?m)^\s*Variable\s*:\s*(\S+)\s*$").unwrap());
    if let Some(caps) = re.captures(text) {
        return Some(caps.get(1).unwrap().as_str().to_string());
    }
    static IDENT: OnceLock<Regex> = OnceLock::new();
    let ident = IDENT.get_or_init(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_]*$").unwrap());
    let trimmed = text.trim().trim_matches('`');
    if ident.is_match(trimmed) {
        return Some(trimmed.to_string());
    }
    None
}

/// One triage run: owns the LLM session (and its token ledger), borrows
/// the immutable source index. Strictly sequential — each step's task is
/// derived from the previous step's verified record.
pub struct TriageSession<'a> {
    index: &'a SourceIndex,
    session: LlmSession,
    programs: ProgramLibrary,
    specs: SpecLibrary,
    schedule: TemperatureSchedule,
    retry_cap: u32,
    max_depth: u32,
    audit: Option<AuditWriter>,
    step_no: u32,
}

impl<'a> TriageSession<'a> {
    pub fn new(index: &'a SourceIndex, backend: Box<dyn LlmBackend>) -> TriageSession<'a> {
        TriageSession {
            index,
            session: LlmSession::new(backend),
            programs: ProgramLibrary::builtin(),
            specs: SpecLibrary::builtin(),
            schedule: TemperatureSchedule::default(),
            retry_cap: DEFAULT_RETRY_CAP,
            max_depth: DEFAULT_MAX_DEPTH,
            audit: None,
            step_no: 0,
        }
    }

    pub fn with_retry_cap(mut self, retry_cap: u32) -> Self {
        self.retry_cap = retry_cap;
        self
    }

    pub fn with_max_depth(mut self, max_depth: u32) -> Self {
        self.max_depth = max_depth;
        self
    }

    pub fn with_programs(mut self, programs: ProgramLibrary) -> Self {
        self.programs = programs;
        self
    }

    pub fn with_specs(mut self, specs: SpecLibrary) -> Self {
        self.specs = specs;
        self
    }

    pub fn with_audit(mut self, writer: AuditWriter) -> Self {
        self.audit = Some(writer);
        self
    }

    pub fn token_report(&self) -> TokenReport {
        self.session.token_report()
    }

    /// Program/spec pair for this bug category: stack out-of-bounds gets
    /// the variant whose sink set includes the stack variable.
    fn pair_ids(category: &BugCategory) -> (&'static str, &'static str) {
        if matches!(category, BugCategory::StackOutOfBounds) {
            ("backward_taint_stack.v1", "backward_taint_stack.v1")
        } else {
            ("backward_taint.v1", "backward_taint.v1")
        }
    }

    fn program(&self, id: &str) -> Result<PseudoProgram, AgentError> {
        self.programs
            .get(id)
            .cloned()
            .ok_or_else(|| AgentError::BadConfig(format!("program {id} not in library")))
    }

    fn spec(&self, id: &str) -> Result<ExecutionSpec, AgentError> {
        self.specs
            .get(id)
            .cloned()
            .ok_or_else(|| AgentError::BadConfig(format!("spec {id} not in library")))
    }

    #[allow(clippy::too_many_arguments)]
    fn log_execution(
        &mut self,
        step: u32,
        attempt: u32,
        request: &LlmRequest,
        program: &PseudoProgram,
        function: &str,
        provided: &[String],
        tokens: (u64, u64),
        raw_reply: &str,
        formatted: Option<Value>,
        violations: &[Violation],
    ) -> Result<(), AgentError> {
        let Some(writer) = self.audit.as_mut() else {
            return Ok(());
        };
        writer.log(&AuditEvent::Execution {
            step,
            attempt,
            tag: request.tag.as_str().to_string(),
            temperature: request.temperature,
            prompt_sha256: request.prompt_sha256(),
            program_id: program.id.clone(),
            spec_ref: program.spec_ref.clone(),
            function: function.to_string(),
            provided: provided.to_vec(),
            prompt_tokens: tokens.0,
            completion_tokens: tokens.1,
            raw_reply: raw_reply.to_string(),
            formatted,
            violations: violations.to_vec(),
        })?;
        Ok(())
    }

    /// Sub-task 1: ask which variable the crash frame dereferences. One
    /// retry (0.2) on an unusable reply, then [`AgentError::VariableUnidentified`].
    pub fn identify_crash_variable(
        &mut self,
        report: &CrashReport,
    ) -> Result<TaintTask, AgentError> {
        let frame = report.crash_frame().clone();
        let function = frame.function.clone();
        let source = self.index.retrieve_one(&function);
        if matches!(source, RetrievedSource::NotFound) {
            return Err(AgentError::RetrievalFailed(function));
        }
        let mut sources = BTreeMap::new();
        sources.insert(function.clone(), source);
        let provided: Vec<String> = sources.keys().cloned().collect();

        let program = self.program("identify_crash_variable.v1")?;
        let probe = TaintTask {
            variable: String::new(),
            function: function.clone(),
            hint_line: frame.line,
            origin: TaintOrigin::CrashSite,
            depth: 0,
        };
        let mut request = build_prompt(&program, &probe, &sources, report)?;

        for attempt in 0..2 {
            request.temperature = self.schedule.temperature_for(attempt);
            let response = match self.session.complete(&request, attempt > 0) {
                Ok(r) => r,
                Err(LlmError::ResponseTruncated(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            let variable = extract_variable(&response.text);
            self.log_execution(
                0,
                attempt,
                &request,
                &program,
                &function,
                &provided,
                (response.prompt_tokens, response.completion_tokens),
                &response.text,
                None,
                &[],
            )?;
            if let Some(variable) = variable {
                return Ok(TaintTask {
                    variable,
                    function,
                    hint_line: frame.line,
                    origin: TaintOrigin::CrashSite,
                    depth: 0,
                });
            }
        }
        Err(AgentError::VariableUnidentified)
    }

    /// One backward step: prompt → parse (→ format fallback) → verify;
    /// on violations retry the *identical* prompt with the next hotter
    /// temperature, up to `retry_cap` retries.
    pub fn taint_step(
        &mut self,
        task: &TaintTask,
        report: &CrashReport,
    ) -> Result<TaintStep, AgentError> {
        self.step_no += 1;
        let step_no = self.step_no;
        let (program_id, spec_id) = Self::pair_ids(&report.bug_category);
        let program = self.program(program_id)?;
        let spec = self.spec(spec_id)?;

        let current = self.index.retrieve_one(&task.function);
        if matches!(current, RetrievedSource::NotFound) {
            return Err(AgentError::RetrievalFailed(task.function.clone()));
        }
        let mut sources = BTreeMap::new();
        sources.insert(task.function.clone(), current);
        // The trace-adjacent caller's body rides along: parameter-hop
        // records point at callsite lines that live there.
        let cur_pos = trace_position(&report.call_trace, report.crash_frame_index, &task.function);
        if let Some(pos) = cur_pos {
            if let Some(frame) = report.call_trace.get(pos + 1) {
                if frame.function != task.function && !sources.contains_key(&frame.function) {
                    if let found @ RetrievedSource::Found { .. } =
                        self.index.retrieve_one(&frame.function)
                    {
                        sources.insert(frame.function.clone(), found);
                    }
                }
            }
        }

        let index = self.index;
        let ctx = VerificationContext::new(
            &task.function,
            sources.clone(),
            report.call_trace.clone(),
            Some(index),
        );
        let mut request = build_prompt(&program, task, &sources, report)?;
        let provided: Vec<String> = sources.keys().cloned().collect();

        let mut violations_seen: Vec<Violation> = Vec::new();
        let mut last_outcome: Option<ExecutionOutcome> = None;
        for attempt in 0..=self.retry_cap {
            let temperature = self.schedule.temperature_for(attempt);
            request.temperature = temperature;
            let response = match self.session.complete(&request, attempt > 0) {
                Ok(r) => r,
                Err(LlmError::ResponseTruncated(tokens)) => {
                    let violations = vec![truncated_violation(tokens)];
                    self.log_execution(
                        step_no, attempt, &request, &program, &task.function, &provided,
                        (0, 0), "", None, &violations,
                    )?;
                    violations_seen.extend(violations);
                    continue;
                }
                Err(e) => return Err(e.into()),
            };

            let mut outcome = parse_outcome(&response.text, &program);
            outcome.annotate_attempt(attempt, temperature);
            let mut formatted = None;
            let mut violations = Vec::new();
            if outcome.needs_format_fallback {
                match format_fallback(&response.text, &self.session) {
                    Ok(value) => {
                        apply_formatted(&mut outcome, &value);
                        formatted = Some(value);
                    }
                    Err(PcxError::FormatFailed(detail)) => {
                        violations.push(format_failed_violation(&detail));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if violations.is_empty() {
                violations = verify(&outcome, &spec, &ctx)?;
                for (i, record) in outcome.records.iter().enumerate() {
                    if let Some(v) = hop_position_violation(
                        record,
                        &task.function,
                        &report.call_trace,
                        report.crash_frame_index,
                        i,
                    ) {
                        violations.push(v);
                    }
                }
            }
            self.log_execution(
                step_no,
                attempt,
                &request,
                &program,
                &task.function,
                &provided,
                (response.prompt_tokens, response.completion_tokens),
                &response.text,
                formatted,
                &violations,
            )?;

            // Structural dead end: the record names an in-trace caller
            // whose definition the index cannot produce (macro-expanded or
            // out of corpus). Retrying cannot fix that.
            let unretrievable_caller = outcome.records.iter().find_map(|record| {
                if record.category != CAT_PARAMETER {
                    return None;
                }
                let caller = record.field("Caller")?;
                let in_trace =
                    trace_position(&report.call_trace, report.crash_frame_index, caller).is_some();
                if in_trace
                    && matches!(self.index.retrieve_one(caller), RetrievedSource::NotFound)
                {
                    Some(caller.to_string())
                } else {
                    None
                }
            });

            let clean = violations.is_empty();
            violations_seen.extend(violations);

            if clean {
                let resolution = resolve_record(&outcome.records[0], task);
                let failure = match resolution {
                    Some(_) => None,
                    None => Some("verified record resolves to no known action".to_string()),
                };
                return Ok(TaintStep {
                    task: task.clone(),
                    outcome,
                    resolution,
                    attempts_used: attempt + 1,
                    violations_seen,
                    failure,
                });
            }
            if let Some(caller) = unretrievable_caller {
                return Ok(TaintStep {
                    task: task.clone(),
                    outcome,
                    resolution: None,
                    attempts_used: attempt + 1,
                    violations_seen,
                    failure: Some(format!(
                        "source for caller `{caller}` is unavailable (macro-defined or outside the corpus)"
                    )),
                });
            }
            last_outcome = Some(outcome);
        }

        Ok(TaintStep {
            task: task.clone(),
            outcome: last_outcome.expect("at least one attempt ran"),
            resolution: None,
            attempts_used: self.retry_cap + 1,
            violations_seen,
            failure: None,
        })
    }

    /// Full run: identify, then step until a sink, a dead end, or the
    /// depth limit. Analysis-level failures become statuses; only backend
    /// and configuration problems surface as errors.
    pub fn triage(&mut self, report: &CrashReport) -> Result<TriageResult, AgentError> {
        self.step_no = 0;
        let (program_id, spec_id) = Self::pair_ids(&report.bug_category);
        if let Some(writer) = self.audit.as_mut() {
            writer.log(&AuditEvent::RunStart {
                schema: AUDIT_SCHEMA.into(),
                title: report.title.clone(),
                bug_category: report.bug_category.label().to_string(),
                call_trace: report.call_trace.clone(),
                crash_frame_index: report.crash_frame_index,
                program_id: program_id.into(),
                spec_id: spec_id.into(),
            })?;
        }

        let mut chain: Vec<TaintStep> = Vec::new();
        let (status, blamed_function) = 'run: {
            let mut task = match self.identify_crash_variable(report) {
                Ok(task) => task,
                Err(AgentError::RetrievalFailed(function)) => {
                    break 'run (TriageStatus::RetrievalFailed, function);
                }
                Err(AgentError::VariableUnidentified) => {
                    break 'run (
                        TriageStatus::ExhaustedRetries,
                        report.crash_frame().function.clone(),
                    );
                }
                Err(e) => return Err(e),
            };
            loop {
                if task.depth >= self.max_depth {
                    let blame = chain
                        .last()
                        .map(|s| s.task.function.clone())
                        .unwrap_or_else(|| task.function.clone());
                    break 'run (TriageStatus::DepthLimited, blame);
                }
                let step = match self.taint_step(&task, report) {
                    Ok(step) => step,
                    Err(AgentError::RetrievalFailed(_)) => {
                        let blame = chain
                            .last()
                            .map(|s| s.task.function.clone())
                            .unwrap_or_else(|| task.function.clone());
                        break 'run (TriageStatus::RetrievalFailed, blame);
                    }
                    Err(e) => return Err(e),
                };
                let resolution = step.resolution.clone();
                let failed = step.failure.is_some();
                let function = step.task.function.clone();
                chain.push(step);
                match resolution {
                    Some(Resolution::HopToCaller { next })
                    | Some(Resolution::HopAssignment { next }) => task = next,
                    Some(_) => break 'run (TriageStatus::Verified, function),
                    None if failed => {
                        break 'run (TriageStatus::RetrievalFailed, function);
                    }
                    None => break 'run (TriageStatus::ExhaustedRetries, function),
                }
            }
        };
        // Anything short of a verified sink needs human attention.
        let flagged = status != TriageStatus::Verified;

        let blamed_file = self
            .index
            .retrieve_one(&blamed_function)
            .first()
            .map(|d| d.location.file.clone());
        let total_executions: u64 = chain.iter().map(|s| u64::from(s.attempts_used)).sum();
        let total_violations: u64 = chain.iter().map(|s| s.violations_seen.len() as u64).sum();
        let result = TriageResult {
            title: report.title.clone(),
            bug_category: report.bug_category.clone(),
            status,
            blamed_function,
            blamed_file,
            flagged,
            chain,
            total_executions,
            total_violations,
            token_report: self.session.token_report(),
        };
        if let Some(writer) = self.audit.as_mut() {
            writer.log(&AuditEvent::RunResult {
                status: result.status.as_str().to_string(),
                blamed_function: result.blamed_function.clone(),
                flagged: result.flagged,
                total_executions: result.total_executions,
                total_violations: result.total_violations,
            })?;
        }
        Ok(result)
    }
}

/// Where the fix actually landed, for scoring a triage run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchTruth {
    pub bug_id: String,
    pub patched_functions: Vec<PatchedFunction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchedFunction {
    pub name: String,
    pub file: String,
}

pub fn load_patch_truth(path: &Path) -> Result<PatchTruth, AgentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AgentError::GroundTruthMissing(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| AgentError::GroundTruthMissing(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Correctness {
    Function,
    Callee,
    Related,
    Wrong,
}

impl Correctness {
    /// "Correct" in the scoring sense: anything but Wrong.
    pub fn is_correct(self) -> bool {
        !matches!(self, Correctness::Wrong)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Correctness::Function => "Function",
            Correctness::Callee => "Callee",
            Correctness::Related => "Related",
            Correctness::Wrong => "Wrong",
        }
    }
}

fn first_two_components(path: &str) -> Option<(&str, &str)> {
    let mut parts = path.split('/');
    match (parts.next(), parts.next()) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    }
}

/// Score a blamed function against the patch: exact match, direct callee,
/// same file / same module, or wrong.
pub fn classify_correctness(
    result: &TriageResult,
    truth: &PatchTruth,
    index: &SourceIndex,
) -> Result<Correctness, AgentError> {
    if truth.patched_functions.is_empty() {
        return Err(AgentError::GroundTruthMissing(format!(
            "{}: no patched functions listed",
            truth.bug_id
        )));
    }
    let blamed = &result.blamed_function;
    if truth.patched_functions.iter().any(|p| &p.name == blamed) {
        return Ok(Correctness::Function);
    }

    let blamed_source = index.retrieve_one(blamed);
    if let RetrievedSource::Found { definitions, .. } = &blamed_source {
        for patched in &truth.patched_functions {
            let call = Regex::new(&format!(r"\b{}\s*\(", regex::escape(&patched.name)))
                .expect("escaped name compiles");
            if definitions.iter().any(|d| call.is_match(&d.text)) {
                return Ok(Correctness::Callee);
            }
        }
    }

    let blamed_file = result
        .blamed_file
        .clone()
        .or_else(|| blamed_source.first().map(|d| d.location.file.clone()));
    if let Some(blamed_file) = blamed_file {
        for patched in &truth.patched_functions {
            if patched.file == blamed_file {
                return Ok(Correctness::Related);
            }
            if let (Some(a), Some(b)) = (
                first_two_components(&patched.file),
                first_two_components(&blamed_file),
            ) {
                if a == b {
                    return Ok(Correctness::Related);
                }
            }
        }
    }
    Ok(Correctness::Wrong)
}
