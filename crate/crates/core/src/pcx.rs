//! Pseudo-code execution prompting.
//!
//! A [`PseudoProgram`] is a data file: a small `key: value` header, a
//! preamble (the system prompt), and a pseudo-code body with placeholders
//! (`{variable}`, `{function_name}`, `{source_code}`, `{call_trace}`,
//! `{bug_category}`). [`build_prompt`] fills the placeholders and assembles
//! the user prompt: task statement, pseudo-code block, annotated source,
//! JSON-result instruction — always from scratch, never from chat history.
//!
//! [`parse_outcome`] recovers the machine-readable result. Rule-based
//! parsing of `Field: value` print lines is primary; a fenced or trailing
//! JSON object is the secondary source; [`format_fallback`] asks the model
//! to reformat free text only when both fail.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agent::{TaintOrigin, TaintTask};
use crate::llm::{LlmError, LlmRequest, LlmSession, PhaseTag};
use crate::report::CrashReport;
use crate::retrieval::RetrievedSource;

/// The preamble of every pseudo-code program must pin the model to strict
/// simulation; verification depends on output produced *by the program*.
pub const SIMULATE_PHRASE: &str = "strictly simulate the execution of the pseudo code";
pub const STEP_BY_STEP_PHRASE: &str = "step by step";

pub const PLACEHOLDERS: &[&str] = &[
    "{variable}",
    "{function_name}",
    "{source_code}",
    "{call_trace}",
    "{bug_category}",
];

#[derive(Debug, Error)]
pub enum PcxError {
    #[error("bad program: {0}")]
    BadProgram(String),
    #[error("missing binding for {0}")]
    MissingBinding(String),
    #[error("no retrieved source for function {0}")]
    MissingSource(String),
    #[error("format fallback failed: {0}")]
    FormatFailed(String),
}

/// A prompt program: preamble plus (for execution programs) a pseudo-code
/// body that the model must simulate. Programs with an empty `spec_ref`
/// are plain natural-language prompts and skip the simulation machinery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoProgram {
    pub id: String,
    pub spec_ref: String,
    pub accepted_categories: Vec<String>,
    pub preamble: String,
    pub template: String,
}

impl PseudoProgram {
    /// True when the program drives pseudo-code execution (and its outcome
    /// is subject to verification against `spec_ref`).
    pub fn is_execution_program(&self) -> bool {
        !self.spec_ref.is_empty()
    }
}

/// Parse the on-disk program format: `key: value` header lines (plus `#`
/// comments) up to `---`, preamble up to the next `---`, body after.
pub fn parse_program(text: &str) -> Result<PseudoProgram, PcxError> {
    let mut sections = text.splitn(3, "\n---\n");
    let header = sections
        .next()
        .ok_or_else(|| PcxError::BadProgram("empty program file".into()))?;
    let preamble = sections
        .next()
        .ok_or_else(|| PcxError::BadProgram("missing preamble section".into()))?
        .trim()
        .to_string();
    let template = sections
        .next()
        .map(|s| s.trim().to_string())
        .unwrap_or_default();

    let mut id = String::new();
    let mut spec_ref = String::new();
    let mut accepted_categories = Vec::new();
    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(PcxError::BadProgram(format!("bad header line: {line}")));
        };
        let value = value.trim();
        match key.trim() {
            "id" => id = value.to_string(),
            "spec_ref" => spec_ref = value.to_string(),
            "accepted_categories" => {
                accepted_categories = value
                    .split(',')
                    .map(|c| c.trim().to_string())
                    .filter(|c| !c.is_empty())
                    .collect();
            }
            other => {
                return Err(PcxError::BadProgram(format!("unknown header key: {other}")));
            }
        }
    }
    if id.is_empty() {
        return Err(PcxError::BadProgram("program has no id".into()));
    }

    let program = PseudoProgram {
        id,
        spec_ref,
        accepted_categories,
        preamble,
        template,
    };
    if program.is_execution_program() {
        if !program.preamble.contains(SIMULATE_PHRASE) {
            return Err(PcxError::BadProgram(format!(
                "execution program {} preamble lacks \"{SIMULATE_PHRASE}\"",
                program.id
            )));
        }
        if !program.preamble.to_lowercase().contains(STEP_BY_STEP_PHRASE) {
            return Err(PcxError::BadProgram(format!(
                "execution program {} preamble lacks a step-by-step instruction",
                program.id
            )));
        }
        if program.template.is_empty() {
            return Err(PcxError::BadProgram(format!(
                "execution program {} has no pseudo-code body",
                program.id
            )));
        }
    }
    Ok(program)
}

/// Render a call trace for embedding into prompts.
fn render_trace(report: &CrashReport) -> String {
    report
        .call_trace
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut line = format!("#{i} {}", f.function);
            if let (Some(file), Some(no)) = (&f.file, f.line) {
                line.push_str(&format!(" ({file}:{no})"));
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Render the retrieved sources (annotated, with per-function headers).
fn render_sources(sources: &BTreeMap<String, RetrievedSource>) -> String {
    let mut out = String::new();
    for (name, source) in sources {
        if let RetrievedSource::Found {
            definitions,
            ambiguous,
        } = source
        {
            for def in definitions {
                out.push_str(&format!("Function or structure {name}"));
                if *ambiguous {
                    out.push_str(" (one of several definitions with this name)");
                }
                out.push_str(":\n");
                out.push_str(&def.annotated);
                out.push_str("\n\n");
            }
        }
    }
    out.trim_end().to_string()
}

/// Build the single stateless request for one taint step (or for a prose
/// program such as the crash-variable identifier). The prompt is a pure
/// function of the arguments: program text, task, retrieved sources and
/// the crash report. Nothing from previous model replies is included
/// beyond the distilled intermediate result carried by `task`.
pub fn build_prompt(
    program: &PseudoProgram,
    task: &TaintTask,
    sources: &BTreeMap<String, RetrievedSource>,
    report: &CrashReport,
) -> Result<LlmRequest, PcxError> {
    if task.variable.trim().is_empty() && program.template.contains("{variable}") {
        return Err(PcxError::MissingBinding("variable".into()));
    }
    match sources.get(&task.function) {
        Some(RetrievedSource::Found { .. }) => {}
        _ => return Err(PcxError::MissingSource(task.function.clone())),
    }

    let trace = render_trace(report);
    let source_code = render_sources(sources);
    let bindings: [(&str, &str); 5] = [
        ("{variable}", task.variable.as_str()),
        ("{function_name}", task.function.as_str()),
        ("{source_code}", source_code.as_str()),
        ("{call_trace}", trace.as_str()),
        ("{bug_category}", report.bug_category.label()),
    ];
    let substitute = |text: &str| -> String {
        let mut out = text.to_string();
        for (key, value) in bindings {
            out = out.replace(key, value);
        }
        out
    };

    let body = substitute(&program.template);
    let preamble = substitute(&program.preamble);
    for placeholder in PLACEHOLDERS {
        if body.contains(placeholder) || preamble.contains(placeholder) {
            return Err(PcxError::MissingBinding(placeholder.to_string()));
        }
    }

    let user_prompt = if program.is_execution_program() {
        let mut user = format!(
            "Task: perform one backward taint-analysis step.\n\
             Target variable: {}\n\
             Current function: {}\n\
             Bug category: {}\n",
            task.variable,
            task.function,
            report.bug_category.label()
        );
        if let Some(line) = task.hint_line {
            user.push_str(&format!("Start from line {line} of {}.\n", task.function));
        }
        if task.origin != TaintOrigin::CrashSite {
            user.push_str(&format!(
                "Intermediate result from the previous step:\n{}\n",
                serde_json::to_string(&task.intermediate_json()).expect("task serializes")
            ));
        }
        if !program.template.contains("{call_trace}") {
            user.push_str(&format!("Call trace (innermost call first):\n{trace}\n"));
        }
        user.push_str(&format!("\nPseudo code:\n```\n{body}\n```\n"));
        if !program.template.contains("{source_code}") {
            user.push_str(&format!("\nSource code:\n{source_code}\n"));
        }
        user.push_str(
            "\nAfter the execution process and the print output, the output must be the \
             following JSON structure: {\"category\": \"<printed category>\", \
             \"fields\": {\"<printed field name>\": \"<printed value>\"}}\n",
        );
        user
    } else {
        // Prose program: the substituted body is the whole user prompt.
        body
    };

    Ok(LlmRequest::new(
        if program.is_execution_program() {
            PhaseTag::PseudoExec
        } else {
            PhaseTag::IdentifyVariable
        },
        preamble,
        user_prompt,
    ))
}

/// One parsed `Print` record: the category line plus its field lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrintRecord {
    pub category: String,
    pub fields: BTreeMap<String, String>,
}

impl PrintRecord {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }
}

/// Everything recovered from one model reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub program_id: String,
    pub spec_ref: String,
    pub raw: String,
    /// Raw execution-process lines, in order.
    pub steps: Vec<String>,
    pub records: Vec<PrintRecord>,
    /// `outcome.v1` view of the result.
    pub normalized: Value,
    /// No print records and no JSON block: only the formatter can help.
    pub needs_format_fallback: bool,
    pub attempt: u32,
    pub temperature_used: f64,
}

impl ExecutionOutcome {
    /// Stamp which attempt produced this outcome (also reflected in the
    /// normalized JSON).
    pub fn annotate_attempt(&mut self, attempt: u32, temperature: f64) {
        self.attempt = attempt;
        self.temperature_used = temperature;
        if let Some(obj) = self.normalized.as_object_mut() {
            obj.insert("attempt".into(), json!(attempt));
            obj.insert("temperature".into(), json!(temperature));
        }
    }
}

const PRINT_FIELDS: &[&str] = &[
    "Category", "Variable", "Line", "Caller", "Function", "Field", "Structure", "Value",
];

fn print_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(Category|Variable|Line|Caller|Function|Field|Structure|Value)\s*:\s*(.+)$")
            .unwrap()
    })
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```(?:json|JSON)?\s*\n(.*?)```").unwrap())
}

/// Extract a JSON object from the reply: first fenced block that parses,
/// else the last `{...}` suffix that parses.
pub(crate) fn extract_json(raw: &str) -> Option<(Value, std::ops::Range<usize>)> {
    for caps in fence_re().captures_iter(raw) {
        let m = caps.get(1).unwrap();
        if let Ok(value) = serde_json::from_str::<Value>(m.as_str()) {
            if value.is_object() {
                let whole = caps.get(0).unwrap();
                return Some((value, whole.range()));
            }
        }
    }
    // Bare object: try successively earlier `{` starts from the end.
    let trimmed_end = raw.trim_end().len();
    let mut starts: Vec<usize> = raw[..trimmed_end]
        .char_indices()
        .filter(|(_, c)| *c == '{')
        .map(|(i, _)| i)
        .collect();
    starts.reverse();
    for start in starts {
        if let Ok(value) = serde_json::from_str::<Value>(&raw[start..trimmed_end]) {
            if value.is_object() {
                return Some((value, start..trimmed_end));
            }
        }
    }
    None
}

/// Canonicalize JSON keys to print-record field names.
fn canonical_field(key: &str) -> Option<&'static str> {
    PRINT_FIELDS
        .iter()
        .find(|f| f.eq_ignore_ascii_case(key))
        .copied()
}

fn record_from_json(value: &Value) -> Option<PrintRecord> {
    let obj = value.as_object()?;
    let category = obj.get("category").or_else(|| obj.get("Category"))?;
    let category = category.as_str()?.trim().to_string();
    if category.is_empty() {
        return None;
    }
    let mut fields = BTreeMap::new();
    let source = obj
        .get("fields")
        .and_then(Value::as_object)
        .unwrap_or(obj);
    for (key, val) in source {
        let Some(name) = canonical_field(key) else {
            continue;
        };
        if name == "Category" {
            continue;
        }
        let text = match val {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => continue,
        };
        fields.insert(name.to_string(), text);
    }
    Some(PrintRecord { category, fields })
}

/// Parse one model reply into structured form. Never fails: malformed
/// output surfaces as zero records and `needs_format_fallback`.
pub fn parse_outcome(raw: &str, program: &PseudoProgram) -> ExecutionOutcome {
    let json = extract_json(raw);

    // Byte spans of the JSON block, to keep its lines out of steps.
    let json_range = json.as_ref().map(|(_, r)| r.clone());

    let mut records: Vec<PrintRecord> = Vec::new();
    let mut steps: Vec<String> = Vec::new();
    let mut offset = 0usize;
    for line in raw.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        if let Some(range) = &json_range {
            if start >= range.start && start < range.end {
                continue;
            }
        }
        let line = line.trim_end_matches(['\n', '\r']);
        if let Some(caps) = print_line_re().captures(line) {
            let field = caps.get(1).unwrap().as_str();
            let value = caps.get(2).unwrap().as_str().trim().to_string();
            if field == "Category" {
                records.push(PrintRecord {
                    category: value,
                    fields: BTreeMap::new(),
                });
            } else if let Some(record) = records.last_mut() {
                // First occurrence wins; later duplicates are noise.
                record.fields.entry(field.to_string()).or_insert(value);
            } else {
                // Field line before any Category line: execution noise.
                steps.push(line.trim().to_string());
            }
        } else if !line.trim().is_empty() && !line.trim().starts_with("```") {
            steps.push(line.trim().to_string());
        }
    }

    // Rule-based parsing is primary; a JSON object only contributes a
    // record when the print grammar found none.
    if records.is_empty() {
        if let Some((value, _)) = &json {
            if let Some(record) = record_from_json(value) {
                records.push(record);
            }
        }
    }

    let needs_format_fallback = records.is_empty() && json.is_none();
    let (category, fields) = match records.first() {
        Some(first) => (
            json!(first.category),
            serde_json::to_value(&first.fields).expect("fields serialize"),
        ),
        None => (Value::Null, Value::Null),
    };
    let normalized = json!({
        "schema": "outcome.v1",
        "category": category,
        "fields": fields,
        "steps": steps,
        "attempt": 0,
        "temperature": 0.0,
    });

    ExecutionOutcome {
        program_id: program.id.clone(),
        spec_ref: program.spec_ref.clone(),
        raw: raw.to_string(),
        steps,
        records,
        normalized,
        needs_format_fallback,
        attempt: 0,
        temperature_used: 0.0,
    }
}

/// Merge a format-fallback JSON object into an outcome whose reply had no
/// parseable records. No-op when the JSON itself lacks a usable category.
pub fn apply_formatted(outcome: &mut ExecutionOutcome, value: &Value) {
    let Some(record) = record_from_json(value) else {
        return;
    };
    if let Some(obj) = outcome.normalized.as_object_mut() {
        obj.insert("category".into(), json!(record.category));
        obj.insert(
            "fields".into(),
            serde_json::to_value(&record.fields).expect("fields serialize"),
        );
    }
    outcome.records.push(record);
    outcome.needs_format_fallback = false;
}

/// Ask the model (tag `format`) to reformat free text into the outcome
/// JSON shape. One retry on unparseable output, then [`PcxError::FormatFailed`].
pub fn format_fallback(raw: &str, session: &LlmSession) -> Result<Value, PcxError> {
    let request = LlmRequest::new(
        PhaseTag::Format,
        "You reformat analysis output into JSON. Reply with JSON only.".into(),
        format!(
            "Summarize the analysis output below. The output must be the following JSON \
             structure: {{\"category\": \"<category>\", \"fields\": {{\"<field name>\": \
             \"<value>\"}}}}\n\nAnalysis output:\n{raw}\n"
        ),
    );
    let mut last_err = String::new();
    for attempt in 0..2 {
        match session.complete(&request, attempt > 0) {
            Ok(response) => match extract_json(&response.text) {
                Some((value, _)) => return Ok(value),
                None => last_err = "reply is not valid JSON".to_string(),
            },
            Err(LlmError::ResponseTruncated(_)) => last_err = "reply truncated".to_string(),
            Err(e) => return Err(PcxError::FormatFailed(e.to_string())),
        }
    }
    Err(PcxError::FormatFailed(last_err))
}

/// The shipped program library (embedded) plus any directory overrides.
#[derive(Debug, Clone)]
pub struct ProgramLibrary {
    programs: BTreeMap<String, PseudoProgram>,
}

pub const BUILTIN_PROGRAMS: &[&str] = &[
    include_str!("../assets/programs/backward_taint.v1.txt"),
    include_str!("../assets/programs/backward_taint_stack.v1.txt"),
    include_str!("../assets/programs/identify_crash_variable.v1.txt"),
];

impl ProgramLibrary {
    /// The embedded programs only.
    pub fn builtin() -> ProgramLibrary {
        let mut programs = BTreeMap::new();
        for text in BUILTIN_PROGRAMS {
            let program = parse_program(text).expect("builtin programs parse");
            programs.insert(program.id.clone(), program);
        }
        ProgramLibrary { programs }
    }

    /// Embedded programs plus `*.txt` files from a directory; same-id files
    /// override the builtins.
    pub fn with_dir(dir: &std::path::Path) -> Result<ProgramLibrary, PcxError> {
        let mut library = ProgramLibrary::builtin();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| PcxError::BadProgram(format!("program dir {}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
            .collect();
        paths.sort();
        for path in paths {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| PcxError::BadProgram(format!("{}: {e}", path.display())))?;
            let program = parse_program(&text)
                .map_err(|e| PcxError::BadProgram(format!("{}: {e}", path.display())))?;
            library.programs.insert(program.id.clone(), program);
        }
        Ok(library)
    }

    pub fn get(&self, id: &str) -> Option<&PseudoProgram> {
        self.programs.get(id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.programs.keys().map(String::as_str).collect()
    }
}
