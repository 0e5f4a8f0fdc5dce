//! Crash report parsing.
//!
//! Accepts raw kernel sanitizer reports (KASAN first, with a generic
//! fallback for the other `BUG:` families) and produces a structured
//! [`CrashReport`]: bug category, ordered call trace, auxiliary traces
//! (allocation / free stacks, secondary traces) and the index of the crash
//! frame — the first frame that is not sanitizer/reporting plumbing.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame prefixes that are sanitizer or report plumbing, not crash code.
/// The crash frame is the first trace entry that matches none of these.
pub const DEFAULT_SKIP_PREFIXES: &[&str] = &[
    "kasan_",
    "__kasan",
    "__asan",
    "check_memory_region",
    "dump_stack",
    "__dump_stack",
    "print_report",
    "print_address_description",
    "kasan_report",
    "memcpy",
    "memset",
    "memmove",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("empty call trace: {0}")]
    EmptyTrace(String),
}

/// Bug category, labeled exactly as sanitizer headers spell it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BugCategory {
    StackOutOfBounds,
    SlabOutOfBounds,
    GlobalOutOfBounds,
    InvalidFree,
    DoubleFree,
    UseAfterFree,
    NullPtrDef,
    /// Anything else (`wild-memory-access`, KMSAN/KCSAN/UBSAN labels, ...).
    Other(String),
}

impl BugCategory {
    pub fn from_label(label: &str) -> BugCategory {
        match label.trim() {
            "stack-out-of-bounds" => BugCategory::StackOutOfBounds,
            "slab-out-of-bounds" => BugCategory::SlabOutOfBounds,
            "global-out-of-bounds" => BugCategory::GlobalOutOfBounds,
            "invalid-free" => BugCategory::InvalidFree,
            "double-free" => BugCategory::DoubleFree,
            "use-after-free" => BugCategory::UseAfterFree,
            // Both the sanitizer spelling and the short label.
            "null-ptr-deref" | "null-ptr-def" => BugCategory::NullPtrDef,
            other => BugCategory::Other(other.to_string()),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            BugCategory::StackOutOfBounds => "stack-out-of-bounds",
            BugCategory::SlabOutOfBounds => "slab-out-of-bounds",
            BugCategory::GlobalOutOfBounds => "global-out-of-bounds",
            BugCategory::InvalidFree => "invalid-free",
            BugCategory::DoubleFree => "double-free",
            BugCategory::UseAfterFree => "use-after-free",
            BugCategory::NullPtrDef => "null-ptr-def",
            BugCategory::Other(label) => label,
        }
    }
}

impl fmt::Display for BugCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for BugCategory {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for BugCategory {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let label = String::deserialize(deserializer)?;
        Ok(BugCategory::from_label(&label))
    }
}

/// One call-trace entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub function: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<u32>,
    /// Raw frame suffix (`+0x1f/0x58 fs/itree.c:405`, `[inline]`, ...).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_info: Option<String>,
}

/// Structured crash report (`report.v1` when serialized).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashReport {
    pub title: String,
    pub bug_category: BugCategory,
    /// Primary call trace, innermost call first, outermost call last.
    pub call_trace: Vec<Frame>,
    /// Index into `call_trace` of the first non-sanitizer frame.
    pub crash_frame_index: usize,
    /// Named secondary traces ("allocated", "freed", "call_trace_2", ...).
    pub aux_traces: BTreeMap<String, Vec<Frame>>,
    /// The unmodified report text.
    pub raw_text: String,
}

impl CrashReport {
    pub fn crash_frame(&self) -> &Frame {
        &self.call_trace[self.crash_frame_index]
    }

    /// Serialize with the `report.v1` schema tag.
    pub fn to_json(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("report serializes");
        value
            .as_object_mut()
            .expect("report is an object")
            .insert("schema".into(), "report.v1".into());
        value
    }
}

fn frame_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^(?P<fn>[A-Za-z_][A-Za-z0-9_.$]*)(?P<suffix>(?:\+0x[0-9a-fA-F]+/0x[0-9a-fA-F]+)?(?:\s+(?P<file>[A-Za-z0-9_./-]+):(?P<line>\d+))?(?:\s+\[inline\])?(?:\s+\[[A-Za-z0-9_.-]+\])?)$",
        )
        .unwrap()
    })
}

fn kasan_header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^BUG: (?P<tool>KASAN|KMSAN|KCSAN|KFENCE): (?P<label>[a-z0-9-]+(?:-[a-z0-9]+)*) (?:in|on) ").unwrap()
    })
}

/// Parse a frame line from a trace block. Returns `None` for non-frame
/// lines and for speculative frames (`? func+0x..`), which are unwinder
/// guesses and are dropped.
fn parse_frame(line: &str) -> Option<Frame> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with("? ") {
        return None;
    }
    if trimmed == "<TASK>" || trimmed == "</TASK>" || trimmed == "<IRQ>" || trimmed == "</IRQ>" {
        return None;
    }
    let caps = frame_re().captures(trimmed)?;
    let suffix = caps.name("suffix").map(|m| m.as_str().trim()).unwrap_or("");
    Some(Frame {
        function: caps["fn"].to_string(),
        file: caps.name("file").map(|m| m.as_str().to_string()),
        line: caps.name("line").and_then(|m| m.as_str().parse().ok()),
        offset_info: if suffix.is_empty() {
            None
        } else {
            Some(suffix.to_string())
        },
    })
}

fn find_header(raw: &str) -> Option<(String, BugCategory)> {
    for line in raw.lines() {
        let line = line.trim();
        if let Some(caps) = kasan_header_re().captures(line) {
            return Some((line.to_string(), BugCategory::from_label(&caps["label"])));
        }
        if line.starts_with("BUG: kernel NULL pointer dereference") {
            return Some((line.to_string(), BugCategory::NullPtrDef));
        }
        if line.starts_with("general protection fault") {
            // Non-canonical addresses here are almost always dereferences of
            // NULL plus a small offset; triage treats them as null-ptr-def.
            return Some((line.to_string(), BugCategory::NullPtrDef));
        }
        if let Some(rest) = line.strip_prefix("UBSAN: ") {
            let label = rest.split(" in ").next().unwrap_or(rest).trim();
            return Some((line.to_string(), BugCategory::Other(label.to_string())));
        }
    }
    None
}

/// Section headers that terminate a trace block.
fn is_section_boundary(line: &str) -> bool {
    let t = line.trim();
    t.starts_with("Allocated by task")
        || t.starts_with("Freed by task")
        || t.starts_with("Last potentially related work creation")
        || t.starts_with("The buggy address")
        || t.starts_with("Memory state around")
        || t.starts_with("Call Trace:")
        || t.starts_with("=====")
}

/// Parse a raw sanitizer report with the default skip prefixes.
pub fn parse_report(raw: &str) -> Result<CrashReport, ReportError> {
    parse_report_with(raw, DEFAULT_SKIP_PREFIXES)
}

/// Parse a raw sanitizer report. `skip_prefixes` decides which leading
/// frames are sanitizer plumbing when locating the crash frame.
pub fn parse_report_with(raw: &str, skip_prefixes: &[&str]) -> Result<CrashReport, ReportError> {
    if raw.trim().is_empty() {
        return Err(ReportError::MalformedReport("empty input".into()));
    }
    let (title, bug_category) = find_header(raw)
        .ok_or_else(|| ReportError::MalformedReport("no recognizable bug header".into()))?;

    let lines: Vec<&str> = raw.lines().collect();
    let mut call_trace: Vec<Frame> = Vec::new();
    let mut aux_traces: BTreeMap<String, Vec<Frame>> = BTreeMap::new();
    let mut secondary = 0usize;

    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim();
        let block_name: Option<String> = if line.starts_with("Call Trace:") {
            if call_trace.is_empty() {
                Some(String::new()) // primary
            } else {
                secondary += 1;
                Some(format!("call_trace_{}", secondary + 1))
            }
        } else if line.starts_with("Allocated by task") {
            Some(unique_key(&aux_traces, "allocated"))
        } else if line.starts_with("Freed by task") {
            Some(unique_key(&aux_traces, "freed"))
        } else {
            None
        };

        let Some(name) = block_name else {
            i += 1;
            continue;
        };

        let mut frames = Vec::new();
        i += 1;
        while i < lines.len() {
            let l = lines[i];
            if l.trim().is_empty() || is_section_boundary(l) {
                break;
            }
            if let Some(frame) = parse_frame(l) {
                frames.push(frame);
            }
            i += 1;
        }
        if name.is_empty() {
            call_trace = frames;
        } else {
            aux_traces.insert(name, frames);
        }
    }

    if call_trace.is_empty() {
        return Err(ReportError::EmptyTrace(
            "no frames under a Call Trace: header".into(),
        ));
    }

    let crash_frame_index = call_trace
        .iter()
        .position(|f| !skip_prefixes.iter().any(|p| f.function.starts_with(p)))
        .ok_or_else(|| {
            ReportError::EmptyTrace("all frames matched sanitizer skip prefixes".into())
        })?;

    Ok(CrashReport {
        title,
        bug_category,
        call_trace,
        crash_frame_index,
        aux_traces,
        raw_text: raw.to_string(),
    })
}

fn unique_key(map: &BTreeMap<String, Vec<Frame>>, base: &str) -> String {
    if !map.contains_key(base) {
        return base.to_string();
    }
    let mut n = 2;
    loop {
        let key = format!("{base}_{n}");
        if !map.contains_key(&key) {
            return key;
        }
        n += 1;
    }
}
