//! `audit.v1` run log: JSON lines, one event per line.
//!
//! The log carries everything needed to re-verify a run offline — prompt
//! hashes, temperatures, raw replies, violations, token counts — and
//! deliberately nothing more. No timestamps: two identical runs must
//! produce byte-identical logs.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::esv::Violation;
use crate::report::Frame;

pub const AUDIT_SCHEMA: &str = "audit.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    /// First line of every log.
    RunStart {
        schema: String,
        title: String,
        bug_category: String,
        call_trace: Vec<Frame>,
        crash_frame_index: usize,
        program_id: String,
        spec_id: String,
    },
    /// One LLM exchange: a taint-step attempt or the identify pass.
    Execution {
        /// 0 = crash-variable identification, then 1, 2, ... per taint step.
        step: u32,
        attempt: u32,
        tag: String,
        temperature: f64,
        prompt_sha256: String,
        program_id: String,
        spec_ref: String,
        function: String,
        /// Names whose sources were embedded in the prompt.
        provided: Vec<String>,
        prompt_tokens: u64,
        completion_tokens: u64,
        raw_reply: String,
        /// Format-fallback output, when the reply needed reformatting and
        /// the formatter succeeded.
        #[serde(skip_serializing_if = "Option::is_none")]
        formatted: Option<Value>,
        violations: Vec<Violation>,
    },
    /// Last line: how the run ended.
    RunResult {
        status: String,
        blamed_function: String,
        flagged: bool,
        total_executions: u64,
        total_violations: u64,
    },
}

pub struct AuditWriter {
    out: BufWriter<File>,
}

impl AuditWriter {
    pub fn create(path: &Path) -> io::Result<AuditWriter> {
        Ok(AuditWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Append one event; flushed per line so a crash mid-run still leaves
    /// a replayable prefix.
    pub fn log(&mut self, event: &AuditEvent) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, event)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read_audit(path: &Path) -> io::Result<Vec<AuditEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: AuditEvent = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        events.push(event);
    }
    Ok(events)
}

/// `numerator / denominator` as a percentage with two decimals — the
/// rounding used throughout the summary tables.
pub fn percent(numerator: u64, denominator: u64) -> String {
    format!("{:.2}", crate::llm::ratio(numerator, denominator) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esv::ViolationClass;

    #[test]
    fn events_round_trip_through_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.audit.jsonl");
        let events = vec![
            AuditEvent::RunStart {
                schema: AUDIT_SCHEMA.into(),
                title: "KASAN: null-ptr-deref in trylock_buffer".into(),
                bug_category: "null-ptr-def".into(),
                call_trace: vec![Frame {
                    function: "trylock_buffer".into(),
                    file: Some("include/buffer_ops.h".into()),
                    line: Some(399),
                    offset_info: None,
                }],
                crash_frame_index: 0,
                program_id: "backward_taint.v1".into(),
                spec_id: "backward_taint.v1".into(),
            },
            AuditEvent::Execution {
                step: 1,
                attempt: 0,
                tag: "pseudo_exec".into(),
                temperature: 0.0,
                prompt_sha256: "ab".repeat(32),
                program_id: "backward_taint.v1".into(),
                spec_ref: "backward_taint.v1".into(),
                function: "trylock_buffer".into(),
                provided: vec!["lock_buffer".into(), "trylock_buffer".into()],
                prompt_tokens: 900,
                completion_tokens: 120,
                raw_reply: "Category: parameter of function\n".into(),
                formatted: None,
                violations: vec![Violation {
                    class: ViolationClass::Incomplete,
                    rule_id: "fields".into(),
                    detail: "required field `Variable` is missing or empty".into(),
                    record_index: Some(0),
                }],
            },
            AuditEvent::RunResult {
                status: "verified".into(),
                blamed_function: "alloc_branch".into(),
                flagged: false,
                total_executions: 4,
                total_violations: 1,
            },
        ];
        let mut writer = AuditWriter::create(&path).unwrap();
        for event in &events {
            writer.log(event).unwrap();
        }
        drop(writer);
        assert_eq!(read_audit(&path).unwrap(), events);
    }

    #[test]
    fn log_lines_carry_no_timestamps() {
        let event = AuditEvent::RunResult {
            status: "verified".into(),
            blamed_function: "f".into(),
            flagged: false,
            total_executions: 1,
            total_violations: 0,
        };
        let line = serde_json::to_string(&event).unwrap();
        for needle in ["time", "date", "stamp"] {
            assert!(!line.contains(needle), "{needle} in {line}");
        }
    }

    #[test]
    fn percent_formats_to_two_decimals() {
        assert_eq!(percent(138, 170), "81.18");
        assert_eq!(percent(139, 546), "25.46");
        assert_eq!(percent(85, 139), "61.15");
        assert_eq!(percent(2_469_374, 5_361_780), "46.06");
        assert_eq!(percent(0, 0), "0.00");
        assert_eq!(percent(1, 3), "33.33");
    }

    #[test]
    fn malformed_audit_line_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"event\":\"run_result\"").unwrap();
        let err = read_audit(&path).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::InvalidData);
        assert!(err.to_string().contains(":1:"));
    }
}
