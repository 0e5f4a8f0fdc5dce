//! Backward taint analysis for kernel crash reports, driven by an LLM and
//! checked by a rule-based execution verifier.
//!
//! The pipeline: parse a sanitizer crash report, index the source snapshot,
//! then walk the crash variable backwards (callee to caller) one hop at a
//! time. Each hop is performed by prompting an LLM to *simulate* a small
//! pseudo-code program over the current function's source. The printed
//! execution result is parsed into records and verified against a
//! machine-readable execution specification; on violation the hop is retried
//! at a higher sampling temperature. The walk ends at a taint sink, and the
//! function holding the sink is blamed.
//!
//! Start from the runnable examples (each one covers a capability):
//!
//! ```text
//! cargo run -p ktriage --example parse_report      # crash report -> report.v1 JSON
//! cargo run -p ktriage --example build_index       # index a source tree -> index.v1
//! cargo run -p ktriage --example retrieve_source   # look up function/struct bodies
//! cargo run -p ktriage --example simulate_step     # build a prompt, parse the reply
//! cargo run -p ktriage --example verify_execution  # run the verifier on an outcome
//! cargo run -p ktriage --example scripted_triage   # full triage from a cassette
//! cargo run -p ktriage --example batch_eval        # batch run + accuracy tables
//! cargo run -p ktriage --example record_cassette   # record a live backend session
//! ```
//!
//! The `ktriage` binary exposes the same flows as subcommands
//! (`index`, `triage`, `eval`, `replay-verify`, `record`).

pub mod agent;
pub mod audit;
pub mod cli;
pub mod esv;
pub mod llm;
pub mod pcx;
pub mod report;
pub mod retrieval;

pub use agent::{classify_correctness, Correctness, PatchTruth, TriageResult, TriageSession};
pub use esv::{verify, ExecutionSpec, Violation, ViolationClass};
pub use llm::{LlmBackend, LlmRequest, LlmSession, TemperatureSchedule};
pub use pcx::{build_prompt, parse_outcome, ExecutionOutcome, PseudoProgram};

pub use report::{parse_report, BugCategory, CrashReport, Frame};
pub use retrieval::{build_index, DefinitionLocation, SourceIndex};

