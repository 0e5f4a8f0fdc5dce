//! Full triage of the bundled crash from a recorded cassette: parse, index,
//! walk the taint chain, verify every hop, and print the `triage.v1` result.
//!
//! Usage: cargo run -p ktriage --example scripted_triage

use std::path::Path;

use ktriage::llm::ScriptedBackend;
use ktriage::{build_index, parse_report, TriageSession};

fn main() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/motivating");
    let index = build_index(&fixtures.join("src"))?;
    let report = parse_report(&std::fs::read_to_string(fixtures.join("report.txt"))?)?;
    let backend = ScriptedBackend::from_path(&fixtures.join("cassette.jsonl"))?;

    let mut session = TriageSession::new(&index, Box::new(backend));
    let result = session.triage(&report)?;

    print!("{}", result.to_json_string());
    eprintln!(
        "blamed {} ({}) after {} executions, {} violations, status {}",
        result.blamed_function,
        result.blamed_file.as_deref().unwrap_or("?"),
        result.total_executions,
        result.total_violations,
        result.status.as_str()
    );
    Ok(())
}
