//! Record a cassette while a triage runs, then prove the recording replays.
//!
//! Any backend can be wrapped; against a live endpoint you would use
//! `ktriage record REPORT --source-root SRC --cassette out.jsonl
//! --endpoint URL --model NAME`. This example wraps the bundled scripted
//! backend so it runs offline, which also demonstrates the round trip:
//! replay -> record -> replay.
//!
//! Usage: cargo run -p ktriage --example record_cassette

use std::path::Path;

use ktriage::llm::{read_cassette, RecordBackend, ScriptedBackend};
use ktriage::{build_index, parse_report, TriageSession};

fn main() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/motivating");
    let index = build_index(&fixtures.join("src"))?;
    let report = parse_report(&std::fs::read_to_string(fixtures.join("report.txt"))?)?;

    let recorded_path = std::env::temp_dir().join("ktriage-recorded-cassette.jsonl");
    let inner = ScriptedBackend::from_path(&fixtures.join("cassette.jsonl"))?;
    let recorder = RecordBackend::create(Box::new(inner), &recorded_path)?;

    let mut session = TriageSession::new(&index, Box::new(recorder));
    let result = session.triage(&report)?;
    println!(
        "recorded run: blamed {}, status {}",
        result.blamed_function,
        result.status.as_str()
    );

    let entries = read_cassette(&recorded_path)?;
    println!("cassette: {} entries at {}", entries.len(), recorded_path.display());
    for (i, entry) in entries.iter().enumerate() {
        let pinned = entry.match_on.as_ref().and_then(|m| m.prompt_sha256.as_deref());
        println!(
            "  entry {i}: {} reply bytes, prompt pin {}",
            entry.reply.len(),
            pinned.map(|h| &h[..12]).unwrap_or("none")
        );
    }

    // The recording replays the same triage byte-for-byte.
    let replay = ScriptedBackend::from_path(&recorded_path)?;
    let mut session = TriageSession::new(&index, Box::new(replay));
    let replayed = session.triage(&report)?;
    assert_eq!(result.to_json_string(), replayed.to_json_string());
    println!("replay of the recording matches the original run");
    Ok(())
}
