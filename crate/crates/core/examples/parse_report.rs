//! Parse a sanitizer crash report and print its `report.v1` JSON.
//!
//! Usage: cargo run -p ktriage --example parse_report [REPORT_FILE]

use ktriage::parse_report;

fn main() -> anyhow::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| {
        concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/tests/fixtures/motivating/report.txt"
        )
        .to_string()
    });
    let raw = std::fs::read_to_string(&path)?;
    let report = parse_report(&raw)?;

    println!("{}", serde_json::to_string_pretty(&report.to_json())?);
    eprintln!(
        "crash frame: {} (frame {} of {}, category {})",
        report.crash_frame().function,
        report.crash_frame_index,
        report.call_trace.len(),
        report.bug_category.label()
    );
    Ok(())
}
