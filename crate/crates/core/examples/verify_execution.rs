//! Run the execution verifier over two replies: one consistent with the
//! source and trace, one claiming a caller that is not on the trace.
//!
//! Usage: cargo run -p ktriage --example verify_execution

use std::path::Path;

use ktriage::esv::{SpecLibrary, VerificationContext};
use ktriage::pcx::ProgramLibrary;
use ktriage::{build_index, parse_outcome, parse_report, verify};

const CLEAN: &str = "Category: parameter of function\n\
                     Variable: bh\n\
                     Line: 404: if (!trylock_buffer(bh))\n\
                     Caller: lock_buffer\n";

const OFF_TRACE: &str = "Category: parameter of function\n\
                         Variable: bh\n\
                         Line: 404: if (!trylock_buffer(bh))\n\
                         Caller: ghost_fn\n";

fn main() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/motivating");
    let index = build_index(&fixtures.join("src"))?;
    let report = parse_report(&std::fs::read_to_string(fixtures.join("report.txt"))?)?;

    let program = ProgramLibrary::builtin()
        .get("backward_taint.v1")
        .cloned()
        .expect("builtin program");
    let specs = SpecLibrary::builtin();
    let spec = specs.get("backward_taint.v1").expect("builtin spec");

    let ctx = VerificationContext::new(
        "trylock_buffer",
        index.retrieve(&["trylock_buffer", "lock_buffer"]),
        report.call_trace.clone(),
        Some(&index),
    );

    for (label, raw) in [("clean reply", CLEAN), ("off-trace caller", OFF_TRACE)] {
        let outcome = parse_outcome(raw, &program);
        let violations = verify(&outcome, spec, &ctx)?;
        println!("{label}: {} violation(s)", violations.len());
        for v in violations {
            println!("  {}", serde_json::to_string(&v)?);
        }
    }
    Ok(())
}
