//! Build the prompt for one backward-taint step, then parse a model reply
//! into a structured outcome — without calling any backend.
//!
//! Usage: cargo run -p ktriage --example simulate_step

use std::path::Path;

use ktriage::agent::{TaintOrigin, TaintTask};
use ktriage::pcx::ProgramLibrary;
use ktriage::{build_index, build_prompt, parse_outcome, parse_report};

// What a well-behaved model prints for the first hop of the bundled crash.
const SAMPLE_REPLY: &str = "Executing the pseudo code step by step.\n\
                            Step 1: bh is declared in the parameter list.\n\
                            Category: parameter of function\n\
                            Variable: bh\n\
                            Line: 404: if (!trylock_buffer(bh))\n\
                            Caller: lock_buffer\n";

fn main() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/motivating");
    let index = build_index(&fixtures.join("src"))?;
    let report = parse_report(&std::fs::read_to_string(fixtures.join("report.txt"))?)?;

    let programs = ProgramLibrary::builtin();
    let program = programs.get("backward_taint.v1").expect("builtin program");

    let task = TaintTask {
        variable: "bh".into(),
        function: "trylock_buffer".into(),
        hint_line: Some(399),
        origin: TaintOrigin::CrashSite,
        depth: 0,
    };
    let sources = index.retrieve(&["trylock_buffer", "lock_buffer"]);
    let request = build_prompt(program, &task, &sources, &report)?;

    println!("=== user prompt ({} chars) ===", request.user_prompt.len());
    println!("{}", request.user_prompt);

    let outcome = parse_outcome(SAMPLE_REPLY, program);
    println!("=== parsed outcome (outcome.v1) ===");
    println!("{}", serde_json::to_string_pretty(&outcome.normalized)?);
    Ok(())
}
