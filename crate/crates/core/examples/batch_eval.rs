//! Score a directory of cases against patch ground truth and print the
//! accuracy/violation/token tables. Each case is three files sharing a stem:
//! `NAME.report.txt`, `NAME.cassette.jsonl`, `NAME.truth.json`.
//!
//! Usage: cargo run -p ktriage --example batch_eval [CASES_DIR SOURCE_ROOT]
//! (without arguments, a one-case directory is staged from the bundled
//! fixture)

use std::path::{Path, PathBuf};

use ktriage::agent::{DEFAULT_MAX_DEPTH, DEFAULT_RETRY_CAP};
use ktriage::cli::{cmd_eval, EvalArgs};

fn stage_default_case() -> anyhow::Result<(PathBuf, PathBuf)> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/motivating");
    let cases = std::env::temp_dir().join("ktriage-batch-eval-example");
    std::fs::create_dir_all(&cases)?;
    for (from, to) in [
        ("report.txt", "motivating.report.txt"),
        ("cassette.jsonl", "motivating.cassette.jsonl"),
        ("truth.json", "motivating.truth.json"),
    ] {
        std::fs::copy(fixtures.join(from), cases.join(to))?;
    }
    Ok((cases, fixtures.join("src")))
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let (cases, source_root) = match (args.next(), args.next()) {
        (Some(cases), Some(root)) => (PathBuf::from(cases), PathBuf::from(root)),
        _ => stage_default_case()?,
    };

    let eval = EvalArgs {
        cases,
        source_root,
        jobs: 4,
        output_dir: None,
        retry_cap: DEFAULT_RETRY_CAP,
        max_depth: DEFAULT_MAX_DEPTH,
        program_dir: None,
        spec_dir: None,
    };
    let code = cmd_eval(&eval, &mut std::io::stdout())?;
    std::process::exit(code);
}
