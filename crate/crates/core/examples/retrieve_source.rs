//! Look up function or structure definitions by name and print the exact
//! source slices, annotated with `file:line:` headers the way they are fed
//! to prompts.
//!
//! Usage: cargo run -p ktriage --example retrieve_source [NAME]...
//! (defaults to a function, a structure, and one unknown name)

use std::path::Path;

use ktriage::build_index;
use ktriage::retrieval::RetrievedSource;

fn main() -> anyhow::Result<()> {
    let root = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/motivating/src"
    );
    let index = build_index(Path::new(root))?;

    let mut names: Vec<String> = std::env::args().skip(1).collect();
    if names.is_empty() {
        names = vec![
            "trylock_buffer".into(),
            "buffer_head".into(),
            "no_such_symbol".into(),
        ];
    }
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();

    for (name, source) in index.retrieve(&name_refs) {
        match source {
            RetrievedSource::Found {
                definitions,
                ambiguous,
            } => {
                if ambiguous {
                    println!("-- {name}: {} candidate definitions --", definitions.len());
                }
                for def in definitions {
                    println!(
                        "-- {name} ({:?}, {}:{}..{}) --",
                        def.location.kind,
                        def.location.file,
                        def.location.start_line,
                        def.location.end_line
                    );
                    println!("{}", def.annotated);
                }
            }
            RetrievedSource::NotFound => {
                println!("-- {name}: not found (possibly macro-defined) --")
            }
        }
    }
    Ok(())
}
