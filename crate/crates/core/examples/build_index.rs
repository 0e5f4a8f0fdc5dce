//! Index a C source tree and print what was found, optionally caching the
//! index for later runs (`index.v1` JSON).
//!
//! Usage: cargo run -p ktriage --example build_index [SOURCE_ROOT [CACHE_FILE]]

use std::path::Path;

use ktriage::build_index;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = args.next().unwrap_or_else(|| {
        concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/tests/fixtures/motivating/src"
        )
        .to_string()
    });

    let index = build_index(Path::new(&root))?;
    let stats = index.stats();
    println!(
        "indexed {} files: {} functions, {} structures",
        stats.files_scanned, stats.functions, stats.structures
    );
    for warning in &stats.warnings {
        eprintln!("warning: {warning}");
    }

    if let Some(cache) = args.next() {
        index.save_cache(Path::new(&cache))?;
        println!("cache written to {cache}");
    }
    Ok(())
}
