//! Rewrites the bundled synthetic corpora from their generators.

use std::fs;
use std::path::Path;

fn main() -> std::io::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    fs::write(data.join("synthetic-4class.jsonl"), metricprompt::synthetic::four_class_jsonl())?;
    fs::write(data.join("synthetic-2class.jsonl"), metricprompt::synthetic::two_class_jsonl())?;
    Ok(())
}
