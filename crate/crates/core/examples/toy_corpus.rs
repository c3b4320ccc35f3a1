//! Writes the synthetic corpus used by the tests: `kg.jsonl` and
//! `narratives.jsonl` in the given directory.
//!
//! cargo run --example toy_corpus -- data/toy [n_facts] [n_contexts]

use std::path::PathBuf;

use noisefacts::corpus::toy::{toy_kg, toy_narratives};
use noisefacts::corpus::{write_kg, write_narratives};

fn main() -> noisefacts::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/toy".into()));
    let n_facts = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let n_contexts = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    std::fs::create_dir_all(&dir).map_err(|e| noisefacts::Error::io(&dir, e))?;
    let kg = toy_kg(n_facts, 5, 1);
    let samples = toy_narratives(&kg, n_contexts, 2);
    write_kg(&dir.join("kg.jsonl"), &kg)?;
    write_narratives(&dir.join("narratives.jsonl"), &samples)?;
    println!("wrote {} facts and {} contexts to {}", kg.len(), samples.len(), dir.display());
    Ok(())
}
