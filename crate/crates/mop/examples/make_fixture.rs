//! Regenerates `fixtures/mini`: population records, a golden reference set
//! and the toy backend corpus, all from one seeded toy world.
//!
//! cargo run -p mop --example make_fixture -- crates/mop/fixtures/mini

use std::path::PathBuf;

use mop::io::{save_records, write_corpus, write_versioned};
use mop::toy::{ContextMode, ToyWorld};

const SEED: u64 = 7;
const WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/mop/fixtures/mini".into()));
    let world = ToyWorld::new(3, 8, 400, SEED)?;
    let mode = ContextMode::StyleCue { cue: 0.9, prefix: "" };
    let records = world.population(&WEIGHTS, 200, 40, mode, SEED + 1, "r")?;
    let golden = world.population(&WEIGHTS, 200, 40, mode, SEED + 2, "g")?;
    let docs: Vec<String> = world.corpora.iter().flat_map(|c| c.chunks(3).map(|ch| ch.join("\n"))).collect();
    save_records(&dir.join("records.jsonl"), &records)?;
    save_records(&dir.join("golden.jsonl"), &golden)?;
    write_versioned(&dir.join("corpus.txt"), &write_corpus(&docs))?;
    println!("wrote {} records, {} golden, {} corpus documents to {}", records.len(), golden.len(), docs.len(), dir.display());
    Ok(())
}
