//! Writes the two-category toy corpus used by `configs/toy.toml`.
//!
//! ```text
//! cargo run -p fagan --example toy_corpus -- data/toy
//! ```

use std::path::PathBuf;

use fagan::corpus::write_labeled;
use fagan::synthetic::ToyGrammar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/toy".into()));
    std::fs::create_dir_all(&dir)?;
    let grammar = ToyGrammar::two_category();
    let data = grammar.dataset(500, 50, 50, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, split) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        let path = dir.join(format!("{name}.txt"));
        write_labeled(&path, split)?;
        println!("{} ({} sentences)", path.display(), split.len());
    }
    Ok(())
}
