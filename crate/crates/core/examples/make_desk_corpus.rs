//! Writes the seeded desk corpus splits and a matching run config.
//!
//! cargo run --release --example make_desk_corpus -- data/desk

use std::fs;
use std::path::PathBuf;

use dknn::corpus::Split;
use dknn::synth::{generate, to_tsv, CorpusConfig, Lexicon};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "desk".into()));
    fs::create_dir_all(&dir)?;
    let lex = Lexicon::desk();
    let splits = [
        ("train.tsv", Split::Train, 2000, 1),
        ("validation.tsv", Split::Validation, 500, 2),
        ("test.tsv", Split::Test, 500, 3),
    ];
    for (name, split, size, seed) in splits {
        let data = generate(&lex, &CorpusConfig::desk(size), split, seed);
        fs::write(dir.join(name), to_tsv(&data))?;
    }
    let conf = format!(
        "train = {0}/train.tsv\nvalidation = {0}/validation.tsv\ntest = {0}/test.tsv\nout_dir = {0}/out\nseed = 0\n",
        dir.display()
    );
    fs::write(dir.join("run.conf"), conf)?;
    println!("wrote {}", dir.display());
    Ok(())
}
