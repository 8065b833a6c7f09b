//! Writes a small synthetic splice corpus and prints what was generated.
//!
//! cargo run --release --example synth_corpus -- <out_dir> [n] [size] [seed]

use std::path::PathBuf;

use splicenet::datagen::{load_corpus, synth_corpus, write_corpus, CorpusLayout, SynthOptions};

fn main() -> splicenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "corpus".into()));
    let n: usize = args.next().map_or(8, |a| a.parse().expect("n"));
    let size: usize = args.next().map_or(128, |a| a.parse().expect("size"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));

    let samples = synth_corpus(n, &SynthOptions::square(size), seed)?;
    write_corpus(&out, &CorpusLayout::default(), &samples)?;
    for s in &samples {
        let shape = match &s.meta.region {
            Some(r) => format!("{r:?}").split_whitespace().next().unwrap_or("?").to_string(),
            None => "-".into(),
        };
        println!(
            "{}  forged {:5.1}%  region {:8}  host {}  donor {}",
            s.meta.stem,
            100.0 * s.gt_mask.forged_fraction(),
            shape,
            s.meta.host,
            s.meta.donor
        );
    }
    let back = load_corpus(&out, &CorpusLayout::default())?;
    println!("{} pairs written to {} and read back", back.len(), out.display());
    Ok(())
}
