//! Mining throughput on a synthetic corpus.
//!
//! ```text
//! cargo run --release -p ccmine-cli --example mine_bench -- [captions] [concepts] [workers]
//! ```
//!
//! Defaults: 500000 captions, 4000 concepts, 1 worker. Prints captions per
//! second and per worker.

#[path = "../tests/common/synth.rs"]
mod synth;

use std::io::Cursor;
use std::time::Instant;

use ccmine::corpus::Lexicon;
use ccmine::mining::{MineOptions, mine};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).map_or(default, |s| s.parse().expect("numeric argument"))
}

fn main() {
    let (captions, concepts, workers) = (arg(1, 500_000), arg(2, 4000), arg(3, 1));
    let gen = Instant::now();
    let (lexicon, corpus) = synth::synthetic_corpus(42, concepts, captions, 12);
    let lexicon = Lexicon::parse(&lexicon).expect("lexicon");
    println!(
        "generated {captions} captions ({:.1} MB) in {:.2} s",
        corpus.len() as f64 / 1e6,
        gen.elapsed().as_secs_f64()
    );
    let options = MineOptions {
        workers,
        ..MineOptions::default()
    };
    for run in 1..=3 {
        let start = Instant::now();
        let out = mine(Cursor::new(&corpus[..]), &lexicon, options, |_| {}).expect("mine");
        let secs = start.elapsed().as_secs_f64();
        let rate = out.stats.captions as f64 / secs;
        println!(
            "run {run}: {:.3} s, {:.0} captions/s, {:.0} captions/s/worker, {} pairs",
            secs,
            rate,
            rate / workers as f64,
            out.cooc.nnz()
        );
    }
}
