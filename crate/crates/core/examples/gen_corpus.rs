//! Generates a small synthetic corpus, writes it to disk and reads it back.
//!
//! cargo run --example gen_corpus -- [dir]

use anyhow::Result;
use perceiver_vl::corpus::{generate, Corpus, CorpusConfig, Split};

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "target/example-corpus".into());
    let cfg = CorpusConfig {
        train: 200,
        val: 32,
        test: 32,
        image_size: 32,
        ..CorpusConfig::default()
    };
    let corpus = generate(&cfg)?;
    corpus.save(dir.as_ref())?;
    let back = Corpus::load(dir.as_ref())?;
    assert_eq!(back.items.len(), corpus.items.len());

    for item in corpus.split(Split::Val).iter().take(5) {
        println!(
            "#{:<4} {} frame(s)  \"{}\"",
            item.id,
            item.vision.frames,
            item.caption
        );
        for qa in &item.qa {
            println!("        Q: {}  A: {}", qa.question, qa.answer);
        }
    }
    let videos = corpus.items.iter().filter(|i| i.is_video()).count();
    println!("{} items ({videos} videos) written to {dir}", corpus.items.len());
    Ok(())
}
