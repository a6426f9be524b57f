//! Ranks a small test split with each stream topology and reports recall
//! and per-query MACs. Uses an untrained model unless a checkpoint path is
//! given.
//!
//! cargo run --example retrieval_streams -- [checkpoint]

use anyhow::Result;
use perceiver_vl::checkpoint::load_checkpoint;
use perceiver_vl::corpus::{generate, CorpusConfig, Split};
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::retrieval::{evaluate_retrieval, StreamMode};

fn main() -> Result<()> {
    let (model, store) = match std::env::args().nth(1) {
        Some(p) => {
            let ckpt = load_checkpoint(p.as_ref())?;
            let (m, mut s) = PerceiverVl::init::<f32>(&ckpt.header.model, 0)?;
            ckpt.restore(&mut s)?;
            (m, s)
        }
        None => PerceiverVl::init::<f32>(&ModelConfig::default(), 0)?,
    };
    let corpus = generate(&CorpusConfig {
        train: 2,
        val: 2,
        test: 32,
        image_size: 32,
        ..CorpusConfig::default()
    })?;
    let test = corpus.split(Split::Test);
    for mode in [StreamMode::Single, StreamMode::Mixed, StreamMode::Multi] {
        let r = evaluate_retrieval(&model, &store, &test, mode, &model.full_depth(), true)?;
        println!(
            "{mode:>6}: R@1 {:5.1} R@5 {:5.1} R@10 {:5.1}  {:>11} MACs/query  {:>8.1} ms",
            100.0 * r.recall.r1,
            100.0 * r.recall.r5,
            100.0 * r.recall.r10,
            r.query_macs,
            r.wall_ns as f64 / 1e6
        );
    }
    Ok(())
}
