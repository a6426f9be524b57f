//! Trains retrieval from scratch for one stream mode and reports test R@1 at
//! every fixed inference depth.
//!
//! cargo run --example retrieval_finetune -- [mode] [steps] [p_ld] [batch] [negatives] [lr]

use anyhow::Result;
use perceiver_vl::corpus::{generate, CorpusConfig, Split};
use perceiver_vl::encoder::{sample_layerdrop_mask, DepthMode};
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::retrieval::{evaluate_retrieval, StreamMode};
use perceiver_vl::tensor::Rng;
use perceiver_vl::training::{finetune_retrieval, AdamConfig, TrainConfig};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> Result<()> {
    let mode: StreamMode = arg(1, StreamMode::Multi);
    let steps = arg(2, 1000);
    let p_ld = arg(3, 0.5);
    let batch = arg(4, 16);
    let negatives = arg(5, 15);
    let lr = arg(6, 5e-4);

    let corpus = generate(&CorpusConfig {
        image_size: 32,
        ..CorpusConfig::default()
    })?;
    let train = corpus.split(Split::Train);
    let mut test = corpus.split(Split::Test);
    test.truncate(64);

    let mut cfg = ModelConfig::default();
    cfg.encoder.p_ld = p_ld;
    let (model, mut store) = PerceiverVl::init::<f32>(&cfg, 0)?;
    let tc = TrainConfig {
        steps,
        batch,
        negatives,
        adam: AdamConfig { lr, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let history = finetune_retrieval(&model, &mut store, &train, mode, &tc, 0, None)?;
    let last = &history[history.len() - 1];
    println!("{mode}: {steps} steps in {:.1}s, final loss {:.4}", start.elapsed().as_secs_f64(), last["loss"]);

    for c in 1..=cfg.encoder.k {
        let active = sample_layerdrop_mask(cfg.encoder.k, 0.0, &mut Rng::new(0), DepthMode::Fixed(c))?;
        let r = evaluate_retrieval(&model, &store, &test, mode, &active, true)?;
        println!(
            "  fixed({c}): R@1 {:5.1} R@5 {:5.1} R@10 {:5.1}  {} MACs/query",
            100.0 * r.recall.r1,
            100.0 * r.recall.r5,
            100.0 * r.recall.r10,
            r.query_macs
        );
    }
    Ok(())
}
