//! Finite-difference check of the full VTM+MLM loss in f64.

use anyhow::Result;
use perceiver_vl::corpus::{generate, CorpusConfig, Split};
use perceiver_vl::encoder::EncoderConfig;
use perceiver_vl::model::ModelConfig;
use perceiver_vl::tensor::Sample;
use perceiver_vl::training::pretrain_grad_check;

fn main() -> Result<()> {
    let corpus = generate(&CorpusConfig {
        train: 16,
        val: 2,
        test: 2,
        image_size: 32,
        ..CorpusConfig::default()
    })?;
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            d: 32,
            n_latents: 8,
            k: 2,
            l: 2,
            ..EncoderConfig::toy()
        },
        ..ModelConfig::default()
    };
    let sample = Sample::Fraction { fraction: 0.01, seed: 1 };
    let report = pretrain_grad_check(&cfg, &corpus.split(Split::Train), 4, 0, sample, 1e-5, 1e-4)?;
    for (param, err) in report.per_param() {
        println!("{param:<36} {err:.2e}");
    }
    if let Some(w) = report.worst() {
        println!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    println!(
        "{} entries, max relative error {:.2e}: {}",
        report.entries.len(),
        report.max_rel_error,
        if report.passed { "ok" } else { "FAILED" }
    );
    Ok(())
}
