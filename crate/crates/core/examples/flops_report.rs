//! Latent encoder vs self-attention baseline cost at toy and reference sizes.

use anyhow::Result;
use perceiver_vl::cost::{baseline_selfattn_macs, encoder_macs, gflops};
use perceiver_vl::encoder::EncoderConfig;

fn main() -> Result<()> {
    let reference = EncoderConfig {
        n_latents: 128,
        l: 4,
        ..EncoderConfig::reference()
    };
    for (name, cfg, m) in [
        ("toy (32x32 image, 16 tokens)", EncoderConfig::toy(), 32u64),
        ("reference (8 frames of 224x224)", reference, 1568),
    ] {
        let depth = (cfg.k * (1 + cfg.l)) as u64;
        let latent = encoder_macs(&cfg, m);
        let base = baseline_selfattn_macs(depth, cfg.d as u64, m, cfg.mlp_ratio as u64);
        println!("{name}: M={m} N={} d={} k={} l={}", cfg.n_latents, cfg.d, cfg.k, cfg.l);
        println!("  latent encoder   {:>14} MACs  {:>8.2} GFLOPs", latent, gflops(latent));
        println!("  baseline x{depth:<2}     {:>14} MACs  {:>8.2} GFLOPs", base, gflops(base));
        println!("  ratio {:.3}", latent as f64 / base as f64);
    }
    Ok(())
}
