//! Samples training masks and compares inference cost at every fixed depth.

use anyhow::Result;
use perceiver_vl::cost::{cross_term, CostReport};
use perceiver_vl::encoder::{sample_layerdrop_mask, DepthMode};
use perceiver_vl::model::ModelConfig;
use perceiver_vl::tensor::Rng;

fn main() -> Result<()> {
    let cfg = ModelConfig::default();
    let k = cfg.encoder.k;
    let mut rng = Rng::new(0);
    let mut kept = vec![0usize; k];
    let draws = 10_000;
    for _ in 0..draws {
        let m = sample_layerdrop_mask(k, cfg.encoder.p_ld, &mut rng, DepthMode::Train)?;
        for (c, a) in kept.iter_mut().zip(m) {
            *c += usize::from(a);
        }
    }
    println!("p_ld = {}: keep rate per block {:?}", cfg.encoder.p_ld,
        kept.iter().map(|&c| c as f64 / draws as f64).collect::<Vec<_>>());

    let (m_v, m_t) = (16, 16);
    let full = CostReport::forward(&cfg, m_v, m_t, 1, 0, &vec![true; k])?;
    for c in 1..=k {
        let mask = sample_layerdrop_mask(k, 0.0, &mut rng, DepthMode::Fixed(c))?;
        let r = CostReport::forward(&cfg, m_v, m_t, 1, 0, &mask)?;
        println!(
            "fixed({c}): {:>9} MACs, saves {:>8} = {} x X(M)",
            r.total,
            full.total - r.total,
            (full.total - r.total) / cross_term(&cfg.encoder, m_v + m_t)
        );
    }
    Ok(())
}
