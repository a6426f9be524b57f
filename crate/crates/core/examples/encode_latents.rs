//! Encodes one image-caption pair into the latent array and prints the
//! per-layer MACs under each modality aggregation.

use anyhow::Result;
use perceiver_vl::embedding::{TextInput, VisionInput};
use perceiver_vl::encoder::Aggregation;
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::tensor::Tape;

fn main() -> Result<()> {
    let v = VisionInput::constant(1, 32, 32, 3, 0.5);
    let t = TextInput::from_str("two green squares", 64, None);
    for agg in [Aggregation::Joint, Aggregation::Separate, Aggregation::SeparatePlus] {
        let mut cfg = ModelConfig::default();
        cfg.encoder.aggregation = agg;
        let (model, store) = PerceiverVl::init::<f32>(&cfg, 1)?;
        let mut g = Tape::with_params(&store);
        let enc = model.encode_pair(&mut g, Some((&v, false)), Some(&t), &model.full_depth())?;
        println!("{agg}: latent {:?}", g.shape(enc.z));
        for (layer, macs) in &enc.layer_macs {
            println!("  {layer:<16} {macs:>10}");
        }
    }
    Ok(())
}
