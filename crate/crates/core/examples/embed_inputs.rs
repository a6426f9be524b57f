//! Builds the input array for an image, a video and a caption and shows the
//! per-row modality tags.

use anyhow::Result;
use perceiver_vl::embedding::{build_input_array, Modality, TextInput, VisionInput};
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::tensor::Tape;

fn main() -> Result<()> {
    let cfg = ModelConfig::default();
    let (model, store) = PerceiverVl::init::<f32>(&cfg, 0)?;
    let text = TextInput::from_str("a red circle moving left", cfg.embed.max_text_len, None);

    for (name, frames, is_video) in [("image", 1, false), ("video", 4, true)] {
        let v = VisionInput::constant(frames, 32, 32, 3, 0.25);
        let mut g = Tape::with_params(&store);
        let x = build_input_array(&mut g, &model.tables, Some((&v, is_video)), Some(&text))?;
        let vis = x.modality.iter().filter(|m| **m == Modality::Vision).count();
        println!(
            "{name}: M = {} rows ({vis} patches over {frames} frame(s), {} tokens), d = {}, {} MACs",
            x.len(),
            x.len() - vis,
            g.shape(x.rows)[1],
            g.macs()
        );
    }
    Ok(())
}
