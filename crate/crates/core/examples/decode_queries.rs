//! Decodes a VTM query and an MLM query together and separately.

use anyhow::Result;
use perceiver_vl::decoder::{concat_queries, TaskTag};
use perceiver_vl::embedding::{vocab, TextInput, VisionInput};
use perceiver_vl::model::{ModelConfig, PerceiverVl};
use perceiver_vl::tensor::{Rng, Tape};
use perceiver_vl::training::{mask_tokens, MaskSpec};

fn main() -> Result<()> {
    let cfg = ModelConfig::default();
    let (model, store) = PerceiverVl::init::<f32>(&cfg, 2)?;
    let v = VisionInput::constant(1, 32, 32, 3, 0.5);
    let t = TextInput::from_str("a blue triangle left of a red circle", 64, None);
    let masked = mask_tokens(&t, &MaskSpec::default(), &mut Rng::new(3));
    println!("masked input: {}", vocab::decode(&masked.input.token_ids));

    let mut g = Tape::with_params(&store);
    let z = model.encode_pair(&mut g, Some((&v, false)), Some(&masked.input), &model.full_depth())?;
    let vtm = model.decoder.build_vtm_query(&mut g);
    let mlm = model.decoder.build_mlm_query(&mut g, &masked.flags)?;
    let both = concat_queries(&mut g, &[vtm.clone(), mlm])?;
    let before = g.macs();
    let out = model.decode(&mut g, z.z, &both)?;
    println!("joint decode: Q = {} rows, {} MACs", both.len(), g.macs() - before);
    for (task, range) in &both.segments {
        println!("  segment {task:?}: rows {range:?}");
    }
    let vtm_logits = model.decoder.head(&mut g, out, &both, TaskTag::Vtm)?;
    let alone = model.vtm_logits(&mut g, z.z)?;
    println!(
        "VTM logits joint {:?} vs alone {:?}",
        g.value(vtm_logits).data(),
        g.value(alone).data()
    );
    Ok(())
}
