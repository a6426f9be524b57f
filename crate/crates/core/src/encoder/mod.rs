//! Latent encoder: `k` blocks of cross-attention from the latent array to
//! the input rows, each followed by `l` latent self-attentions.
//!
//! Cost grows as `k·M·N + k·l·N²` in the input length `M` and the latent
//! length `N`, instead of `k·l·M²` for a self-attention stack over the input.

mod attention;
mod baseline;
mod config;
mod latent;
mod layerdrop;

pub use attention::{AttentionLayer, LayerNorm, Linear};
pub use baseline::BaselineEncoder;
pub use config::{Aggregation, EncoderConfig, LatentPos};
pub use latent::{fourier_features, LatentArray, LatentPosition};
pub use layerdrop::{sample_layerdrop_mask, DepthMode};

use crate::embedding::{InputArray, Modality};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng, Scalar, Tape, Var};

/// Output of [`Encoder::encode`].
#[derive(Clone, Debug)]
pub struct EncodedLatent {
    pub z: Var,
    /// Which block cross-attentions ran; entry 0 is always `true`.
    pub active_cross_layers: Vec<bool>,
    /// MACs of every layer that ran, in execution order (`block{b}.cross{s}`,
    /// `block{b}.self{i}`).
    pub layer_macs: Vec<(String, u64)>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    /// `cross[block][slot]`; Joint has one slot, Separate/Separate+ one per modality.
    pub cross: Vec<Vec<AttentionLayer>>,
    /// `selfs[block]`; Separate+ stores `2·l` layers per block.
    pub selfs: Vec<Vec<AttentionLayer>>,
}

impl Encoder {
    pub fn init<T: Scalar>(
        cfg: &EncoderConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let slots = match cfg.aggregation {
            Aggregation::Joint => 1,
            Aggregation::Separate | Aggregation::SeparatePlus => 2,
        };
        let self_per_block = match cfg.aggregation {
            Aggregation::SeparatePlus => 2 * cfg.l,
            _ => cfg.l,
        };
        let cross_blocks = if cfg.share_cross_weights { 1 } else { cfg.k };
        let mut cross = Vec::with_capacity(cross_blocks);
        for b in 0..cross_blocks {
            let mut layers = Vec::with_capacity(slots);
            for s in 0..slots {
                let name = format!("{prefix}.block{b}.cross{s}");
                layers.push(AttentionLayer::init(
                    store,
                    &name,
                    cfg.d,
                    cfg.heads,
                    cfg.mlp_ratio,
                    true,
                    rng,
                )?);
            }
            cross.push(layers);
        }
        let mut selfs = Vec::with_capacity(cfg.k);
        for b in 0..cfg.k {
            let mut layers = Vec::with_capacity(self_per_block);
            for s in 0..self_per_block {
                let name = format!("{prefix}.block{b}.self{s}");
                layers.push(AttentionLayer::init(
                    store,
                    &name,
                    cfg.d,
                    cfg.heads,
                    cfg.mlp_ratio,
                    false,
                    rng,
                )?);
            }
            selfs.push(layers);
        }
        Ok(Self {
            cfg: cfg.clone(),
            cross,
            selfs,
        })
    }

    fn cross_layer(&self, block: usize, slot: usize) -> &AttentionLayer {
        let b = if self.cfg.share_cross_weights { 0 } else { block };
        &self.cross[b][slot]
    }

    /// Cross-attention from `latent` to one input array.
    pub fn cross_attention<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        block: usize,
        slot: usize,
        latent: Var,
        input: &InputArray,
    ) -> Result<Var> {
        if input.is_empty() {
            return Err(Error::Contract("cross-attention over an empty input".into()));
        }
        self.cross_layer(block, slot)
            .cross(g, latent, input.rows, input.key_mask())
    }

    /// Runs the block stack over `inputs`.
    ///
    /// Joint takes exactly one array. Separate and Separate+ take one
    /// single-modality array per modality (one array encodes that modality
    /// alone). A dropped cross-attention skips its attention and its MLP;
    /// self-attentions always run.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        latent: Var,
        inputs: &[InputArray],
        active: &[bool],
    ) -> Result<EncodedLatent> {
        let cfg = &self.cfg;
        if active.len() != cfg.k {
            return Err(Error::Contract(format!(
                "layer mask has {} entries for k={}",
                active.len(),
                cfg.k
            )));
        }
        if !active[0] {
            return Err(Error::Contract("the first cross-attention cannot be dropped".into()));
        }
        let slots = self.slots_for(inputs)?;
        let mut z = latent;
        let mut layer_macs = Vec::new();
        let mut mark = g.macs();
        let mut record = |g: &Tape<'_, T>, name: String| {
            let now = g.macs();
            layer_macs.push((name, now - mark));
            mark = now;
        };
        for b in 0..cfg.k {
            match cfg.aggregation {
                Aggregation::Joint | Aggregation::Separate => {
                    if active[b] {
                        for (input, &slot) in inputs.iter().zip(&slots) {
                            z = self.cross_attention(g, b, slot, z, input)?;
                            record(g, format!("block{b}.cross{slot}"));
                        }
                    }
                    for (i, layer) in self.selfs[b].iter().enumerate() {
                        z = layer.self_attend(g, z, None)?;
                        record(g, format!("block{b}.self{i}"));
                    }
                }
                Aggregation::SeparatePlus => {
                    for (input, &slot) in inputs.iter().zip(&slots) {
                        if active[b] {
                            z = self.cross_attention(g, b, slot, z, input)?;
                            record(g, format!("block{b}.cross{slot}"));
                        }
                        for i in slot * cfg.l..(slot + 1) * cfg.l {
                            z = self.selfs[b][i].self_attend(g, z, None)?;
                            record(g, format!("block{b}.self{i}"));
                        }
                    }
                }
            }
        }
        Ok(EncodedLatent {
            z,
            active_cross_layers: active.to_vec(),
            layer_macs,
        })
    }

    fn slots_for(&self, inputs: &[InputArray]) -> Result<Vec<usize>> {
        match self.cfg.aggregation {
            Aggregation::Joint => {
                if inputs.len() != 1 {
                    return Err(Error::Contract(format!(
                        "joint aggregation takes one input array, got {}",
                        inputs.len()
                    )));
                }
                Ok(vec![0])
            }
            Aggregation::Separate | Aggregation::SeparatePlus => {
                if inputs.is_empty() || inputs.len() > 2 {
                    return Err(Error::Contract(format!(
                        "separate aggregation takes one array per modality, got {}",
                        inputs.len()
                    )));
                }
                let mut slots = Vec::new();
                for input in inputs {
                    let m = input.single_modality().ok_or_else(|| {
                        Error::Contract("separate aggregation needs single-modality arrays".into())
                    })?;
                    let slot = match m {
                        Modality::Vision => 0,
                        Modality::Text => 1,
                    };
                    if slots.contains(&slot) {
                        return Err(Error::Contract("modality given twice".into()));
                    }
                    slots.push(slot);
                }
                Ok(slots)
            }
        }
    }
}
