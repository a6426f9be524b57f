use super::attention::AttentionLayer;
use super::config::EncoderConfig;
use crate::embedding::InputArray;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng, Scalar, Tape, Var};

/// Reference transformer encoder: `depth` self-attentions over the input rows.
/// Only used to measure the quadratic cost the latent encoder avoids.
#[derive(Clone, Debug)]
pub struct BaselineEncoder {
    pub layers: Vec<AttentionLayer>,
}

impl BaselineEncoder {
    pub fn init<T: Scalar>(
        cfg: &EncoderConfig,
        depth: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Parameter("baseline depth must be at least 1".into()));
        }
        let layers = (0..depth)
            .map(|i| {
                AttentionLayer::init(
                    store,
                    &format!("baseline.layer{i}"),
                    cfg.d,
                    cfg.heads,
                    cfg.mlp_ratio,
                    false,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn encode<T: Scalar>(&self, g: &mut Tape<'_, T>, input: &InputArray) -> Result<Var> {
        let mut x = input.rows;
        for layer in &self.layers {
            x = layer.self_attend(g, x, input.key_mask())?;
        }
        Ok(x)
    }
}
