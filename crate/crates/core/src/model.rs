//! The assembled model: embedding tables, latent array, encoder and decoder.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, QuerySpec, TaskTag};
use crate::embedding::{
    build_input_array, embed_text, embed_vision, EmbeddingConfig, EmbeddingTables, InputArray,
    Modality, TextInput, VisionInput,
};
use crate::encoder::{Aggregation, EncodedLatent, Encoder, EncoderConfig, LatentArray};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed: EmbeddingConfig,
    pub encoder: EncoderConfig,
    /// Size of the closed QA answer set.
    pub num_answers: usize,
    /// Multi-stream cosine temperature.
    pub temperature: f64,
    /// Give text its own encoder weights in per-modality encoding.
    pub unshared_stream_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: EmbeddingConfig::default(),
            encoder: EncoderConfig::toy(),
            num_answers: 11,
            temperature: 0.1,
            unshared_stream_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let e = &self.embed;
        if e.patch == 0 || e.channels == 0 || e.max_frames == 0 || e.max_patches == 0 {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        if e.max_text_len == 0 || e.vocab_size == 0 {
            return Err(Error::Config("text sizes must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One modality for per-modality encoding.
#[derive(Clone, Copy, Debug)]
pub enum Single<'a> {
    Vision(&'a VisionInput, bool),
    Text(&'a TextInput),
}

#[derive(Clone, Debug)]
pub struct PerceiverVl {
    pub cfg: ModelConfig,
    pub tables: EmbeddingTables,
    pub latent: LatentArray,
    pub encoder: Encoder,
    /// Present when `unshared_stream_encoder` is set.
    pub text_encoder: Option<Encoder>,
    pub decoder: Decoder,
}

impl PerceiverVl {
    /// Builds the model and its parameters from `seed`. Parameter values are
    /// a pure function of `(cfg, seed)`.
    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let root = Rng::new(seed).split("init");
        let mut store = ParamStore::new();
        let d = cfg.encoder.d;
        let tables = EmbeddingTables::init(&cfg.embed, d, &mut store, &mut root.split("embed"))?;
        let latent = LatentArray::init(&cfg.encoder, "latent", &mut store, &mut root.split("latent"))?;
        let encoder = Encoder::init(&cfg.encoder, "encoder", &mut store, &mut root.split("encoder"))?;
        let text_encoder = if cfg.unshared_stream_encoder {
            Some(Encoder::init(
                &cfg.encoder,
                "text_encoder",
                &mut store,
                &mut root.split("text_encoder"),
            )?)
        } else {
            None
        };
        let decoder = Decoder::init(
            &mut store,
            d,
            cfg.encoder.heads,
            cfg.encoder.mlp_ratio,
            cfg.embed.vocab_size,
            cfg.num_answers,
            tables.token_pos,
            &mut root.split("decoder"),
        )?;
        Ok((
            Self {
                cfg: cfg.clone(),
                tables,
                latent,
                encoder,
                text_encoder,
                decoder,
            },
            store,
        ))
    }

    /// Embeds a (vision, text) pair into the arrays the configured
    /// aggregation expects: one concatenated array for Joint, one array per
    /// present modality otherwise.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        vision: Option<(&VisionInput, bool)>,
        text: Option<&TextInput>,
    ) -> Result<Vec<InputArray>> {
        match self.cfg.encoder.aggregation {
            Aggregation::Joint => Ok(vec![build_input_array(g, &self.tables, vision, text)?]),
            Aggregation::Separate | Aggregation::SeparatePlus => {
                let mut out = Vec::new();
                if let Some((v, is_video)) = vision {
                    out.push(embed_vision(g, &self.tables, v, is_video)?);
                }
                if let Some(t) = text.filter(|t| !t.is_empty()) {
                    out.push(embed_text(g, &self.tables, t)?);
                }
                if out.is_empty() {
                    return Err(Error::Contract("input needs at least one modality".into()));
                }
                Ok(out)
            }
        }
    }

    pub fn encode<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        inputs: &[InputArray],
        active: &[bool],
    ) -> Result<EncodedLatent> {
        let z = self.latent.latent(g)?;
        self.encoder.encode(g, z, inputs, active)
    }

    /// Embeds and encodes a pair (or a single modality) in one call.
    pub fn encode_pair<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        vision: Option<(&VisionInput, bool)>,
        text: Option<&TextInput>,
        active: &[bool],
    ) -> Result<EncodedLatent> {
        let inputs = self.embed(g, vision, text)?;
        self.encode(g, &inputs, active)
    }

    /// Encodes one modality alone; text uses the separate text encoder when
    /// one exists.
    pub fn encode_modality<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        x: Single<'_>,
        active: &[bool],
    ) -> Result<EncodedLatent> {
        let (input, encoder) = match x {
            Single::Vision(v, is_video) => (embed_vision(g, &self.tables, v, is_video)?, &self.encoder),
            Single::Text(t) => {
                if t.is_empty() {
                    return Err(Error::Contract("cannot encode empty text".into()));
                }
                (
                    embed_text(g, &self.tables, t)?,
                    self.text_encoder.as_ref().unwrap_or(&self.encoder),
                )
            }
        };
        let z = self.latent.latent(g)?;
        encoder.encode(g, z, std::slice::from_ref(&input), active)
    }

    pub fn decode<T: Scalar>(&self, g: &mut Tape<'_, T>, z: Var, q: &QuerySpec) -> Result<Var> {
        self.decoder.decode(g, z, q)
    }

    /// VTM logits (1 × 2) for a latent encoding.
    pub fn vtm_logits<T: Scalar>(&self, g: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let q = self.decoder.build_vtm_query(g);
        let out = self.decode(g, z, &q)?;
        self.decoder.head(g, out, &q, TaskTag::Vtm)
    }

    /// Mixed-stream decoder input: visual then text latents (2N × d), each
    /// half tagged with its modality embedding.
    pub fn mixed_latents<T: Scalar>(&self, g: &mut Tape<'_, T>, z_v: Var, z_t: Var) -> Result<Var> {
        let (nv, nt) = (g.rows(z_v), g.rows(z_t));
        let mv = crate::embedding::modality_rows(g, &self.tables, Modality::Vision, nv)?;
        let mt = crate::embedding::modality_rows(g, &self.tables, Modality::Text, nt)?;
        let a = g.add(z_v, mv)?;
        let b = g.add(z_t, mt)?;
        g.concat_rows(&[a, b])
    }

    /// Pooled retrieval vector (1 × d), L2-normalized.
    pub fn pool<T: Scalar>(&self, g: &mut Tape<'_, T>, z: Var) -> Result<Var> {
        let q = self.decoder.build_ret_query(g);
        let out = self.decode(g, z, &q)?;
        g.l2_normalize_rows(out)
    }

    /// All cross-attentions active.
    pub fn full_depth(&self) -> Vec<bool> {
        vec![true; self.cfg.encoder.k]
    }
}
