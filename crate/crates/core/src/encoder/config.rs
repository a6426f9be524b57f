use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How vision and text rows reach the latent array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// One cross-attention over the concatenated input.
    #[serde(rename = "joint")]
    Joint,
    /// One cross-attention per modality, serially, then the self-attentions.
    #[serde(rename = "separate")]
    Separate,
    /// Per modality: cross-attention followed by its own self-attentions.
    #[serde(rename = "separate+")]
    SeparatePlus,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "separate" => Ok(Self::Separate),
            "separate+" | "separate-plus" => Ok(Self::SeparatePlus),
            _ => Err(Error::Parameter(format!("unknown aggregation `{s}`"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Joint => "joint",
            Self::Separate => "separate",
            Self::SeparatePlus => "separate+",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentPos {
    Learned,
    Fourier,
}

impl FromStr for LatentPos {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "fourier" => Ok(Self::Fourier),
            _ => Err(Error::Parameter(format!("unknown latent position mode `{s}`"))),
        }
    }
}

impl fmt::Display for LatentPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Fourier => "fourier",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Hidden size.
    pub d: usize,
    pub heads: usize,
    /// Number of blocks, each opening with a cross-attention.
    pub k: usize,
    /// Latent self-attentions per block.
    pub l: usize,
    /// Latent array length.
    pub n_latents: usize,
    /// LayerDrop probability for every cross-attention but the first.
    pub p_ld: f64,
    pub aggregation: Aggregation,
    pub latent_pos: LatentPos,
    pub mlp_ratio: usize,
    pub fourier_bands: usize,
    pub share_cross_weights: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Reference shapes: 3 blocks of 1 cross + 4 self attentions, d=768,
    /// 12 heads, 128 latents.
    pub fn reference() -> Self {
        Self {
            d: 768,
            heads: 12,
            k: 3,
            l: 4,
            n_latents: 128,
            p_ld: 0.5,
            aggregation: Aggregation::Joint,
            latent_pos: LatentPos::Learned,
            mlp_ratio: 4,
            fourier_bands: 16,
            share_cross_weights: false,
        }
    }

    /// Desk-scale shapes used for training on the synthetic corpus.
    pub fn toy() -> Self {
        Self {
            d: 64,
            heads: 4,
            k: 3,
            l: 1,
            n_latents: 16,
            p_ld: 0.5,
            fourier_bands: 4,
            ..Self::reference()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.n_latents == 0 {
            return Err(Error::Config("latent length must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_ld) {
            return Err(Error::Config(format!("p_ld={} not in [0,1)", self.p_ld)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.latent_pos == LatentPos::Fourier && self.fourier_bands == 0 {
            return Err(Error::Config("fourier_bands must be at least 1".into()));
        }
        Ok(())
    }
}
