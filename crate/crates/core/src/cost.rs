//! Closed-form multiply-add counts.
//!
//! Every formula here counts exactly the matmul-class products the tape
//! records for the corresponding forward pass; normalisation, softmax and
//! activations are free. FLOPs are reported as `2 × MACs`.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{Aggregation, EncoderConfig, LatentPos};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// `(2N+2M)d² + 2NMd + 2rNd²` for `N` queries over `M` keys with MLP ratio `r`.
pub fn cross_attn_macs(n: u64, m: u64, d: u64, mlp_ratio: u64) -> u64 {
    (2 * n + 2 * m) * d * d + 2 * n * m * d + 2 * mlp_ratio * n * d * d
}

/// `4Nd² + 2N²d + 2rNd²`.
pub fn self_attn_macs(n: u64, d: u64, mlp_ratio: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d + 2 * mlp_ratio * n * d * d
}

/// Decoder with `q` query rows over `n` latent rows.
pub fn decoder_macs(q: u64, n: u64, d: u64, mlp_ratio: u64) -> u64 {
    cross_attn_macs(q, n, d, mlp_ratio)
}

/// Patch projection for `m_v` visual rows.
pub fn embedding_macs(m_v: u64, patch_dim: u64, d: u64) -> u64 {
    m_v * patch_dim * d
}

/// Building the latent positional term (non-zero only for Fourier positions).
pub fn latent_pos_macs(cfg: &EncoderConfig) -> u64 {
    match cfg.latent_pos {
        LatentPos::Learned => 0,
        LatentPos::Fourier => (cfg.n_latents * (1 + 2 * cfg.fourier_bands) * cfg.d) as u64,
    }
}

/// Cost of one cross-attention over `m` input rows: `X(M)`.
pub fn cross_term(cfg: &EncoderConfig, m: u64) -> u64 {
    cross_attn_macs(cfg.n_latents as u64, m, cfg.d as u64, cfg.mlp_ratio as u64)
}

/// Cost of one latent self-attention: `S`.
pub fn self_term(cfg: &EncoderConfig) -> u64 {
    self_attn_macs(cfg.n_latents as u64, cfg.d as u64, cfg.mlp_ratio as u64)
}

/// Encoder MACs for the given input lengths (one per input array) and
/// cross-attention mask. Excludes the embedding projection.
pub fn encoder_macs_masked(cfg: &EncoderConfig, inputs: &[u64], active: &[bool]) -> u64 {
    let cross_per_block: u64 = inputs.iter().map(|&m| cross_term(cfg, m)).sum();
    let self_per_block = match cfg.aggregation {
        Aggregation::SeparatePlus => inputs.len() as u64 * cfg.l as u64 * self_term(cfg),
        _ => cfg.l as u64 * self_term(cfg),
    };
    let active_blocks = active.iter().filter(|&&a| a).count() as u64;
    latent_pos_macs(cfg) + active_blocks * cross_per_block + cfg.k as u64 * self_per_block
}

/// Joint encoder, all layers active:
/// `k·[(2N+2M)d² + 2NMd + 8Nd²] + k·l·[4Nd² + 2N²d + 8Nd²]` (with `r = 4`).
pub fn encoder_macs(cfg: &EncoderConfig, m: u64) -> u64 {
    encoder_macs_masked(cfg, &[m], &vec![true; cfg.k])
}

/// `depth·[4Md² + 2M²d + 2rMd²]`.
pub fn baseline_selfattn_macs(depth: u64, d: u64, m: u64, mlp_ratio: u64) -> u64 {
    depth * self_attn_macs(m, d, mlp_ratio)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    Single,
    Multi,
    Mixed,
}

impl std::str::FromStr for StreamMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::Parameter(format!("unknown stream mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for StreamMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Multi => "multi",
            Self::Mixed => "mixed",
        })
    }
}

/// Per-query MACs for ranking `c` items against one text query of length `m_t`.
///
/// Single: `C·(embed + joint encode + VTM decode + head)`.
/// Mixed: `text encode + C·(decode over 2N + head)`, plus per-item visual
/// work when nothing is cached.
/// Multi: `text encode + pool + C·d`, plus per-item visual encode and pool
/// when nothing is cached.
pub fn retrieval_query_macs(
    mode: StreamMode,
    cfg: &ModelConfig,
    m_v: u64,
    m_t: u64,
    c: u64,
    cached: bool,
) -> Result<u64> {
    if c < 1 {
        return Err(Error::Parameter("corpus size must be at least 1".into()));
    }
    let e = &cfg.encoder;
    let (n, d, r) = (e.n_latents as u64, e.d as u64, e.mlp_ratio as u64);
    let embed_v = embedding_macs(m_v, cfg.embed.patch_dim() as u64, d);
    let vtm_head = 2 * d;
    let enc_single = |m: u64| encoder_macs_masked(e, &[m], &vec![true; e.k]);
    let visual_item = embed_v + enc_single(m_v);
    Ok(match mode {
        StreamMode::Single => {
            if cached {
                return Err(Error::Contract(
                    "single-stream scoring encodes every pair jointly and cannot use cached latents"
                        .into(),
                ));
            }
            let joint = match e.aggregation {
                Aggregation::Joint => enc_single(m_v + m_t),
                _ => encoder_macs_masked(e, &[m_v, m_t], &vec![true; e.k]),
            };
            c * (embed_v + joint + decoder_macs(1, n, d, r) + vtm_head)
        }
        StreamMode::Mixed => {
            let per_item = decoder_macs(1, 2 * n, d, r) + vtm_head;
            let fresh = if cached { 0 } else { visual_item };
            enc_single(m_t) + c * (per_item + fresh)
        }
        StreamMode::Multi => {
            let pool = decoder_macs(1, n, d, r);
            let fresh = if cached { 0 } else { visual_item + pool };
            enc_single(m_t) + pool + c * (d + fresh)
        }
    })
}

/// Per-component inference cost of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub m_v: u64,
    pub m_t: u64,
    pub n: u64,
    pub q: u64,
    pub c: u64,
    pub embedding: u64,
    pub latent_pos: u64,
    /// One entry per block; 0 for dropped blocks.
    pub cross_attn: Vec<u64>,
    /// One entry per self-attention layer.
    pub self_attn: Vec<u64>,
    pub decoder: u64,
    pub heads: u64,
    pub total: u64,
    pub config: EncoderConfig,
}

impl CostReport {
    /// Joint forward pass over `m_v` visual and `m_t` text rows decoding
    /// `q_vtm` VTM rows and `q_mlm` MLM rows.
    pub fn forward(
        cfg: &ModelConfig,
        m_v: u64,
        m_t: u64,
        q_vtm: u64,
        q_mlm: u64,
        active: &[bool],
    ) -> Result<Self> {
        let e = &cfg.encoder;
        if active.len() != e.k {
            return Err(Error::Contract(format!(
                "mask has {} entries for k={}",
                active.len(),
                e.k
            )));
        }
        let (n, d, r) = (e.n_latents as u64, e.d as u64, e.mlp_ratio as u64);
        let inputs: Vec<u64> = match e.aggregation {
            Aggregation::Joint => vec![m_v + m_t],
            _ => [m_v, m_t].into_iter().filter(|&m| m > 0).collect(),
        };
        let per_block: u64 = inputs.iter().map(|&m| cross_term(e, m)).sum();
        let cross_attn: Vec<u64> = active.iter().map(|&a| if a { per_block } else { 0 }).collect();
        let self_layers = match e.aggregation {
            Aggregation::SeparatePlus => e.k * e.l * inputs.len(),
            _ => e.k * e.l,
        };
        let self_attn = vec![self_term(e); self_layers];
        let q = q_vtm + q_mlm;
        let embedding = embedding_macs(m_v, cfg.embed.patch_dim() as u64, d);
        let latent_pos = latent_pos_macs(e);
        let decoder = if q > 0 { decoder_macs(q, n, d, r) } else { 0 };
        let heads = q_vtm * d * 2 + q_mlm * d * cfg.embed.vocab_size as u64;
        let total = embedding
            + latent_pos
            + cross_attn.iter().sum::<u64>()
            + self_attn.iter().sum::<u64>()
            + decoder
            + heads;
        Ok(Self {
            m_v,
            m_t,
            n,
            q,
            c: 1,
            embedding,
            latent_pos,
            cross_attn,
            self_attn,
            decoder,
            heads,
            total,
            config: e.clone(),
        })
    }

    /// Encoder share of the total (latent positions, cross and self attention).
    pub fn encoder(&self) -> u64 {
        self.latent_pos + self.cross_attn.iter().sum::<u64>() + self.self_attn.iter().sum::<u64>()
    }

    pub fn gflops(&self) -> f64 {
        gflops(self.total)
    }
}

pub fn gflops(macs: u64) -> f64 {
    2.0 * macs as f64 / 1e9
}

/// Short stable hash of a serialisable configuration, for CSV rows.
pub fn config_hash<C: Serialize>(cfg: &C) -> String {
    let json = serde_json::to_vec(cfg).unwrap_or_default();
    let digest = Sha256::digest(&json);
    digest[..6].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    MFrames,
    MFramesize,
    N,
    CrossLayers,
    CorpusSize,
}

impl std::str::FromStr for SweepVariable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frames" | "m_frames" => Ok(Self::MFrames),
            "framesize" | "m_framesize" => Ok(Self::MFramesize),
            "n" | "latents" => Ok(Self::N),
            "cross_layers" | "depth" => Ok(Self::CrossLayers),
            "corpus_size" | "corpus" => Ok(Self::CorpusSize),
            _ => Err(Error::Parameter(format!("unknown sweep variable `{s}`"))),
        }
    }
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            Self::MFrames => "m_frames",
            Self::MFramesize => "m_framesize",
            Self::N => "n",
            Self::CrossLayers => "cross_layers",
            Self::CorpusSize => "corpus_size",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub grid: Vec<u64>,
    pub model: ModelConfig,
    /// Frames for non-frame sweeps.
    pub frames: u64,
    /// Square frame side in pixels for non-framesize sweeps.
    pub frame_size: u64,
    /// Text rows appended to the visual rows.
    pub text_len: u64,
    /// Self-attention depth of the baseline encoder; 0 means `k·(1+l)`.
    pub baseline_depth: u64,
}

impl SweepSpec {
    pub fn new(variable: SweepVariable, grid: Vec<u64>, model: ModelConfig) -> Self {
        Self {
            variable,
            grid,
            model,
            frames: 1,
            frame_size: 32,
            text_len: 0,
            baseline_depth: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Parameter("sweep grid is empty".into()));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("sweep grid must be strictly ascending".into()));
        }
        if self.grid[0] == 0 {
            return Err(Error::Parameter("sweep values must be positive".into()));
        }
        self.model.validate()
    }

    pub fn baseline_depth(&self) -> u64 {
        if self.baseline_depth > 0 {
            self.baseline_depth
        } else {
            let e = &self.model.encoder;
            (e.k * (1 + e.l)) as u64
        }
    }
}

/// One measured grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variable: String,
    pub value: u64,
    pub analytic_mac: u64,
    pub measured_mac: u64,
    pub wall_ns: u128,
    pub mode: String,
    pub config_hash: String,
}

pub const SWEEP_CSV_HEADER: &str = "variable,analytic_mac,measured_mac,wall_ns,mode,config_hash";

/// Writes rows as CSV. `variable` is rendered as `name=value`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}={},{},{},{},{},{}",
            r.variable, r.value, r.analytic_mac, r.measured_mac, r.wall_ns, r.mode, r.config_hash
        );
    }
    out
}

/// Same as [`sweep_csv`] with the wall-clock column zeroed, for
/// byte-reproducible output.
pub fn sweep_csv_deterministic(rows: &[SweepRow]) -> String {
    let rows: Vec<SweepRow> = rows
        .iter()
        .map(|r| SweepRow {
            wall_ns: 0,
            ..r.clone()
        })
        .collect();
    sweep_csv(&rows)
}

/// Times `f` and returns its result with elapsed nanoseconds.
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, u128) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_nanos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(cross_attn_macs(1, 1, 2, 4), 52);
        assert_eq!(baseline_selfattn_macs(1, 2, 1, 4), 52);
        let cfg = EncoderConfig {
            d: 2,
            heads: 1,
            k: 1,
            l: 0,
            n_latents: 1,
            ..EncoderConfig::toy()
        };
        assert_eq!(encoder_macs(&cfg, 1), 52);
    }

    #[test]
    fn single_stream_rejects_cache() {
        let cfg = ModelConfig::default();
        assert!(matches!(
            retrieval_query_macs(StreamMode::Single, &cfg, 16, 8, 4, true),
            Err(Error::Contract(_))
        ));
        assert!(retrieval_query_macs(StreamMode::Multi, &cfg, 16, 8, 0, true).is_err());
    }
}
