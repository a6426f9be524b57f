//! Input array construction: every row is the sum of a patch or token
//! embedding, a positional embedding, a modality embedding and (videos only)
//! a temporal embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Byte-level toy vocabulary: 256 byte values plus four specials.
pub mod vocab {
    pub const PAD: usize = 256;
    pub const MASK: usize = 257;
    pub const CLS: usize = 258;
    pub const UNK: usize = 259;
    pub const SIZE: usize = 260;

    pub fn is_special(id: usize) -> bool {
        id >= 256
    }

    /// Renders ids back to text; specials become `[PAD]`, `[MASK]`, ...
    pub fn decode(ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD => out.push_str("[PAD]"),
                MASK => out.push_str("[MASK]"),
                CLS => out.push_str("[CLS]"),
                UNK => out.push_str("[UNK]"),
                b if b < 256 => out.push(b as u8 as char),
                _ => out.push('?'),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Vision,
    Text,
}

impl Modality {
    fn index(self) -> usize {
        match self {
            Modality::Vision => 0,
            Modality::Text => 1,
        }
    }
}

/// `frames × height × width × channels` pixels in `[0, 1]`, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionInput {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl VisionInput {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Parameter("vision input needs at least one frame".into()));
        }
        if pixels.len() != frames * height * width * channels {
            return Err(Error::shape(
                "vision input",
                &[frames, height, width, channels],
                &[pixels.len()],
            ));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            pixels,
        })
    }

    /// A single frame; images are single-frame videos.
    pub fn image(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        Self::new(1, height, width, channels, pixels)
    }

    pub fn constant(frames: usize, height: usize, width: usize, channels: usize, v: f32) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            pixels: vec![v; frames * height * width * channels],
        }
    }

    fn pixel(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[((f * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Patches per frame for patch size `p`.
    pub fn patches_per_frame(&self, p: usize) -> usize {
        (self.height / p) * (self.width / p)
    }
}

/// Token ids plus a validity mask; padded positions carry `mask = false`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextInput {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TextInput {
    pub fn new(token_ids: Vec<usize>, attention_mask: Vec<bool>) -> Result<Self> {
        if token_ids.len() != attention_mask.len() {
            return Err(Error::shape(
                "text input",
                &[token_ids.len()],
                &[attention_mask.len()],
            ));
        }
        Ok(Self {
            token_ids,
            attention_mask,
        })
    }

    /// Byte-encodes `text`, truncating to `max_len`; optionally pads to `pad_to`.
    pub fn from_str(text: &str, max_len: usize, pad_to: Option<usize>) -> Self {
        let mut ids: Vec<usize> = text.bytes().take(max_len).map(usize::from).collect();
        let mut mask = vec![true; ids.len()];
        if let Some(n) = pad_to {
            while ids.len() < n.min(max_len) {
                ids.push(vocab::PAD);
                mask.push(false);
            }
        }
        Self {
            token_ids: ids,
            attention_mask: mask,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn with_ids(&self, ids: Vec<usize>) -> Self {
        Self {
            token_ids: ids,
            attention_mask: self.attention_mask.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub patch: usize,
    pub channels: usize,
    pub max_frames: usize,
    pub max_patches: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 3,
            max_frames: 4,
            max_patches: 64,
            max_text_len: 64,
            vocab_size: vocab::SIZE,
        }
    }
}

impl EmbeddingConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Parameter handles of the embedding tables.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub cfg: EmbeddingConfig,
    pub d: usize,
    pub modality: ParamId,
    pub temporal: ParamId,
    pub patch_pos: ParamId,
    pub token_pos: ParamId,
    pub patch_proj_w: ParamId,
    pub patch_proj_b: ParamId,
    pub token: ParamId,
}

pub(crate) fn init_normal<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.truncated_normal(std)))
}

impl EmbeddingTables {
    pub fn init<T: Scalar>(
        cfg: &EmbeddingConfig,
        d: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = 0.02;
        let pd = cfg.patch_dim();
        let mut reg = |name: &str, t: Tensor<T>, decay: bool| {
            store.register(&format!("embed.{name}"), t, decay)
        };
        Ok(Self {
            cfg: cfg.clone(),
            d,
            modality: reg("modality", init_normal(rng, &[2, d], std), true)?,
            temporal: reg("temporal", init_normal(rng, &[cfg.max_frames, d], std), true)?,
            patch_pos: reg("patch_pos", init_normal(rng, &[cfg.max_patches, d], std), true)?,
            token_pos: reg("token_pos", init_normal(rng, &[cfg.max_text_len, d], std), true)?,
            patch_proj_w: reg(
                "patch_proj.w",
                init_normal(rng, &[pd, d], (1.0 / pd as f64).sqrt()),
                true,
            )?,
            patch_proj_b: reg("patch_proj.b", Tensor::zeros(&[d]), false)?,
            token: reg("token", init_normal(rng, &[cfg.vocab_size, d], std), true)?,
        })
    }
}

/// Splits frames into non-overlapping `p × p` patches.
///
/// Rows are frame-major, then row-major within a frame; each row is
/// flattened in `(py, px, channel)` order.
pub fn patchify<T: Scalar>(v: &VisionInput, p: usize) -> Result<Tensor<T>> {
    if p == 0 || v.height % p != 0 || v.width % p != 0 {
        return Err(Error::shape("patchify", &[v.height, v.width], &[p]));
    }
    let (gh, gw) = (v.height / p, v.width / p);
    let dim = p * p * v.channels;
    let mut data = Vec::with_capacity(v.frames * gh * gw * dim);
    for f in 0..v.frames {
        for by in 0..gh {
            for bx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..v.channels {
                            data.push(T::of(v.pixel(f, by * p + py, bx * p + px, c) as f64));
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[v.frames * gh * gw, dim], data)
}

/// Embedded multimodal input rows `c` (M × d) with per-row modality tags.
#[derive(Clone, Debug)]
pub struct InputArray {
    pub rows: Var,
    pub modality: Vec<Modality>,
    /// `false` marks padding that attention must ignore.
    pub valid: Vec<bool>,
}

impl InputArray {
    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn single_modality(&self) -> Option<Modality> {
        let first = *self.modality.first()?;
        self.modality.iter().all(|&m| m == first).then_some(first)
    }

    pub fn key_mask(&self) -> Option<&[bool]> {
        if self.valid.iter().all(|&v| v) {
            None
        } else {
            Some(&self.valid)
        }
    }
}

pub(crate) fn modality_rows<T: Scalar>(
    g: &mut Tape<'_, T>,
    tables: &EmbeddingTables,
    m: Modality,
    n: usize,
) -> Result<Var> {
    let t = g.param(tables.modality);
    g.gather_rows(t, &vec![m.index(); n])
}

/// Vision rows: `patch_proj(patch) + patch_pos[p] + modality[V]`, plus
/// `temporal[f]` when `is_video`.
pub fn embed_vision<T: Scalar>(
    g: &mut Tape<'_, T>,
    tables: &EmbeddingTables,
    v: &VisionInput,
    is_video: bool,
) -> Result<InputArray> {
    let cfg = &tables.cfg;
    if v.frames > cfg.max_frames {
        return Err(Error::Capacity(format!(
            "{} frames exceed max_frames {}",
            v.frames, cfg.max_frames
        )));
    }
    if v.channels != cfg.channels {
        return Err(Error::shape("embed_vision channels", &[v.channels], &[cfg.channels]));
    }
    let per_frame = v.patches_per_frame(cfg.patch);
    if per_frame > cfg.max_patches {
        return Err(Error::Capacity(format!(
            "{per_frame} patches per frame exceed max_patches {}",
            cfg.max_patches
        )));
    }
    let patches = g.leaf(patchify::<T>(v, cfg.patch)?);
    let rows = patches_rows(g, tables, patches)?;
    let n = g.rows(rows);

    let pos_ids: Vec<usize> = (0..n).map(|r| r % per_frame).collect();
    let pos_table = g.param(tables.patch_pos);
    let pos = g.gather_rows(pos_table, &pos_ids)?;
    let mut x = g.add(rows, pos)?;
    let modality = modality_rows(g, tables, Modality::Vision, n)?;
    x = g.add(x, modality)?;
    if is_video {
        let frame_ids: Vec<usize> = (0..n).map(|r| r / per_frame).collect();
        let t_table = g.param(tables.temporal);
        let temporal = g.gather_rows(t_table, &frame_ids)?;
        x = g.add(x, temporal)?;
    }
    Ok(InputArray {
        rows: x,
        modality: vec![Modality::Vision; n],
        valid: vec![true; n],
    })
}

fn patches_rows<T: Scalar>(
    g: &mut Tape<'_, T>,
    tables: &EmbeddingTables,
    patches: Var,
) -> Result<Var> {
    let w = g.param(tables.patch_proj_w);
    let b = g.param(tables.patch_proj_b);
    let proj = g.matmul(patches, w)?;
    g.add_row(proj, b)
}

/// Text rows: `token[id] + token_pos[i] + modality[T]`.
pub fn embed_text<T: Scalar>(
    g: &mut Tape<'_, T>,
    tables: &EmbeddingTables,
    t: &TextInput,
) -> Result<InputArray> {
    let cfg = &tables.cfg;
    if t.len() > cfg.max_text_len {
        return Err(Error::Capacity(format!(
            "text of length {} exceeds max_text_len {}",
            t.len(),
            cfg.max_text_len
        )));
    }
    if let Some(&bad) = t.token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocabulary {
            id: bad,
            size: cfg.vocab_size,
        });
    }
    let n = t.len();
    let tok_table = g.param(tables.token);
    let tok = g.gather_rows(tok_table, &t.token_ids)?;
    let pos_table = g.param(tables.token_pos);
    let pos = g.gather_rows(pos_table, &(0..n).collect::<Vec<_>>())?;
    let x = g.add(tok, pos)?;
    let modality = modality_rows(g, tables, Modality::Text, n)?;
    let x = g.add(x, modality)?;
    Ok(InputArray {
        rows: x,
        modality: vec![Modality::Text; n],
        valid: t.attention_mask.clone(),
    })
}

/// Concatenates vision rows (first) and text rows into one input array.
pub fn build_input_array<T: Scalar>(
    g: &mut Tape<'_, T>,
    tables: &EmbeddingTables,
    vision: Option<(&VisionInput, bool)>,
    text: Option<&TextInput>,
) -> Result<InputArray> {
    let text = text.filter(|t| !t.is_empty());
    let parts: Vec<InputArray> = match (vision, text) {
        (None, None) => {
            return Err(Error::Contract(
                "input array needs at least one modality".into(),
            ))
        }
        (Some((v, is_video)), None) => vec![embed_vision(g, tables, v, is_video)?],
        (None, Some(t)) => vec![embed_text(g, tables, t)?],
        (Some((v, is_video)), Some(t)) => vec![
            embed_vision(g, tables, v, is_video)?,
            embed_text(g, tables, t)?,
        ],
    };
    concat_inputs(g, &parts)
}

pub(crate) fn concat_inputs<T: Scalar>(
    g: &mut Tape<'_, T>,
    parts: &[InputArray],
) -> Result<InputArray> {
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    let rows: Vec<Var> = parts.iter().map(|p| p.rows).collect();
    let x = g.concat_rows(&rows)?;
    Ok(InputArray {
        rows: x,
        modality: parts.iter().flat_map(|p| p.modality.clone()).collect(),
        valid: parts.iter().flat_map(|p| p.valid.clone()).collect(),
    })
}
