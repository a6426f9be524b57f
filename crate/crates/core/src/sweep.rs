//! Instrumented sweeps: every grid point runs a real forward pass and its
//! MAC count must equal the closed form.

use crate::cost::{
    baseline_selfattn_macs, config_hash, cross_term, embedding_macs, latent_pos_macs,
    retrieval_query_macs, self_term, timed, SweepRow, SweepSpec, SweepVariable,
};
use crate::embedding::{build_input_array, TextInput, VisionInput};
use crate::encoder::{sample_layerdrop_mask, Aggregation, BaselineEncoder, DepthMode};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PerceiverVl};
use crate::retrieval::{Item, LatentCache, Scorer, StreamMode};
use crate::tensor::{ParamStore, Rng, Tape};

/// Model config, frames and frame side for one grid value.
fn point_config(spec: &SweepSpec, value: u64) -> (ModelConfig, usize, usize) {
    let mut cfg = spec.model.clone();
    let mut frames = spec.frames as usize;
    let mut size = spec.frame_size as usize;
    match spec.variable {
        SweepVariable::MFrames => frames = value as usize,
        SweepVariable::MFramesize => size = value as usize,
        SweepVariable::N => cfg.encoder.n_latents = value as usize,
        SweepVariable::CrossLayers | SweepVariable::CorpusSize => {}
    }
    cfg.embed.max_frames = cfg.embed.max_frames.max(frames);
    let p = cfg.embed.patch;
    cfg.embed.max_patches = cfg.embed.max_patches.max((size / p) * (size / p));
    cfg.embed.max_text_len = cfg.embed.max_text_len.max(spec.text_len as usize);
    (cfg, frames, size)
}

fn inputs(cfg: &ModelConfig, frames: usize, size: usize, text_len: usize) -> (VisionInput, Option<TextInput>) {
    let v = VisionInput::constant(frames, size, size, cfg.embed.channels, 0.5);
    let t = (text_len > 0).then(|| {
        TextInput::new(vec![usize::from(b'a'); text_len], vec![true; text_len]).expect("valid text")
    });
    (v, t)
}

fn mismatch(point: String, parts: &[(String, u64, u64)]) -> Error {
    let detail = parts
        .iter()
        .filter(|(_, a, m)| a != m)
        .map(|(n, a, m)| format!("{n}: analytic {a} vs measured {m}"))
        .collect::<Vec<_>>()
        .join("; ");
    Error::CostMismatch { point, detail }
}

/// Analytic per-layer costs in the order the encoder records them.
fn expected_layers(cfg: &ModelConfig, lens: &[u64], active: &[bool]) -> Vec<(String, u64)> {
    let e = &cfg.encoder;
    let mut out = Vec::new();
    let cross = |b: usize, slot: usize, m: u64| (format!("block{b}.cross{slot}"), cross_term(e, m));
    let slot_of = |i: usize| match e.aggregation {
        Aggregation::Joint => 0,
        _ => i,
    };
    for (b, &on) in active.iter().enumerate() {
        match e.aggregation {
            Aggregation::Joint | Aggregation::Separate => {
                if on {
                    for (i, &m) in lens.iter().enumerate() {
                        out.push(cross(b, slot_of(i), m));
                    }
                }
                for i in 0..e.l {
                    out.push((format!("block{b}.self{i}"), self_term(e)));
                }
            }
            Aggregation::SeparatePlus => {
                for (i, &m) in lens.iter().enumerate() {
                    if on {
                        out.push(cross(b, i, m));
                    }
                    for j in i * e.l..(i + 1) * e.l {
                        out.push((format!("block{b}.self{j}"), self_term(e)));
                    }
                }
            }
        }
    }
    out
}

/// Embedding + latent encoder MACs of one encode, checked layer by layer.
fn latent_point(
    cfg: &ModelConfig,
    frames: usize,
    size: usize,
    text_len: usize,
    active: &[bool],
    seed: u64,
    point: &str,
) -> Result<(u64, u64, u128)> {
    let (model, store) = PerceiverVl::init::<f32>(cfg, seed)?;
    let (v, t) = inputs(cfg, frames, size, text_len);
    let (r, wall) = timed(|| -> Result<_> {
        let mut g = Tape::with_params(&store);
        let arrays = model.embed(&mut g, Some((&v, frames > 1)), t.as_ref())?;
        let embed_m = g.macs();
        let z = model.latent.latent(&mut g)?;
        let pos_m = g.macs() - embed_m;
        let enc = model.encoder.encode(&mut g, z, &arrays, active)?;
        Ok((embed_m, pos_m, enc))
    });
    let (embed_m, pos_m, enc) = r?;

    let p = cfg.embed.patch;
    let m_v = (frames * (size / p) * (size / p)) as u64;
    let m_t = text_len as u64;
    let lens: Vec<u64> = match cfg.encoder.aggregation {
        Aggregation::Joint => vec![m_v + m_t],
        _ => [m_v, m_t].into_iter().filter(|&m| m > 0).collect(),
    };
    let d = cfg.encoder.d as u64;
    let mut parts = vec![
        ("embedding".to_string(), embedding_macs(m_v, cfg.embed.patch_dim() as u64, d), embed_m),
        ("latent_pos".to_string(), latent_pos_macs(&cfg.encoder), pos_m),
    ];
    let want = expected_layers(cfg, &lens, active);
    if want.len() != enc.layer_macs.len() {
        return Err(Error::CostMismatch {
            point: point.to_string(),
            detail: format!("{} layers expected, {} ran", want.len(), enc.layer_macs.len()),
        });
    }
    for ((name, a), (got_name, m)) in want.iter().zip(&enc.layer_macs) {
        if name != got_name {
            return Err(Error::CostMismatch {
                point: point.to_string(),
                detail: format!("layer order: expected {name}, ran {got_name}"),
            });
        }
        parts.push((name.clone(), *a, *m));
    }
    let analytic: u64 = parts.iter().map(|p| p.1).sum();
    let measured: u64 = parts.iter().map(|p| p.2).sum();
    if analytic != measured {
        return Err(mismatch(point.to_string(), &parts));
    }
    Ok((analytic, measured, wall))
}

/// Embedding + self-attention baseline of `depth` layers over the joint input.
fn baseline_point(
    cfg: &ModelConfig,
    depth: u64,
    frames: usize,
    size: usize,
    text_len: usize,
    seed: u64,
    point: &str,
) -> Result<(u64, u64, u128)> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = Rng::new(seed).split("baseline");
    let tables = crate::embedding::EmbeddingTables::init(&cfg.embed, cfg.encoder.d, &mut store, &mut rng.split("embed"))?;
    let base = BaselineEncoder::init(&cfg.encoder, depth as usize, &mut store, &mut rng)?;
    let (v, t) = inputs(cfg, frames, size, text_len);
    let (r, wall) = timed(|| -> Result<_> {
        let mut g = Tape::with_params(&store);
        let x = build_input_array(&mut g, &tables, Some((&v, frames > 1)), t.as_ref())?;
        let e = g.macs();
        base.encode(&mut g, &x)?;
        Ok((e, g.macs() - e, x.len() as u64))
    });
    let (embed_m, enc_m, m) = r?;
    let p = cfg.embed.patch;
    let m_v = (frames * (size / p) * (size / p)) as u64;
    let d = cfg.encoder.d as u64;
    let parts = vec![
        ("embedding".to_string(), embedding_macs(m_v, cfg.embed.patch_dim() as u64, d), embed_m),
        (
            "baseline".to_string(),
            baseline_selfattn_macs(depth, d, m, cfg.encoder.mlp_ratio as u64),
            enc_m,
        ),
    ];
    let analytic: u64 = parts.iter().map(|p| p.1).sum();
    let measured: u64 = parts.iter().map(|p| p.2).sum();
    if analytic != measured {
        return Err(mismatch(point.to_string(), &parts));
    }
    Ok((analytic, measured, wall))
}

/// Per-query retrieval cost over `c` items for one stream mode.
fn retrieval_point(cfg: &ModelConfig, spec: &SweepSpec, c: u64, mode: StreamMode, seed: u64) -> Result<(u64, u64, u128)> {
    let (model, store) = PerceiverVl::init::<f32>(cfg, seed)?;
    let frames = spec.frames as usize;
    let size = spec.frame_size as usize;
    let text_len = spec.text_len.max(1) as usize;
    let (v, t) = inputs(cfg, frames, size, text_len);
    let t = t.expect("non-empty text");
    let items: Vec<Item> = (0..c)
        .map(|id| Item {
            id,
            vision: v.clone(),
            is_video: frames > 1,
        })
        .collect();
    let cached = mode != StreamMode::Single;
    let mut scorer = Scorer::new(&model, &store);
    let mut cache = LatentCache::new(scorer.fingerprint().to_string());
    if cached {
        scorer.warm_cache(&items, &mut cache)?;
    }
    let (r, wall) = timed(|| {
        let cache = if cached { Some(&mut cache) } else { None };
        scorer.similarity(mode, std::slice::from_ref(&t), &items, cache)
    });
    let measured = r?.1[0];
    let p = cfg.embed.patch;
    let m_v = (frames * (size / p) * (size / p)) as u64;
    let analytic = retrieval_query_macs(mode, cfg, m_v, text_len as u64, c, cached)?;
    if analytic != measured {
        return Err(Error::CostMismatch {
            point: format!("corpus_size={c} mode={mode}"),
            detail: format!("per-query analytic {analytic} vs measured {measured}"),
        });
    }
    Ok((analytic, measured, wall))
}

/// Runs every grid point of `spec`.
pub fn run_sweep(spec: &SweepSpec, seed: u64) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    let name = spec.variable.name();
    for &value in &spec.grid {
        let (cfg, frames, size) = point_config(spec, value);
        cfg.validate()?;
        let hash = config_hash(&cfg);
        let point = format!("{name}={value}");
        let text_len = spec.text_len as usize;
        let mut push = |mode: &str, (analytic, measured, wall): (u64, u64, u128)| {
            rows.push(SweepRow {
                variable: name.to_string(),
                value,
                analytic_mac: analytic,
                measured_mac: measured,
                wall_ns: wall,
                mode: mode.to_string(),
                config_hash: hash.clone(),
            })
        };
        match spec.variable {
            SweepVariable::MFrames | SweepVariable::MFramesize => {
                let full = vec![true; cfg.encoder.k];
                push("latent", latent_point(&cfg, frames, size, text_len, &full, seed, &point)?);
                push(
                    "baseline",
                    baseline_point(&cfg, spec.baseline_depth(), frames, size, text_len, seed, &point)?,
                );
            }
            SweepVariable::N => {
                let full = vec![true; cfg.encoder.k];
                push("latent", latent_point(&cfg, frames, size, text_len, &full, seed, &point)?);
            }
            SweepVariable::CrossLayers => {
                let active = sample_layerdrop_mask(
                    cfg.encoder.k,
                    0.0,
                    &mut Rng::new(seed),
                    DepthMode::Fixed(value as usize),
                )?;
                push("fixed", latent_point(&cfg, frames, size, text_len, &active, seed, &point)?);
            }
            SweepVariable::CorpusSize => {
                for mode in [StreamMode::Single, StreamMode::Mixed, StreamMode::Multi] {
                    push(&mode.to_string(), retrieval_point(&cfg, spec, value, mode, seed)?);
                }
            }
        }
    }
    Ok(rows)
}
