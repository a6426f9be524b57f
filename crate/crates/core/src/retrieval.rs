//! Vision-text similarity under the three retrieval topologies, the visual
//! latent cache, ranking and recall.
//!
//! * single: every (text, item) pair is encoded jointly and scored by the VTM head;
//! * mixed: each modality is encoded alone, then one decoder pass over the
//!   concatenated latents feeds the VTM head;
//! * multi: each modality is encoded alone and pooled to a unit vector; the
//!   score is their dot product over a temperature.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::corpus::CorpusItem;
use crate::embedding::{TextInput, VisionInput};
use crate::error::{Error, Result};
use crate::model::{PerceiverVl, Single};
use crate::tensor::{hex, ParamStore, Tape, Tensor, Var};

pub use crate::cost::StreamMode;

/// Visual item to rank.
#[derive(Clone, Debug)]
pub struct Item {
    pub id: u64,
    pub vision: VisionInput,
    pub is_video: bool,
}

/// Hash of the model configuration and every weight value. Cached latents
/// are only reused under an identical fingerprint.
pub fn fingerprint(model: &PerceiverVl, store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.cfg).unwrap_or_default());
    h.update(store.digest().as_bytes());
    hex(&h.finalize())
}

/// Per-item visual latents (and their pooled vectors) for one fingerprint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentCache {
    pub fingerprint: String,
    latents: BTreeMap<u64, Tensor<f32>>,
    pooled: BTreeMap<u64, Tensor<f32>>,
}

const CACHE_KIND: &str = "latent-cache";

impl LatentCache {
    pub fn new(fingerprint: String) -> Self {
        Self {
            fingerprint,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Cached latent for `id`, or `None` when absent or when `fingerprint`
    /// differs from the one the cache was built under.
    pub fn get(&self, id: u64, fingerprint: &str) -> Option<&Tensor<f32>> {
        (self.fingerprint == fingerprint)
            .then(|| self.latents.get(&id))
            .flatten()
    }

    pub fn get_pooled(&self, id: u64, fingerprint: &str) -> Option<&Tensor<f32>> {
        (self.fingerprint == fingerprint)
            .then(|| self.pooled.get(&id))
            .flatten()
    }

    pub fn insert(&mut self, id: u64, z: Tensor<f32>) {
        self.latents.insert(id, z);
    }

    pub fn insert_pooled(&mut self, id: u64, p: Tensor<f32>) {
        self.pooled.insert(id, p);
    }

    /// Drops every entry and adopts a new fingerprint.
    pub fn reset(&mut self, fingerprint: String) {
        *self = Self::new(fingerprint);
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = Vec::new();
        for (id, t) in &self.latents {
            tensors.push((format!("latent/{id}"), t.clone()));
        }
        for (id, t) in &self.pooled {
            tensors.push((format!("pooled/{id}"), t.clone()));
        }
        Container {
            header: serde_json::json!({ "kind": CACHE_KIND, "fingerprint": self.fingerprint }),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.header.get("kind").and_then(|k| k.as_str()) != Some(CACHE_KIND) {
            return Err(Error::Format("not a latent cache".into()));
        }
        let fingerprint = c
            .header
            .get("fingerprint")
            .and_then(|f| f.as_str())
            .ok_or_else(|| Error::Format("latent cache without fingerprint".into()))?
            .to_string();
        let mut cache = Self::new(fingerprint);
        for (name, t) in &c.tensors {
            let (kind, id) = name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad cache entry `{name}`")))?;
            let id: u64 = id
                .parse()
                .map_err(|_| Error::Format(format!("bad cache id in `{name}`")))?;
            match kind {
                "latent" => cache.insert(id, t.clone()),
                "pooled" => cache.insert_pooled(id, t.clone()),
                _ => return Err(Error::Format(format!("bad cache entry `{name}`"))),
            }
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Scores between queries (rows) and items (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub mode: StreamMode,
    pub item_ids: Vec<u64>,
    pub scores: Vec<Vec<f64>>,
}

/// Evaluation-mode scorer over one set of weights.
pub struct Scorer<'a> {
    pub model: &'a PerceiverVl,
    pub store: &'a ParamStore<f32>,
    /// Cross-attention mask used for every encode.
    pub active: Vec<bool>,
    pub macs: u64,
    fingerprint: String,
}

fn logit_margin(t: &Tensor<f32>) -> f64 {
    t.data()[1] as f64 - t.data()[0] as f64
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a PerceiverVl, store: &'a ParamStore<f32>) -> Self {
        Self {
            model,
            store,
            active: model.full_depth(),
            macs: 0,
            fingerprint: fingerprint(model, store),
        }
    }

    /// Encodes with a fixed cross-attention mask. Latents cached under one
    /// mask are not reused under another.
    pub fn with_active(mut self, active: Vec<bool>) -> Self {
        if active != self.model.full_depth() {
            let mask: String = active.iter().map(|&a| if a { '1' } else { '0' }).collect();
            self.fingerprint = format!("{}-{mask}", fingerprint(self.model, self.store));
        }
        self.active = active;
        self
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn run<R>(&mut self, f: impl FnOnce(&mut Tape<'_, f32>) -> Result<(Var, R)>) -> Result<(Tensor<f32>, R)> {
        let mut g = Tape::with_params(self.store);
        let (v, r) = f(&mut g)?;
        self.macs += g.macs();
        Ok((g.value(v).clone(), r))
    }

    /// Joint encode of the pair, VTM decode, `logit(match) − logit(non-match)`.
    pub fn score_single(&mut self, v: &VisionInput, is_video: bool, t: &TextInput) -> Result<f64> {
        let (model, active) = (self.model, self.active.clone());
        let (logits, ()) = self.run(|g| {
            let z = model.encode_pair(g, Some((v, is_video)), Some(t), &active)?;
            Ok((model.vtm_logits(g, z.z)?, ()))
        })?;
        Ok(logit_margin(&logits))
    }

    /// Latent of one modality encoded alone (N × d).
    pub fn encode_modality(&mut self, x: Single<'_>) -> Result<Tensor<f32>> {
        let (model, active) = (self.model, self.active.clone());
        Ok(self.run(|g| Ok((model.encode_modality(g, x, &active)?.z, ())))?.0)
    }

    /// Unit-norm pooled vector (1 × d) of a latent.
    pub fn pool(&mut self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let model = self.model;
        Ok(self
            .run(|g| {
                let zv = g.leaf(z.clone());
                Ok((model.pool(g, zv)?, ()))
            })?
            .0)
    }

    /// Cosine of two pooled vectors over the temperature. Counts `d` MACs.
    pub fn score_multi_pooled(&mut self, pv: &Tensor<f32>, pt: &Tensor<f32>) -> f64 {
        self.macs += pv.numel() as u64;
        let dot: f64 = pv
            .data()
            .iter()
            .zip(pt.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        dot / self.model.cfg.temperature
    }

    /// Pools both latents, then [`Self::score_multi_pooled`].
    pub fn score_multi(&mut self, z_v: &Tensor<f32>, z_t: &Tensor<f32>) -> Result<f64> {
        let pv = self.pool(z_v)?;
        let pt = self.pool(z_t)?;
        Ok(self.score_multi_pooled(&pv, &pt))
    }

    /// VTM decode over `concat_rows(z_v, z_t)` (2N keys).
    pub fn score_mixed(&mut self, z_v: &Tensor<f32>, z_t: &Tensor<f32>) -> Result<f64> {
        let model = self.model;
        let (logits, ()) = self.run(|g| {
            let a = g.leaf(z_v.clone());
            let b = g.leaf(z_t.clone());
            let z = model.mixed_latents(g, a, b)?;
            Ok((model.vtm_logits(g, z)?, ()))
        })?;
        Ok(logit_margin(&logits))
    }

    /// Visual latent for `item`, from `cache` when it holds a fresh entry.
    pub fn item_latent(&mut self, item: &Item, cache: Option<&mut LatentCache>) -> Result<Tensor<f32>> {
        let fp = self.fingerprint.clone();
        if let Some(c) = cache {
            if c.fingerprint != fp {
                c.reset(fp.clone());
            }
            if let Some(z) = c.get(item.id, &fp) {
                return Ok(z.clone());
            }
            let z = self.encode_modality(Single::Vision(&item.vision, item.is_video))?;
            c.insert(item.id, z.clone());
            return Ok(z);
        }
        self.encode_modality(Single::Vision(&item.vision, item.is_video))
    }

    /// Pooled visual vector for `item`, from `cache` when possible.
    pub fn item_pooled(&mut self, item: &Item, mut cache: Option<&mut LatentCache>) -> Result<Tensor<f32>> {
        let fp = self.fingerprint.clone();
        if let Some(c) = cache.as_deref_mut() {
            if c.fingerprint == fp {
                if let Some(p) = c.get_pooled(item.id, &fp) {
                    return Ok(p.clone());
                }
            }
        }
        let z = self.item_latent(item, cache.as_deref_mut())?;
        let p = self.pool(&z)?;
        if let Some(c) = cache {
            c.insert_pooled(item.id, p.clone());
        }
        Ok(p)
    }

    /// Fills `cache` with every item's latent and pooled vector.
    pub fn warm_cache(&mut self, items: &[Item], cache: &mut LatentCache) -> Result<()> {
        for item in items {
            self.item_pooled(item, Some(cache))?;
        }
        Ok(())
    }

    /// Scores every query against every item. Returns the matrix and the
    /// MACs spent on each query (cache warm-up is not charged to queries).
    pub fn similarity(
        &mut self,
        mode: StreamMode,
        queries: &[TextInput],
        items: &[Item],
        mut cache: Option<&mut LatentCache>,
    ) -> Result<(SimilarityMatrix, Vec<u64>)> {
        if mode == StreamMode::Single && cache.is_some() {
            return Err(Error::Contract(
                "single-stream scoring cannot use cached latents".into(),
            ));
        }
        if let Some(c) = cache.as_deref_mut() {
            self.warm_cache(items, c)?;
        }
        let mut scores = Vec::with_capacity(queries.len());
        let mut per_query = Vec::with_capacity(queries.len());
        for t in queries {
            let start = self.macs;
            let row = match mode {
                StreamMode::Single => items
                    .iter()
                    .map(|it| self.score_single(&it.vision, it.is_video, t))
                    .collect::<Result<Vec<_>>>()?,
                StreamMode::Mixed => {
                    let zt = self.encode_modality(Single::Text(t))?;
                    let mut row = Vec::with_capacity(items.len());
                    for it in items {
                        let zv = self.item_latent(it, cache.as_deref_mut())?;
                        row.push(self.score_mixed(&zv, &zt)?);
                    }
                    row
                }
                StreamMode::Multi => {
                    let zt = self.encode_modality(Single::Text(t))?;
                    let pt = self.pool(&zt)?;
                    let mut row = Vec::with_capacity(items.len());
                    for it in items {
                        let pv = self.item_pooled(it, cache.as_deref_mut())?;
                        row.push(self.score_multi_pooled(&pv, &pt));
                    }
                    row
                }
            };
            if row.iter().any(|s| !s.is_finite()) {
                return Err(Error::Numeric("non-finite retrieval score".into()));
            }
            per_query.push(self.macs - start);
            scores.push(row);
        }
        Ok((
            SimilarityMatrix {
                mode,
                item_ids: items.iter().map(|i| i.id).collect(),
                scores,
            },
            per_query,
        ))
    }
}

/// Item ids per query in descending score order; ties go to the smaller id.
pub fn rank(sim: &SimilarityMatrix) -> Result<Vec<Vec<u64>>> {
    sim.scores
        .iter()
        .map(|row| {
            if row.len() != sim.item_ids.len() {
                return Err(Error::Contract("score row length differs from item count".into()));
            }
            if row.iter().any(|s| !s.is_finite()) {
                return Err(Error::Numeric("non-finite score".into()));
            }
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .total_cmp(&row[a])
                    .then(sim.item_ids[a].cmp(&sim.item_ids[b]))
            });
            Ok(order.into_iter().map(|i| sim.item_ids[i]).collect())
        })
        .collect()
}

/// Fraction of queries whose gold item is within the first `k` ranks.
pub fn recall_at_k(ranking: &[Vec<u64>], gold: &[u64], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Parameter("recall@k needs k >= 1".into()));
    }
    if ranking.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} rankings for {} gold ids",
            ranking.len(),
            gold.len()
        )));
    }
    if ranking.is_empty() {
        return Ok(0.0);
    }
    let hits = ranking
        .iter()
        .zip(gold)
        .filter(|(r, g)| r.iter().take(k).any(|id| id == *g))
        .count();
    Ok(hits as f64 / ranking.len() as f64)
}

/// R@1, R@5 and R@10.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

pub fn recalls(sim: &SimilarityMatrix, gold: &[u64]) -> Result<Recall> {
    let r = rank(sim)?;
    Ok(Recall {
        r1: recall_at_k(&r, gold, 1)?,
        r5: recall_at_k(&r, gold, 5)?,
        r10: recall_at_k(&r, gold, 10)?,
    })
}

/// Outcome of text-to-vision retrieval over a set of items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEval {
    pub mode: StreamMode,
    pub recall: Recall,
    pub queries: usize,
    pub corpus_size: usize,
    /// Mean MACs per query (cache warm-up excluded).
    pub query_macs: u64,
    /// Wall-clock of the scoring pass, warm-up excluded.
    pub wall_ns: u128,
}

/// Items to rank, with the corpus id as item id.
pub fn corpus_items(items: &[&CorpusItem]) -> Vec<Item> {
    items
        .iter()
        .map(|it| Item {
            id: it.id,
            vision: it.vision.clone(),
            is_video: it.is_video(),
        })
        .collect()
}

/// Ranks every item for each item's caption; the gold item is the captioned one.
pub fn evaluate_retrieval(
    model: &PerceiverVl,
    store: &ParamStore<f32>,
    items: &[&CorpusItem],
    mode: StreamMode,
    active: &[bool],
    cached: bool,
) -> Result<RetrievalEval> {
    let pool = corpus_items(items);
    let queries: Vec<TextInput> = items
        .iter()
        .map(|it| TextInput::from_str(&it.caption, model.cfg.embed.max_text_len, None))
        .collect();
    let gold: Vec<u64> = items.iter().map(|it| it.id).collect();
    let mut scorer = Scorer::new(model, store).with_active(active.to_vec());
    let use_cache = cached && mode != StreamMode::Single;
    let mut cache = LatentCache::new(scorer.fingerprint().to_string());
    if use_cache {
        scorer.warm_cache(&pool, &mut cache)?;
    }
    let start = std::time::Instant::now();
    let (sim, per_query) = scorer.similarity(mode, &queries, &pool, use_cache.then_some(&mut cache))?;
    let wall_ns = start.elapsed().as_nanos();
    Ok(RetrievalEval {
        mode,
        recall: recalls(&sim, &gold)?,
        queries: queries.len(),
        corpus_size: pool.len(),
        query_macs: per_query.iter().sum::<u64>() / per_query.len().max(1) as u64,
        wall_ns,
    })
}
