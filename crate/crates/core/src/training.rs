//! Pretraining objectives (VTM + MLM), retrieval and QA finetuning, Adam,
//! and stage-wise parameter freezing.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{answer_index, CorpusItem};
use crate::decoder::{concat_queries, TaskTag};
use crate::embedding::{vocab, TextInput};
use crate::encoder::{sample_layerdrop_mask, DepthMode};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PerceiverVl, Single};
use crate::retrieval::StreamMode;
use crate::tensor::{
    grad_check, GradCheckReport, Gradients, ParamId, ParamStore, Rng, Sample, Scalar, Tape, Tensor, Var,
};

/// BERT-style corruption probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    /// Chance that a non-pad token becomes a prediction target.
    pub select: f64,
    /// Of the targets: replaced by `[MASK]`.
    pub mask: f64,
    /// Of the targets: replaced by a random byte. The rest stay unchanged.
    pub random: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            select: 0.15,
            mask: 0.8,
            random: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedText {
    /// Corrupted ids fed to the encoder.
    pub input: TextInput,
    /// Positions selected for prediction.
    pub flags: Vec<bool>,
    /// Original ids at selected positions.
    pub targets: Vec<Option<usize>>,
}

pub fn mask_tokens(t: &TextInput, spec: &MaskSpec, rng: &mut Rng) -> MaskedText {
    let mut ids = t.token_ids.clone();
    let mut flags = vec![false; ids.len()];
    let mut targets = vec![None; ids.len()];
    for i in 0..ids.len() {
        if !t.attention_mask[i] || ids[i] == vocab::PAD {
            continue;
        }
        if !rng.bernoulli(spec.select) {
            continue;
        }
        flags[i] = true;
        targets[i] = Some(ids[i]);
        let u = rng.uniform();
        if u < spec.mask {
            ids[i] = vocab::MASK;
        } else if u < spec.mask + spec.random {
            ids[i] = rng.below(256);
        }
    }
    MaskedText {
        input: t.with_ids(ids),
        flags,
        targets,
    }
}

/// One (text, vision) pairing by index into the item list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VtmPair {
    pub text: usize,
    pub vision: usize,
    pub is_match: bool,
}

/// Draws `batch` anchors; each keeps its own visual input or, with
/// probability `p_negative`, takes another item's. A replacement is never
/// the anchor itself and, when one exists, never shares its caption.
pub fn make_vtm_batch(
    items: &[&CorpusItem],
    batch: usize,
    p_negative: f64,
    rng: &mut Rng,
) -> Result<Vec<VtmPair>> {
    if items.len() < 2 {
        return Err(Error::Contract("VTM batches need at least two items".into()));
    }
    if !(0.0..=1.0).contains(&p_negative) {
        return Err(Error::Parameter(format!("p_negative={p_negative} not in [0,1]")));
    }
    (0..batch)
        .map(|_| {
            let i = rng.below(items.len());
            if !rng.bernoulli(p_negative) {
                return Ok(VtmPair {
                    text: i,
                    vision: i,
                    is_match: true,
                });
            }
            Ok(VtmPair {
                text: i,
                vision: draw_negative(items, i, rng),
                is_match: false,
            })
        })
        .collect()
}

fn draw_negative(items: &[&CorpusItem], i: usize, rng: &mut Rng) -> usize {
    for _ in 0..64 {
        let j = rng.below(items.len() - 1);
        let j = if j >= i { j + 1 } else { j };
        if items[j].caption != items[i].caption {
            return j;
        }
    }
    let j = rng.below(items.len() - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Mean 2-way cross-entropy over `logits` (B × 2); label 1 means match.
pub fn loss_vtm<T: Scalar>(g: &mut Tape<'_, T>, logits: Var, labels: &[bool]) -> Result<Var> {
    let targets: Vec<Option<usize>> = labels.iter().map(|&m| Some(usize::from(m))).collect();
    g.cross_entropy(logits, &targets)
}

/// Mean cross-entropy over flagged positions only; 0 when nothing is flagged.
pub fn loss_mlm<T: Scalar>(g: &mut Tape<'_, T>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

/// Symmetric InfoNCE over a B × B similarity matrix whose diagonal holds
/// the matching pairs.
pub fn loss_contrastive<T: Scalar>(g: &mut Tape<'_, T>, sim: Var) -> Result<Var> {
    let b = g.rows(sim);
    if g.cols(sim) != b {
        return Err(Error::shape("contrastive", g.shape(sim), &[b, b]));
    }
    let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
    let rows = g.cross_entropy(sim, &diag)?;
    let t = g.transpose(sim)?;
    let cols = g.cross_entropy(t, &diag)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, T::of(0.5)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl OptimState {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Adam with bias correction and decoupled weight decay on decay-flagged
/// parameters. Frozen parameters are left untouched, moments included.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimState,
) -> Result<()> {
    if !grads.all_finite() {
        let bad: Vec<&str> = grads
            .iter()
            .filter(|(_, g)| !g.is_finite())
            .map(|(id, _)| store.name(id))
            .collect();
        return Err(Error::Numeric(format!("non-finite gradients in {bad:?}")));
    }
    state.step += 1;
    let c = state.cfg.clone();
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (id, g) in grads.iter() {
        if store.is_frozen(id) {
            continue;
        }
        let decay = if store.decays(id) { c.weight_decay } else { 0.0 };
        let p = store.tensor(id);
        let n = p.numel();
        let m = state.m.entry(id).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(id).or_insert_with(|| vec![0.0; n]);
        let data: Vec<T> = p
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(i, (&w, &gi))| {
                let (w, gi) = (w.as_f64(), gi.as_f64());
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                T::of(w - c.lr * (mh / (vh.sqrt() + c.eps) + decay * w))
            })
            .collect();
        let shape = p.shape().to_vec();
        store.set(id, Tensor::new(&shape, data)?)?;
    }
    Ok(())
}

/// Which parameters a stage freezes, by name substring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Freeze {
    None,
    Matching(Vec<String>),
    AllExcept(Vec<String>),
}

impl Freeze {
    pub fn is_frozen(&self, name: &str) -> bool {
        match self {
            Freeze::None => false,
            Freeze::Matching(p) => p.iter().any(|s| name.contains(s.as_str())),
            Freeze::AllExcept(p) => !p.iter().any(|s| name.contains(s.as_str())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub steps: usize,
    pub freeze: Freeze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<Stage>,
}

/// Name fragment shared by every cross-attention parameter.
pub const CROSS_ATTENTION: &str = ".cross";

impl Schedule {
    pub fn constant(steps: usize) -> Self {
        Self {
            stages: vec![Stage {
                steps,
                freeze: Freeze::None,
            }],
        }
    }

    /// First `warm` steps train only cross-attention layers, then everything.
    pub fn two_stage(warm: usize, total: usize) -> Self {
        let warm = warm.min(total);
        let mut stages = vec![];
        if warm > 0 {
            stages.push(Stage {
                steps: warm,
                freeze: Freeze::AllExcept(vec![CROSS_ATTENTION.into()]),
            });
        }
        stages.push(Stage {
            steps: total - warm,
            freeze: Freeze::None,
        });
        Self { stages }
    }

    pub fn total(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Stage index and stage active at `step` (0-based).
    pub fn stage_at(&self, step: usize) -> Option<(usize, &Stage)> {
        let mut end = 0;
        for (i, s) in self.stages.iter().enumerate() {
            end += s.steps;
            if step < end {
                return Some((i, s));
            }
        }
        None
    }
}

/// Named scalar metrics of one step or one evaluation.
pub type Metrics = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub p_negative: f64,
    pub mask: MaskSpec,
    /// Steps at the start that only train cross-attention layers.
    pub cross_only_steps: usize,
    pub vtm_weight: f64,
    pub mlm_weight: f64,
    /// Also score masked tokens of mismatched pairs.
    pub mlm_on_negatives: bool,
    /// In-batch negatives per text for single/mixed retrieval finetuning.
    pub negatives: usize,
    /// Linear warmup length; afterwards the rate follows a cosine down to
    /// `final_lr_ratio · lr`.
    pub warmup_steps: usize,
    pub final_lr_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            p_negative: 0.5,
            mask: MaskSpec::default(),
            cross_only_steps: 0,
            vtm_weight: 1.0,
            mlm_weight: 1.0,
            mlm_on_negatives: true,
            negatives: 3,
            warmup_steps: 100,
            final_lr_ratio: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::two_stage(self.cross_only_steps, self.steps)
    }

    pub fn lr(&self) -> LrSchedule {
        LrSchedule {
            base: self.adam.lr,
            warmup: self.warmup_steps,
            final_ratio: self.final_lr_ratio,
            total: self.steps,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            steps: self.steps,
            schedule: self.schedule(),
            lr: self.lr(),
            clip_norm: self.clip_norm,
        }
    }
}

/// Warmup then cosine decay.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: usize,
    pub final_ratio: f64,
    pub total: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base: lr,
            warmup: 0,
            final_ratio: 1.0,
            total: 1,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.base * (self.final_ratio + (1.0 - self.final_ratio) * cos)
    }
}

/// Everything [`run_loop`] needs besides the step function.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    pub steps: usize,
    pub schedule: Schedule,
    pub lr: LrSchedule,
    pub clip_norm: f64,
}

/// Runs `steps` optimizer steps. `step_fn` builds one step's graph and
/// returns gradients and metrics; the store is only updated when the loss
/// and every gradient are finite, so on a numeric error it still holds the
/// last good weights.
pub fn run_loop<F>(
    store: &mut ParamStore<f32>,
    opt: &mut OptimState,
    lc: &LoopConfig,
    rng: &Rng,
    mut log: Option<&mut dyn Write>,
    mut step_fn: F,
) -> Result<Vec<Metrics>>
where
    F: FnMut(&ParamStore<f32>, &mut Rng, usize) -> Result<(Gradients<f32>, Metrics)>,
{
    let mut history = Vec::with_capacity(lc.steps);
    let mut current_stage = usize::MAX;
    for step in 0..lc.steps {
        let (stage_idx, stage) = lc
            .schedule
            .stage_at(step)
            .ok_or_else(|| Error::Config(format!("schedule ends before step {step}")))?;
        if stage_idx != current_stage {
            let rule = stage.freeze.clone();
            store.freeze_where(|name| rule.is_frozen(name));
            current_stage = stage_idx;
        }
        let mut step_rng = rng.split_index("step", step as u64);
        let (mut grads, mut metrics) = step_fn(store, &mut step_rng, step)?;
        let loss = metrics.get("loss").copied().unwrap_or(0.0);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}: {loss}")));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm diverged at step {step}")));
        }
        if lc.clip_norm > 0.0 && norm > lc.clip_norm {
            grads.scale(lc.clip_norm / norm);
        }
        opt.cfg.lr = lc.lr.at(step);
        adam_step(store, &grads, opt)?;
        metrics.insert("grad_norm".into(), norm);
        metrics.insert("lr".into(), opt.cfg.lr);
        metrics.insert("stage".into(), stage_idx as f64);
        if let Some(w) = log.as_deref_mut() {
            let mut rec = serde_json::Map::new();
            rec.insert("step".into(), step.into());
            for (k, v) in &metrics {
                rec.insert(k.clone(), serde_json::json!(v));
            }
            writeln!(w, "{}", serde_json::Value::Object(rec))?;
        }
        history.push(metrics);
    }
    store.freeze_where(|_| false);
    Ok(history)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(logits: &Tensor<f32>, targets: &[Option<usize>]) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            total += 1;
            if argmax(logits.row(r)) == *t {
                hit += 1;
            }
        }
    }
    (hit, total)
}

fn ratio(hit: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn caption_input(model: &PerceiverVl, item: &CorpusItem) -> TextInput {
    TextInput::from_str(&item.caption, model.cfg.embed.max_text_len, None)
}

/// Graph of one VTM+MLM batch. MLM targets come from matching pairs, and
/// from mismatched ones too when `mlm_on_negatives` is set.
struct PretrainGraph {
    loss: Var,
    vtm_loss: Var,
    mlm_loss: Var,
    vtm_logits: Var,
    vtm_targets: Vec<Option<usize>>,
    mlm_logits: Option<Var>,
    mlm_targets: Vec<Option<usize>>,
}

fn pretrain_graph<T: Scalar>(
    g: &mut Tape<'_, T>,
    model: &PerceiverVl,
    items: &[&CorpusItem],
    pairs: &[VtmPair],
    masked: &[MaskedText],
    active: &[bool],
    cfg: &TrainConfig,
) -> Result<PretrainGraph> {
    let mut vtm_rows = Vec::with_capacity(pairs.len());
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    for (pair, m) in pairs.iter().zip(masked) {
        let v = &items[pair.vision];
        let z = model.encode_pair(g, Some((&v.vision, v.is_video())), Some(&m.input), active)?;
        let vtm = model.decoder.build_vtm_query(g);
        if pair.is_match || cfg.mlm_on_negatives {
            let mlm = model.decoder.build_mlm_query(g, &m.flags)?;
            let q = concat_queries(g, &[vtm, mlm])?;
            let out = model.decode(g, z.z, &q)?;
            vtm_rows.push(model.decoder.head(g, out, &q, TaskTag::Vtm)?);
            mlm_rows.push(model.decoder.head(g, out, &q, TaskTag::Mlm)?);
            mlm_targets.extend_from_slice(&m.targets);
        } else {
            let out = model.decode(g, z.z, &vtm)?;
            vtm_rows.push(model.decoder.head(g, out, &vtm, TaskTag::Vtm)?);
        }
    }
    let vtm_logits = g.concat_rows(&vtm_rows)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.is_match).collect();
    let vtm_loss = loss_vtm(g, vtm_logits, &labels)?;
    let (mlm_logits, mlm_loss) = if mlm_rows.is_empty() {
        let zero = g.leaf(Tensor::scalar(T::zero()));
        (None, zero)
    } else {
        let l = g.concat_rows(&mlm_rows)?;
        (Some(l), loss_mlm(g, l, &mlm_targets)?)
    };
    let a = g.scale(vtm_loss, T::of(cfg.vtm_weight));
    let b = g.scale(mlm_loss, T::of(cfg.mlm_weight));
    let loss = g.add(a, b)?;
    Ok(PretrainGraph {
        loss,
        vtm_loss,
        mlm_loss,
        vtm_logits,
        vtm_targets: labels.iter().map(|&m| Some(usize::from(m))).collect(),
        mlm_logits,
        mlm_targets,
    })
}

fn pretrain_metrics(g: &Tape<'_, f32>, p: &PretrainGraph) -> Metrics {
    let mut m = Metrics::new();
    m.insert("loss".into(), g.value(p.loss).item().as_f64());
    m.insert("loss_vtm".into(), g.value(p.vtm_loss).item().as_f64());
    m.insert("loss_mlm".into(), g.value(p.mlm_loss).item().as_f64());
    let (h, t) = accuracy(g.value(p.vtm_logits), &p.vtm_targets);
    m.insert("acc_vtm".into(), ratio(h, t));
    let (h, t) = p
        .mlm_logits
        .map_or((0, 0), |l| accuracy(g.value(l), &p.mlm_targets));
    m.insert("acc_mlm".into(), ratio(h, t));
    m
}

/// VTM + MLM pretraining over `train` items.
pub fn pretrain(
    model: &PerceiverVl,
    store: &mut ParamStore<f32>,
    train: &[&CorpusItem],
    cfg: &TrainConfig,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    let enc = &model.cfg.encoder;
    let mut opt = OptimState::new(cfg.adam.clone());
    let rng = Rng::new(seed).split("pretrain");
    run_loop(
        store,
        &mut opt,
        &cfg.loop_config(),
        &rng,
        log,
        |store, rng, _| {
            let pairs = make_vtm_batch(train, cfg.batch, cfg.p_negative, rng)?;
            let active = sample_layerdrop_mask(enc.k, enc.p_ld, rng, DepthMode::Train)?;
            let masked: Vec<MaskedText> = pairs
                .iter()
                .map(|p| mask_tokens(&caption_input(model, train[p.text]), &cfg.mask, rng))
                .collect();
            let mut g = Tape::with_params(store);
            let graph = pretrain_graph(&mut g, model, train, &pairs, &masked, &active, cfg)?;
            let grads = g.backward(graph.loss)?;
            let mut metrics = pretrain_metrics(&g, &graph);
            metrics.insert(
                "active_cross".into(),
                active.iter().filter(|&&a| a).count() as f64,
            );
            Ok((grads, metrics))
        },
    )
}

/// Checks reverse-mode gradients of the full VTM+MLM loss against central
/// differences, in f64 with every cross-attention active.
pub fn pretrain_grad_check(
    cfg: &ModelConfig,
    items: &[&CorpusItem],
    batch: usize,
    seed: u64,
    sample: Sample,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (model, store) = PerceiverVl::init::<f64>(cfg, seed)?;
    let mut rng = Rng::new(seed).split("grad-check");
    let tc = TrainConfig {
        mlm_on_negatives: true,
        ..TrainConfig::default()
    };
    let pairs = make_vtm_batch(items, batch, 0.5, &mut rng)?;
    let masked: Vec<MaskedText> = pairs
        .iter()
        .map(|p| mask_tokens(&caption_input(&model, items[p.text]), &tc.mask, &mut rng))
        .collect();
    let active = model.full_depth();
    grad_check(
        &store,
        |g| Ok(pretrain_graph(g, &model, items, &pairs, &masked, &active, &tc)?.loss),
        sample,
        h,
        tol,
    )
}

/// Held-out VTM accuracy (each item with its own visual and one negative)
/// and masked-token accuracy on the matching pairs.
pub fn evaluate_pretrain(
    model: &PerceiverVl,
    store: &ParamStore<f32>,
    items: &[&CorpusItem],
    mask: &MaskSpec,
    active: &[bool],
    seed: u64,
) -> Result<Metrics> {
    let mut rng = Rng::new(seed).split("evaluate");
    let mut vtm = (0, 0);
    let mut mlm = (0, 0);
    let (mut vtm_loss, mut mlm_loss) = (0.0, 0.0);
    for i in 0..items.len() {
        let neg = draw_negative(items, i, &mut rng);
        let text = caption_input(model, items[i]);
        let clean = MaskedText {
            input: text.clone(),
            flags: vec![false; text.len()],
            targets: vec![None; text.len()],
        };
        let pairs = [
            VtmPair { text: i, vision: i, is_match: true },
            VtmPair { text: i, vision: neg, is_match: false },
        ];
        let mut g = Tape::with_params(store);
        let graph = pretrain_graph(&mut g, model, items, &pairs, &[clean.clone(), clean], active, &TrainConfig::default())?;
        let (h, t) = accuracy(g.value(graph.vtm_logits), &graph.vtm_targets);
        vtm = (vtm.0 + h, vtm.1 + t);
        vtm_loss += g.value(graph.vtm_loss).item().as_f64();

        let masked = mask_tokens(&text, mask, &mut rng);
        if masked.flags.iter().any(|&f| f) {
            let mut g = Tape::with_params(store);
            let pair = [VtmPair { text: i, vision: i, is_match: true }];
            let graph = pretrain_graph(&mut g, model, items, &pair, &[masked], active, &TrainConfig::default())?;
            if let Some(l) = graph.mlm_logits {
                let (h, t) = accuracy(g.value(l), &graph.mlm_targets);
                mlm = (mlm.0 + h, mlm.1 + t);
                mlm_loss += g.value(graph.mlm_loss).item().as_f64() * t as f64;
            }
        }
    }
    let mut m = Metrics::new();
    m.insert("acc_vtm".into(), ratio(vtm.0, vtm.1));
    m.insert("acc_mlm".into(), ratio(mlm.0, mlm.1));
    m.insert("loss_vtm".into(), vtm_loss / items.len().max(1) as f64);
    m.insert("loss_mlm".into(), if mlm.1 > 0 { mlm_loss / mlm.1 as f64 } else { 0.0 });
    m.insert("masked_tokens".into(), mlm.1 as f64);
    Ok(m)
}

/// Draws `batch` items with pairwise distinct captions (as far as the pool allows).
pub fn distinct_batch(items: &[&CorpusItem], batch: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(batch);
    let mut tries = 0;
    while out.len() < batch.min(items.len()) && tries < batch * 64 {
        tries += 1;
        let i = rng.below(items.len());
        if out.iter().all(|&j| items[j].caption != items[i].caption) {
            out.push(i);
        }
    }
    out
}

/// One retrieval finetuning step for `mode`.
///
/// Multi: symmetric contrastive loss over pooled in-batch similarities.
/// Single and mixed: binary VTM loss on each text's own visual and
/// `negatives` other in-batch visuals.
pub fn retrieval_graph(
    g: &mut Tape<'_, f32>,
    model: &PerceiverVl,
    items: &[&CorpusItem],
    batch: &[usize],
    mode: StreamMode,
    negatives: usize,
    active: &[bool],
    rng: &mut Rng,
) -> Result<(Var, Metrics)> {
    let texts: Vec<TextInput> = batch.iter().map(|&i| caption_input(model, items[i])).collect();
    let b = batch.len();
    let mut metrics = Metrics::new();
    let neg_of = |i: usize, rng: &mut Rng| -> Vec<usize> {
        let k = negatives.min(b.saturating_sub(1));
        let mut others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        rng.shuffle(&mut others);
        others.truncate(k);
        others
    };
    match mode {
        StreamMode::Multi => {
            let mut pv = Vec::with_capacity(b);
            let mut pt = Vec::with_capacity(b);
            for (&i, t) in batch.iter().zip(&texts) {
                let it = items[i];
                let zv = model.encode_modality(g, Single::Vision(&it.vision, it.is_video()), active)?;
                pv.push(model.pool(g, zv.z)?);
                let zt = model.encode_modality(g, Single::Text(t), active)?;
                pt.push(model.pool(g, zt.z)?);
            }
            let pv = g.concat_rows(&pv)?;
            let pt = g.concat_rows(&pt)?;
            let sim = g.matmul_nt(pt, pv)?;
            let sim = g.scale(sim, (1.0 / model.cfg.temperature) as f32);
            let loss = loss_contrastive(g, sim)?;
            let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
            let (h, t) = accuracy(g.value(sim), &diag);
            metrics.insert("acc_ret".into(), ratio(h, t));
            metrics.insert("loss".into(), g.value(loss).item().as_f64());
            Ok((loss, metrics))
        }
        StreamMode::Mixed | StreamMode::Single => {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            let latents = if mode == StreamMode::Mixed {
                let mut zv = Vec::with_capacity(b);
                let mut zt = Vec::with_capacity(b);
                for (&i, t) in batch.iter().zip(&texts) {
                    let it = items[i];
                    zv.push(model.encode_modality(g, Single::Vision(&it.vision, it.is_video()), active)?.z);
                    zt.push(model.encode_modality(g, Single::Text(t), active)?.z);
                }
                Some((zv, zt))
            } else {
                None
            };
            for ti in 0..b {
                let mut visuals = vec![(ti, true)];
                visuals.extend(neg_of(ti, rng).into_iter().map(|j| (j, false)));
                for (vi, is_match) in visuals {
                    let z = match &latents {
                        Some((zv, zt)) => model.mixed_latents(g, zv[vi], zt[ti])?,
                        None => {
                            let it = items[batch[vi]];
                            model
                                .encode_pair(g, Some((&it.vision, it.is_video())), Some(&texts[ti]), active)?
                                .z
                        }
                    };
                    rows.push(model.vtm_logits(g, z)?);
                    labels.push(is_match);
                }
            }
            let logits = g.concat_rows(&rows)?;
            let loss = loss_vtm(g, logits, &labels)?;
            let targets: Vec<Option<usize>> = labels.iter().map(|&m| Some(usize::from(m))).collect();
            let (h, t) = accuracy(g.value(logits), &targets);
            metrics.insert("acc_vtm".into(), ratio(h, t));
            metrics.insert("loss".into(), g.value(loss).item().as_f64());
            Ok((loss, metrics))
        }
    }
}

/// Retrieval finetuning for one stream mode.
pub fn finetune_retrieval(
    model: &PerceiverVl,
    store: &mut ParamStore<f32>,
    train: &[&CorpusItem],
    mode: StreamMode,
    cfg: &TrainConfig,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    let enc = &model.cfg.encoder;
    let mut opt = OptimState::new(cfg.adam.clone());
    let rng = Rng::new(seed).split("finetune-retrieval");
    run_loop(
        store,
        &mut opt,
        &cfg.loop_config(),
        &rng,
        log,
        |store, rng, _| {
            let batch = distinct_batch(train, cfg.batch, rng);
            let active = sample_layerdrop_mask(enc.k, enc.p_ld, rng, DepthMode::Train)?;
            let mut g = Tape::with_params(store);
            let (loss, metrics) =
                retrieval_graph(&mut g, model, train, &batch, mode, cfg.negatives, &active, rng)?;
            Ok((g.backward(loss)?, metrics))
        },
    )
}

/// QA examples: (item index, question, answer index).
pub fn qa_examples(items: &[&CorpusItem]) -> Vec<(usize, String, usize)> {
    let mut out = Vec::new();
    for (i, it) in items.iter().enumerate() {
        for qa in &it.qa {
            if let Some(a) = answer_index(&qa.answer) {
                out.push((i, qa.question.clone(), a));
            }
        }
    }
    out
}

fn qa_logits(
    g: &mut Tape<'_, f32>,
    model: &PerceiverVl,
    item: &CorpusItem,
    question: &str,
    active: &[bool],
) -> Result<Var> {
    let q = TextInput::from_str(question, model.cfg.embed.max_text_len, None);
    let z = model.encode_pair(g, Some((&item.vision, item.is_video())), Some(&q), active)?;
    let query = model.decoder.build_qa_query(g);
    let out = model.decode(g, z.z, &query)?;
    model.decoder.head(g, out, &query, TaskTag::Qa)
}

/// QA finetuning: a CLS query over the joint encoding of image and question.
pub fn finetune_qa(
    model: &PerceiverVl,
    store: &mut ParamStore<f32>,
    train: &[&CorpusItem],
    cfg: &TrainConfig,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<Vec<Metrics>> {
    cfg.validate()?;
    let examples = qa_examples(train);
    if examples.is_empty() {
        return Err(Error::Contract("no QA examples in the training split".into()));
    }
    let enc = &model.cfg.encoder;
    let mut opt = OptimState::new(cfg.adam.clone());
    let rng = Rng::new(seed).split("finetune-qa");
    run_loop(
        store,
        &mut opt,
        &cfg.loop_config(),
        &rng,
        log,
        |store, rng, _| {
            let active = sample_layerdrop_mask(enc.k, enc.p_ld, rng, DepthMode::Train)?;
            let mut g = Tape::with_params(store);
            let mut rows = Vec::with_capacity(cfg.batch);
            let mut targets = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let (i, q, a) = &examples[rng.below(examples.len())];
                rows.push(qa_logits(&mut g, model, train[*i], q, &active)?);
                targets.push(Some(*a));
            }
            let logits = g.concat_rows(&rows)?;
            let loss = g.cross_entropy(logits, &targets)?;
            let mut m = Metrics::new();
            m.insert("loss".into(), g.value(loss).item().as_f64());
            let (h, t) = accuracy(g.value(logits), &targets);
            m.insert("acc_qa".into(), ratio(h, t));
            Ok((g.backward(loss)?, m))
        },
    )
}

/// QA accuracy over every question of `items`.
pub fn evaluate_qa(
    model: &PerceiverVl,
    store: &ParamStore<f32>,
    items: &[&CorpusItem],
    active: &[bool],
) -> Result<Metrics> {
    let examples = qa_examples(items);
    let mut hit = 0;
    for (i, q, a) in &examples {
        let mut g = Tape::with_params(store);
        let l = qa_logits(&mut g, model, items[*i], q, active)?;
        if argmax(g.value(l).row(0)) == *a {
            hit += 1;
        }
    }
    let mut m = Metrics::new();
    m.insert("acc_qa".into(), ratio(hit, examples.len()));
    m.insert("questions".into(), examples.len() as f64);
    Ok(m)
}
