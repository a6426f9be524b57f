//! Query decoder: one cross-attention from a task query array to the latent
//! encoding, followed by linear task heads.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::embedding::init_normal;
use crate::encoder::{AttentionLayer, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskTag {
    Vtm,
    Mlm,
    Qa,
    RetCls,
}

/// Decoder query rows (Q × d) and the task owning each row range.
#[derive(Clone, Debug)]
pub struct QuerySpec {
    pub rows: Var,
    pub segments: Vec<(TaskTag, Range<usize>)>,
}

impl QuerySpec {
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, task: TaskTag) -> Option<Range<usize>> {
        self.segments
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, r)| r.clone())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub d: usize,
    pub layer: AttentionLayer,
    pub vtm_cls: ParamId,
    pub qa_cls: ParamId,
    pub ret_cls: ParamId,
    /// Row 0 for unmasked positions, row 1 for masked ones.
    pub mask_emb: ParamId,
    /// Positional table shared with the text embedding.
    pub token_pos: ParamId,
    pub vtm_head: Linear,
    pub mlm_head: Linear,
    pub qa_head: Linear,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        vocab_size: usize,
        num_answers: usize,
        token_pos: ParamId,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layer = AttentionLayer::init(store, "decoder.cross", d, heads, mlp_ratio, true, rng)?;
        let mut cls = |name: &str, rows: usize, rng: &mut Rng| {
            store.register(&format!("decoder.{name}"), init_normal(rng, &[rows, d], 0.02), true)
        };
        let vtm_cls = cls("vtm_cls", 1, rng)?;
        let qa_cls = cls("qa_cls", 1, rng)?;
        let ret_cls = cls("ret_cls", 1, rng)?;
        let mask_emb = cls("mask_emb", 2, rng)?;
        Ok(Self {
            d,
            layer,
            vtm_cls,
            qa_cls,
            ret_cls,
            mask_emb,
            token_pos,
            vtm_head: Linear::init(store, "decoder.vtm_head", d, 2, rng)?,
            mlm_head: Linear::init(store, "decoder.mlm_head", d, vocab_size, rng)?,
            qa_head: Linear::init(store, "decoder.qa_head", d, num_answers.max(1), rng)?,
        })
    }

    fn single<T: Scalar>(g: &mut Tape<'_, T>, id: ParamId, tag: TaskTag) -> QuerySpec {
        QuerySpec {
            rows: g.param(id),
            segments: vec![(tag, 0..1)],
        }
    }

    pub fn build_vtm_query<T: Scalar>(&self, g: &mut Tape<'_, T>) -> QuerySpec {
        Self::single(g, self.vtm_cls, TaskTag::Vtm)
    }

    pub fn build_qa_query<T: Scalar>(&self, g: &mut Tape<'_, T>) -> QuerySpec {
        Self::single(g, self.qa_cls, TaskTag::Qa)
    }

    pub fn build_ret_query<T: Scalar>(&self, g: &mut Tape<'_, T>) -> QuerySpec {
        Self::single(g, self.ret_cls, TaskTag::RetCls)
    }

    /// Row `i` is `token_pos[i] + mask_emb[flag_i]`; token identities never enter.
    pub fn build_mlm_query<T: Scalar>(&self, g: &mut Tape<'_, T>, flags: &[bool]) -> Result<QuerySpec> {
        if flags.is_empty() {
            return Err(Error::Contract("MLM query needs at least one position".into()));
        }
        let n = flags.len();
        let pos_table = g.param(self.token_pos);
        let pos = g.gather_rows(pos_table, &(0..n).collect::<Vec<_>>())?;
        let mask_table = g.param(self.mask_emb);
        let ids: Vec<usize> = flags.iter().map(|&f| usize::from(f)).collect();
        let mask = g.gather_rows(mask_table, &ids)?;
        Ok(QuerySpec {
            rows: g.add(pos, mask)?,
            segments: vec![(TaskTag::Mlm, 0..n)],
        })
    }

    /// One cross-attention from the query rows to `z` (N × d); returns Q × d.
    pub fn decode<T: Scalar>(&self, g: &mut Tape<'_, T>, z: Var, q: &QuerySpec) -> Result<Var> {
        self.layer.cross(g, q.rows, z, None)
    }

    /// Applies the head for `task` to that task's segment of `decoded`.
    pub fn head<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        decoded: Var,
        q: &QuerySpec,
        task: TaskTag,
    ) -> Result<Var> {
        let range = q
            .segment(task)
            .ok_or_else(|| Error::Contract(format!("query has no {task:?} segment")))?;
        if g.rows(decoded) != q.len() {
            return Err(Error::Contract(format!(
                "decoded rows {} do not match query length {}",
                g.rows(decoded),
                q.len()
            )));
        }
        let rows = if range.start == 0 && range.end == q.len() {
            decoded
        } else {
            g.slice_rows(decoded, range.start, range.len())?
        };
        let head = match task {
            TaskTag::Vtm => &self.vtm_head,
            TaskTag::Mlm => &self.mlm_head,
            TaskTag::Qa => &self.qa_head,
            TaskTag::RetCls => return Ok(rows),
        };
        head.forward(g, rows)
    }
}

/// Stacks query arrays in argument order and re-offsets their segments.
pub fn concat_queries<T: Scalar>(g: &mut Tape<'_, T>, specs: &[QuerySpec]) -> Result<QuerySpec> {
    match specs {
        [] => Err(Error::Contract("concat_queries needs at least one spec".into())),
        [one] => Ok(one.clone()),
        _ => {
            let rows: Vec<Var> = specs.iter().map(|s| s.rows).collect();
            let mut segments = Vec::new();
            let mut offset = 0;
            for s in specs {
                for (tag, r) in &s.segments {
                    segments.push((*tag, r.start + offset..r.end + offset));
                }
                offset += s.len();
            }
            Ok(QuerySpec {
                rows: g.concat_rows(&rows)?,
                segments,
            })
        }
    }
}
