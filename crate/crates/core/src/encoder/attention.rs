use crate::embedding::init_normal;
use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(Self {
            w: store.register(&format!("{name}.w"), init_normal(rng, &[d_in, d_out], std), true)?,
            b: Some(store.register(&format!("{name}.b"), Tensor::zeros(&[d_out]), false)?),
        })
    }

    /// Weight only. Used for attention keys, where a bias shifts every
    /// score of a query equally and cancels in the softmax.
    pub fn no_bias<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(Self {
            w: store.register(&format!("{name}.w"), init_normal(rng, &[d_in, d_out], std), true)?,
            b: None,
        })
    }

    /// Zero-initialised map (used for heads whose initial output should be neutral).
    pub fn zeros<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: store.register(&format!("{name}.w"), Tensor::zeros(&[d_in, d_out]), true)?,
            b: Some(store.register(&format!("{name}.b"), Tensor::zeros(&[d_out]), false)?),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let h = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(h, b)
            }
            None => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(&format!("{name}.gamma"), Tensor::full(&[d], T::one()), false)?,
            beta: store.register(&format!("{name}.beta"), Tensor::zeros(&[d]), false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-LN multi-head attention followed by a residual MLP.
///
/// Queries come from the first argument; keys and values from the second
/// (cross-attention) or from the same rows (self-attention).
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub heads: usize,
    pub ln_q: LayerNorm,
    /// Separate norm for the key/value rows; `None` for self-attention.
    pub ln_kv: Option<LayerNorm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AttentionLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        cross: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let hidden = d * mlp_ratio;
        Ok(Self {
            heads,
            ln_q: LayerNorm::init(store, &format!("{name}.ln_q"), d)?,
            ln_kv: if cross {
                Some(LayerNorm::init(store, &format!("{name}.ln_kv"), d)?)
            } else {
                None
            },
            q: Linear::init(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::no_bias(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::init(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::init(store, &format!("{name}.o"), d, d, rng)?,
            ln_mlp: LayerNorm::init(store, &format!("{name}.ln_mlp"), d)?,
            fc1: Linear::init(store, &format!("{name}.fc1"), d, hidden, rng)?,
            fc2: Linear::init(store, &format!("{name}.fc2"), hidden, d, rng)?,
        })
    }

    /// Cross-attention from `queries` (N×d) to `inputs` (M×d).
    /// `key_mask[j] == false` removes input row `j` from every softmax.
    pub fn cross<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        queries: Var,
        inputs: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let xq = self.ln_q.forward(g, queries)?;
        let xkv = match &self.ln_kv {
            Some(ln) => ln.forward(g, inputs)?,
            None => self.ln_q.forward(g, inputs)?,
        };
        let attn = self.attend(g, xq, xkv, key_mask)?;
        let h = g.add(queries, attn)?;
        self.mlp(g, h)
    }

    /// Self-attention over `x` (N×d).
    pub fn self_attend<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let xn = self.ln_q.forward(g, x)?;
        let attn = self.attend(g, xn, xn, key_mask)?;
        let h = g.add(x, attn)?;
        self.mlp(g, h)
    }

    fn attend<T: Scalar>(
        &self,
        g: &mut Tape<'_, T>,
        xq: Var,
        xkv: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let d = g.cols(q);
        let dh = d / self.heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows_masked(scores, key_mask)?;
            heads.push(g.matmul(p, vh)?);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.o.forward(g, ctx)
    }

    fn mlp<T: Scalar>(&self, g: &mut Tape<'_, T>, h: Var) -> Result<Var> {
        let x = self.ln_mlp.forward(g, h)?;
        let x = self.fc1.forward(g, x)?;
        let x = g.gelu(x);
        let x = self.fc2.forward(g, x)?;
        g.add(h, x)
    }
}
