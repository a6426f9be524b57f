use std::f64::consts::PI;

use super::config::{EncoderConfig, LatentPos};
use crate::embedding::init_normal;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub enum LatentPosition {
    Learned(ParamId),
    /// Fixed sin/cos features (N × (1+2B)) mapped to d by a learned projection.
    Fourier { features: Tensor<f64>, proj: ParamId },
}

/// Learned latent base plus an additive positional term.
#[derive(Clone, Debug)]
pub struct LatentArray {
    pub n: usize,
    pub d: usize,
    pub base: ParamId,
    pub pos: LatentPosition,
}

/// Raw Fourier features for `n` latent indices and `bands` frequencies.
///
/// Index `i` maps to `x = 2i/(n-1) - 1` (0 when `n == 1`); the row is
/// `[x, sin(π f_1 x) .. sin(π f_B x), cos(π f_1 x) .. cos(π f_B x)]` with
/// `f_j` log-spaced over `[1, n/2]`.
pub fn fourier_features(n: usize, bands: usize) -> Result<Tensor<f64>> {
    if bands == 0 {
        return Err(Error::Parameter("fourier bands must be at least 1".into()));
    }
    let freqs = log_spaced(1.0, n as f64 / 2.0, bands);
    let width = 1 + 2 * bands;
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        let x = if n == 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        };
        data.push(x);
        data.extend(freqs.iter().map(|f| (PI * f * x).sin()));
        data.extend(freqs.iter().map(|f| (PI * f * x).cos()));
    }
    Tensor::new(&[n, width], data)
}

fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|j| (a + (b - a) * j as f64 / (count - 1) as f64).exp())
        .collect()
}

impl LatentArray {
    /// Base entries ~ N(0, 0.02²) truncated at ±2σ; learned positions likewise.
    pub fn init<T: Scalar>(
        cfg: &EncoderConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (n, d) = (cfg.n_latents, cfg.d);
        let base = store.register(&format!("{prefix}.base"), init_normal(rng, &[n, d], 0.02), true)?;
        let pos = match cfg.latent_pos {
            LatentPos::Learned => LatentPosition::Learned(store.register(
                &format!("{prefix}.pos"),
                init_normal(rng, &[n, d], 0.02),
                true,
            )?),
            LatentPos::Fourier => {
                let features = fourier_features(n, cfg.fourier_bands)?;
                let width = features.cols();
                let proj = store.register(
                    &format!("{prefix}.fourier_proj"),
                    init_normal(rng, &[width, d], 0.02),
                    true,
                )?;
                LatentPosition::Fourier { features, proj }
            }
        };
        Ok(Self { n, d, base, pos })
    }

    /// Positional term alone (N × d).
    pub fn positions<T: Scalar>(&self, g: &mut Tape<'_, T>) -> Result<Var> {
        match &self.pos {
            LatentPosition::Learned(id) => Ok(g.param(*id)),
            LatentPosition::Fourier { features, proj } => {
                let f = g.leaf(features.cast());
                let p = g.param(*proj);
                g.matmul(f, p)
            }
        }
    }

    /// Effective latent `z = base + pos`.
    pub fn latent<T: Scalar>(&self, g: &mut Tape<'_, T>) -> Result<Var> {
        let base = g.param(self.base);
        let pos = self.positions(g)?;
        g.add(base, pos)
    }

    /// Multiply-adds spent building the positional term.
    pub fn macs(&self) -> u64 {
        match &self.pos {
            LatentPosition::Learned(_) => 0,
            LatentPosition::Fourier { features, .. } => (self.n * features.cols() * self.d) as u64,
        }
    }
}
