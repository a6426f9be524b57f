use super::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which scalar parameter entries a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Sample {
    All,
    /// Each entry independently with probability `fraction`, at least one per run.
    Fraction { fraction: f64, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Max relative error per parameter name.
    pub fn per_param(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(n, _)| *n == e.param) {
                Some((_, m)) => *m = m.max(e.rel_error),
                None => out.push((e.param.clone(), e.rel_error)),
            }
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` must build a scalar loss deterministically from the parameters on the
/// tape it is given; a function whose value changes between two identical
/// evaluations is rejected.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    f: F,
    sample: Sample,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::with_params(store);
    let loss = f(&mut tape)?;
    let base = tape.value(loss).item();
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "gradient check needs a deterministic function (disable dropout)".into(),
        ));
    }
    let grads = tape.backward(loss)?;

    let mut rng = match sample {
        Sample::Fraction { seed, .. } => Some(Rng::new(seed)),
        Sample::All => None,
    };
    let mut picks: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        for i in 0..store.tensor(id).numel() {
            let take = match (&sample, rng.as_mut()) {
                (Sample::Fraction { fraction, .. }, Some(r)) => r.bernoulli(*fraction),
                _ => true,
            };
            if take {
                picks.push((id, i));
            }
        }
    }
    if picks.is_empty() {
        if let Some(id) = store.ids().find(|id| store.tensor(*id).numel() > 0) {
            picks.push((id, 0));
        }
    }

    let mut work = store.clone();
    let mut entries = Vec::with_capacity(picks.len());
    for (id, i) in picks {
        let original = store.tensor(id).clone();
        let bump = |delta: f64| -> Tensor<f64> {
            let mut d = original.to_vec();
            d[i] += delta;
            Tensor::new(original.shape(), d).expect("shape preserved")
        };
        work.set(id, bump(h))?;
        let plus = eval(&work)?;
        work.set(id, bump(-h))?;
        let minus = eval(&work)?;
        work.set(id, original.clone())?;

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        entries.push(EntryCheck {
            param: store.name(id).to_string(),
            index: i,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < tol,
        entries,
        max_rel_error,
        tol,
    })
}
