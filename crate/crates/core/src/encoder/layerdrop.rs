use crate::error::{Error, Result};
use crate::tensor::Rng;

/// How the per-block cross-attention mask is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthMode {
    /// Drop each cross-attention after the first with probability `p_ld`.
    Train,
    /// Run every cross-attention.
    Eval,
    /// Run only the first `c` cross-attentions.
    Fixed(usize),
}

/// Samples which of the `k` cross-attentions run. Entry 0 is always `true`.
pub fn sample_layerdrop_mask(k: usize, p_ld: f64, rng: &mut Rng, mode: DepthMode) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    match mode {
        DepthMode::Train => {
            if !(0.0..=1.0).contains(&p_ld) {
                return Err(Error::Parameter(format!("p_ld={p_ld} not in [0,1]")));
            }
            Ok((0..k).map(|i| i == 0 || !rng.bernoulli(p_ld)).collect())
        }
        DepthMode::Eval => Ok(vec![true; k]),
        DepthMode::Fixed(c) => {
            if c < 1 || c > k {
                return Err(Error::Parameter(format!(
                    "fixed depth {c} outside 1..={k}"
                )));
            }
            Ok((0..k).map(|i| i < c).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probability_keeps_everything() {
        let mut rng = Rng::new(0);
        for _ in 0..100 {
            assert_eq!(
                sample_layerdrop_mask(4, 0.0, &mut rng, DepthMode::Train).unwrap(),
                vec![true; 4]
            );
        }
    }

    #[test]
    fn near_one_probability_keeps_only_first() {
        let mut rng = Rng::new(1);
        let p = 1.0 - 1e-12;
        for _ in 0..100 {
            assert_eq!(
                sample_layerdrop_mask(3, p, &mut rng, DepthMode::Train).unwrap(),
                vec![true, false, false]
            );
        }
    }

    #[test]
    fn fixed_depth_bounds() {
        let mut rng = Rng::new(2);
        assert_eq!(
            sample_layerdrop_mask(3, 0.5, &mut rng, DepthMode::Fixed(2)).unwrap(),
            vec![true, true, false]
        );
        assert!(sample_layerdrop_mask(3, 0.5, &mut rng, DepthMode::Fixed(0)).is_err());
        assert!(sample_layerdrop_mask(3, 0.5, &mut rng, DepthMode::Fixed(4)).is_err());
        assert_eq!(
            sample_layerdrop_mask(3, 0.9, &mut rng, DepthMode::Eval).unwrap(),
            vec![true; 3]
        );
    }
}
