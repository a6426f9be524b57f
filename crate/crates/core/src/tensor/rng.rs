use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Splittable deterministic random stream.
///
/// Each stream is a ChaCha8 counter-mode generator keyed by a 32-byte key.
/// Child streams derive their key from the parent key and a label, so the
/// values a child produces do not depend on how much the parent was used.
#[derive(Clone, Debug)]
pub struct Rng {
    key: [u8; 32],
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::from_key(derive(&[0u8; 32], &seed.to_le_bytes()))
    }

    fn from_key(key: [u8; 32]) -> Self {
        Self {
            key,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Named child stream.
    pub fn split(&self, name: &str) -> Self {
        Self::from_key(derive(&self.key, name.as_bytes()))
    }

    /// Indexed child stream, e.g. one per step or batch item.
    pub fn split_index(&self, name: &str, index: u64) -> Self {
        let mut label = name.as_bytes().to_vec();
        label.push(0);
        label.extend_from_slice(&index.to_le_bytes());
        Self::from_key(derive(&self.key, &label))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn range(&mut self, lo: i64, hi_inclusive: i64) -> i64 {
        self.inner.gen_range(lo..=hi_inclusive)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal with standard deviation `std`, redrawn until within `±2·std`.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn derive(key: &[u8; 32], label: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(key);
    h.update(label);
    h.finalize().into()
}
