use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TsdaeError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub deletion_ratio: f64,
    pub rng_seed: u64,
}

impl NoiseSpec {
    pub fn new(deletion_ratio: f64, rng_seed: u64) -> Result<Self, TsdaeError> {
        if !(0.0..1.0).contains(&deletion_ratio) {
            return Err(TsdaeError::Config(format!("deletion ratio {deletion_ratio} outside [0, 1)")));
        }
        Ok(NoiseSpec { deletion_ratio, rng_seed })
    }
}

/// Number of tokens removed from a sequence of `n`: `floor(ratio * n)`,
/// capped so one token survives.
pub fn deletion_count(n: usize, ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((ratio * n as f64).floor() as usize).min(n - 1)
}

/// Deletes tokens using a generator seeded from `spec.rng_seed`.
pub fn apply_deletion_noise<T: Clone>(tokens: &[T], spec: &NoiseSpec) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    delete_tokens(tokens, spec.deletion_ratio, &mut rng)
}

/// Removes exactly [`deletion_count`] tokens, chosen uniformly without
/// replacement by `rand::seq::index::sample`. Survivors keep their order.
pub fn delete_tokens<T: Clone>(tokens: &[T], ratio: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let n = tokens.len();
    let k = deletion_count(n, ratio);
    if k == 0 {
        return tokens.to_vec();
    }
    let mut removed = vec![false; n];
    for i in index::sample(rng, n, k) {
        removed[i] = true;
    }
    tokens.iter().zip(removed).filter(|(_, gone)| !gone).map(|(t, _)| t.clone()).collect()
}
