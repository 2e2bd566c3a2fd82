use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded pseudo-random stream.
///
/// Backed by ChaCha8 (`rand_chacha`), which produces the same stream on every
/// platform for a given 64-bit seed. Gaussian draws use the ziggurat sampler
/// of `rand_distr::StandardNormal`. Child streams are derived with
/// [`SeededRng::fork`] so that independent consumers never share state.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to decorrelate derived seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `label`. Does not advance `self`.
    pub fn fork(&self, label: u64) -> SeededRng {
        SeededRng::new(mix(self.seed ^ mix(label)))
    }

    /// Seed of the child stream `fork(label)` would produce.
    pub fn derive_seed(seed: u64, label: u64) -> u64 {
        mix(seed ^ mix(label))
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer from `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// `amount` distinct indices from `[0, n)`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        index::sample(&mut self.inner, n, amount).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }

    #[test]
    fn forks_differ_from_parent_and_each_other() {
        let parent = SeededRng::new(7);
        let mut c1 = parent.fork(1);
        let mut c2 = parent.fork(2);
        assert_ne!(c1.uniform(), c2.uniform());
        assert_eq!(parent.fork(1).seed(), SeededRng::derive_seed(7, 1));
    }

    // Frozen prefix of the ChaCha8 stream for seed 2024; guards cross-platform
    // and cross-version stability of every seeded experiment.
    #[test]
    fn stream_prefix_is_frozen() {
        let mut r = SeededRng::new(2024);
        let got: Vec<u64> = (0..3).map(|_| r.uniform().to_bits()).collect();
        let mut again = SeededRng::new(2024);
        let again: Vec<u64> = (0..3).map(|_| again.uniform().to_bits()).collect();
        assert_eq!(got, again);
        assert_eq!(got, FROZEN_PREFIX.to_vec());
    }

    const FROZEN_PREFIX: [u64; 3] = [
        4595185519517776676,
        4607024559313317229,
        4604351605858725884,
    ];
}
