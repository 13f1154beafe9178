//! Seeded random streams. Every stochastic estimate is a pure function of
//! `(seed, stream indices)`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{Matrix, Vector};
#[allow(unused_imports)]
use num_traits::Float;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and an index.
pub fn mix(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Independent generator for `(seed, index)`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vector {
    DVector::from_fn(dim, |_, _| standard_normal(rng))
}

/// Unit Rayleigh draw by inverse CDF, `√(−2 ln u)`.
pub fn unit_rayleigh<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u in (0, 1]
    let u: f64 = 1.0 - rng.random::<f64>();
    (-2.0 * u.ln()).sqrt()
}

/// `mean + Cᵀ z` for upper-triangular `C`, i.e. a draw from `N(mean, CᵀC)`.
pub fn gaussian_draw<R: Rng + ?Sized>(rng: &mut R, mean: &Vector, chol_upper: &Matrix) -> Vector {
    let z = normal_vector(rng, mean.len());
    mean + chol_upper.tr_mul(&z)
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> alloc::vec::Vec<usize> {
    let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// `k` distinct indices from `0..n`, uniformly without replacement.
pub fn sample_without_replacement<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> alloc::vec::Vec<usize> {
    let mut idx = permutation(rng, n);
    idx.truncate(k.min(n));
    idx
}

/// Minibatches drawn without replacement within each pass over `0..n`.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch: usize,
    order: alloc::vec::Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: StreamRng,
}

impl EpochSampler {
    /// `batch` is clamped to `1..=n`.
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = stream(seed, 0xba7c);
        let order = permutation(&mut rng, n);
        EpochSampler { n, batch: batch.clamp(1, n.max(1)), order, pos: 0, epoch: 0, rng }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next minibatch; the final batch of a pass may be short.
    pub fn next_batch(&mut self) -> alloc::vec::Vec<usize> {
        if self.n == 0 {
            return alloc::vec::Vec::new();
        }
        if self.pos >= self.n {
            self.order = permutation(&mut self.rng, self.n);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        if self.pos >= self.n {
            self.epoch += 1;
        }
        out
    }
}
