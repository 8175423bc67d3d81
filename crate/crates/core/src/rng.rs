//! Counter-based Brownian increments.
//!
//! A [`NoiseStream`] is keyed by `(seed, path)`; the standard normal used for
//! `(step, coordinate)` is read from a fixed ChaCha8 word position, so it does
//! not depend on evaluation order or on how paths are spread over workers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Source of Brownian increments for a rollout.
pub trait NoiseSource {
    /// Fill `out` (length `q`) with the increment over step `step` of size `dt`.
    fn fill(&mut self, step: usize, dt: f64, out: &mut [f64]);
}

/// Mix several integers into one 64-bit stream key (SplitMix64 finalizer).
pub fn mix_keys(keys: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &k in keys {
        h ^= k
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    seed: u64,
    path: u64,
    dim: usize,
    sign: f64,
}

/// Words consumed per standard normal (two `u64` for one Box-Muller draw).
const WORDS_PER_NORMAL: u128 = 4;

impl NoiseStream {
    pub fn new(seed: u64, path: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        NoiseStream {
            rng,
            seed,
            path,
            dim,
            sign: 1.0,
        }
    }

    /// The same stream with every increment negated.
    pub fn antithetic(mut self) -> Self {
        self.sign = -self.sign;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> u64 {
        self.path
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_antithetic(&self) -> bool {
        self.sign < 0.0
    }

    /// Standard normals for one step, with the antithetic sign applied.
    pub fn standard_normals(&mut self, step: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        self.rng
            .set_word_pos(step as u128 * self.dim as u128 * WORDS_PER_NORMAL);
        for o in out.iter_mut() {
            let a = self.rng.next_u64();
            let b = self.rng.next_u64();
            // (0, 1] and [0, 1) from the top 53 bits
            let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
            let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            *o = self.sign * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

impl NoiseSource for NoiseStream {
    fn fill(&mut self, step: usize, dt: f64, out: &mut [f64]) {
        self.standard_normals(step, out);
        let scale = dt.sqrt();
        for o in out.iter_mut() {
            *o *= scale;
        }
    }
}

/// Coarse increments assembled from a finer Brownian path: step `k` of size
/// `dt` sums fine steps `k*factor .. (k+1)*factor`, each of size `dt / factor`.
#[derive(Clone, Debug)]
pub struct RefinedNoise {
    fine: NoiseStream,
    factor: usize,
    offset: usize,
    buf: Vec<f64>,
}

impl RefinedNoise {
    pub fn new(fine: NoiseStream, factor: usize) -> Self {
        Self::with_offset(fine, factor, 0)
    }

    /// Start reading the fine path at fine step `offset`.
    pub fn with_offset(fine: NoiseStream, factor: usize, offset: usize) -> Self {
        assert!(factor >= 1);
        let dim = fine.dim();
        RefinedNoise {
            fine,
            factor,
            offset,
            buf: vec![0.0; dim],
        }
    }
}

impl NoiseSource for RefinedNoise {
    fn fill(&mut self, step: usize, dt: f64, out: &mut [f64]) {
        out.fill(0.0);
        let fine_dt = dt / self.factor as f64;
        for i in 0..self.factor {
            self.fine
                .fill(self.offset + step * self.factor + i, fine_dt, &mut self.buf);
            for (o, b) in out.iter_mut().zip(&self.buf) {
                *o += b;
            }
        }
    }
}

/// Pre-recorded increments, `steps x q` row-major.
#[derive(Clone, Debug)]
pub struct RecordedNoise {
    pub increments: Vec<f64>,
    pub dim: usize,
}

impl NoiseSource for RecordedNoise {
    fn fill(&mut self, step: usize, _dt: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.increments[step * self.dim..(step + 1) * self.dim]);
    }
}

/// No noise at all.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill(&mut self, _step: usize, _dt: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn access_order_does_not_matter() {
        let mut a = NoiseStream::new(42, 3, 2);
        let mut b = NoiseStream::new(42, 3, 2);
        let mut fwd = [[0.0; 2]; 5];
        for (k, v) in fwd.iter_mut().enumerate() {
            a.standard_normals(k, v);
        }
        for k in (0..5).rev() {
            let mut v = [0.0; 2];
            b.standard_normals(k, &mut v);
            assert_eq!(v, fwd[k]);
        }
    }

    #[test]
    fn paths_and_seeds_differ() {
        let draw = |seed, path| {
            let mut v = [0.0; 3];
            NoiseStream::new(seed, path, 3).standard_normals(0, &mut v);
            v
        };
        assert_ne!(draw(1, 0), draw(1, 1));
        assert_ne!(draw(1, 0), draw(2, 0));
    }

    #[test]
    fn antithetic_negates() {
        let mut a = NoiseStream::new(5, 9, 4);
        let mut b = NoiseStream::new(5, 9, 4).antithetic();
        let (mut x, mut y) = ([0.0; 4], [0.0; 4]);
        a.fill(7, 0.01, &mut x);
        b.fill(7, 0.01, &mut y);
        for (p, q) in x.iter().zip(&y) {
            assert_eq!(*p, -*q);
        }
    }

    #[test]
    fn moments_are_standard() {
        let mut s = NoiseStream::new(123, 0, 1);
        let n = 200_000;
        let mut v = [0.0];
        let (mut m1, mut m2) = (0.0, 0.0);
        for k in 0..n {
            s.standard_normals(k, &mut v);
            m1 += v[0];
            m2 += v[0] * v[0];
        }
        let mean = m1 / n as f64;
        let var = m2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn refined_noise_sums_fine_increments() {
        let fine = NoiseStream::new(8, 1, 2);
        let mut coarse = RefinedNoise::new(fine.clone(), 4);
        let mut out = [0.0; 2];
        coarse.fill(1, 0.4, &mut out);
        let mut f = fine;
        let mut expect = [0.0; 2];
        let mut buf = [0.0; 2];
        for i in 4..8 {
            f.fill(i, 0.1, &mut buf);
            expect[0] += buf[0];
            expect[1] += buf[1];
        }
        assert_eq!(out, expect);
    }
}
