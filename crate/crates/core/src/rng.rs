//! Counter-based Gaussian streams.
//!
//! Each path owns a ChaCha8 stream selected by its index; within a path,
//! step `i` always starts at a fixed word offset, so any increment can be
//! regenerated independently of evaluation order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Standard normal variates for one `(seed, path)` pair.
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        GaussianStream { rng, spare: None }
    }

    /// Positions the stream at the start of `step` for `dim` normals per step.
    pub fn seek(&mut self, step: usize, dim: usize) {
        // Two u64 draws (four 32-bit words) per Box-Muller pair.
        let words = 4 * dim.div_ceil(2) as u128;
        self.rng.set_word_pos(words * step as u128);
        self.spare = None;
    }

    /// Fills one step worth of standard normals.
    pub fn fill_step(&mut self, out: &mut [f64]) {
        self.spare = None;
        let mut i = 0;
        while i < out.len() {
            let (a, b) = self.pair();
            out[i] = a;
            if i + 1 < out.len() {
                out[i + 1] = b;
            }
            i += 2;
        }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let (a, b) = self.pair();
        self.spare = Some(b);
        a
    }

    fn pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        (r * theta.cos(), r * theta.sin())
    }
}

/// Brownian increments keyed by `(seed, path, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianIncrements {
    seed: u64,
    dim: usize,
    steps: usize,
    sqrt_dt: f64,
}

impl BrownianIncrements {
    pub fn new(seed: u64, dim: usize, steps: usize, dt: f64) -> Self {
        BrownianIncrements { seed, dim, steps, sqrt_dt: dt.sqrt() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// All `steps * dim` increments of one path, step-major.
    pub fn fill_path(&self, path: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.steps * self.dim);
        let mut stream = GaussianStream::new(self.seed, path as u64);
        if self.dim == 0 {
            return;
        }
        for chunk in out.chunks_mut(self.dim) {
            stream.fill_step(chunk);
            for v in chunk.iter_mut() {
                *v *= self.sqrt_dt;
            }
        }
    }

    pub fn path(&self, path: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.steps * self.dim];
        self.fill_path(path, &mut out);
        out
    }

    /// Random access to a single step.
    pub fn at(&self, path: usize, step: usize) -> Vec<f64> {
        let mut stream = GaussianStream::new(self.seed, path as u64);
        stream.seek(step, self.dim);
        let mut out = vec![0.0; self.dim];
        stream.fill_step(&mut out);
        out.iter_mut().for_each(|v| *v *= self.sqrt_dt);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential() {
        for dim in [1, 2, 3] {
            let inc = BrownianIncrements::new(42, dim, 50, 0.01);
            let whole = inc.path(7);
            for step in [0, 1, 17, 49] {
                assert_eq!(inc.at(7, step), whole[step * dim..(step + 1) * dim].to_vec());
            }
        }
    }

    #[test]
    fn streams_differ_by_path_and_seed() {
        let a = BrownianIncrements::new(1, 1, 10, 1.0);
        let b = BrownianIncrements::new(2, 1, 10, 1.0);
        assert_ne!(a.path(0), a.path(1));
        assert_ne!(a.path(0), b.path(0));
    }

    #[test]
    fn moments_are_standard() {
        let mut s = GaussianStream::new(9, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.02);
    }
}
