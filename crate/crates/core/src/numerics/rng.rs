use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Mat;
use crate::error::{Error, Result};

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id selecting an independent keystream,
/// so distinct ids never overlap and the draws are identical on every
/// platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream sharing this seed, keyed by a different id.
    pub fn fork(&self, stream_id: u64) -> RngStream {
        RngStream::new(self.seed, stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn gaussian(&mut self, mean: f64, std: f64, shape: (usize, usize)) -> Result<Mat> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::arg(format!("standard deviation must be >= 0, got {std}")));
        }
        let (rows, cols) = shape;
        Ok(Mat::from_fn(rows, cols, |_, _| {
            let z = self.standard_normal();
            mean + std * z
        }))
    }

    pub fn uniform_mat(&mut self, lo: f64, hi: f64, shape: (usize, usize)) -> Mat {
        Mat::from_fn(shape.0, shape.1, |_, _| self.uniform(lo, hi))
    }

    pub fn uniform_vec(&mut self, lo: f64, hi: f64, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.uniform(lo, hi)).collect()
    }
}
