//! Dense matrix kernels, stabilized softmax and seeded random streams.

mod mat;
mod rng;

pub use mat::{mat_mul, Mat};
pub use rng::RngStream;

use crate::error::{Error, Result};

/// Softmax of a logit vector, stabilized by subtracting the maximum.
pub fn softmax_logits(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::arg("softmax input is not finite"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place variant used by the hot loops; the caller guarantees a
/// non-empty, finite input.
#[inline]
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}
