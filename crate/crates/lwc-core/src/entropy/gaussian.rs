//! Discretized Gaussian coefficient model: integer value `v` gets the
//! probability mass of the unit interval around it,
//! `Phi((v - mu + 1/2) / sigma) - Phi((v - mu - 1/2) / sigma)`.

use crate::constants::{P_FLOOR, SIGMA_MAX, SIGMA_MIN};
use crate::tensor::{Real, Tensor};

/// Maps a network's raw scale output to a positive, bounded sigma.
pub fn sigma_from_raw<R: Real>(raw: &Tensor<R>) -> Tensor<R> {
    raw.exp().clamp(R::from_f64(SIGMA_MIN as f64), R::from_f64(SIGMA_MAX as f64))
}

/// Scalar twin of [`sigma_from_raw`]; the sequential decoder must transform
/// raw scales with bit-identical arithmetic.
#[inline]
pub fn sigma_from_raw_scalar(raw: f32) -> f32 {
    raw.exp().max(SIGMA_MIN).min(SIGMA_MAX)
}

/// Probability mass of each value under its own Gaussian, floored.
pub fn pmf<R: Real>(v: &Tensor<R>, mu: &Tensor<R>, sigma: &Tensor<R>) -> Tensor<R> {
    let centered = v.sub(mu);
    let half = R::from_f64(0.5);
    let up = centered.add_scalar(half).div(sigma).normal_cdf();
    let dn = centered.add_scalar(-half).div(sigma).normal_cdf();
    up.sub(&dn).clamp_min(R::from_f64(P_FLOOR))
}

/// Total code length in bits implied by a tensor of probabilities.
pub fn rate_bits<R: Real>(pmf: &Tensor<R>) -> Tensor<R> {
    pmf.ln().sum_all().mul_scalar(R::from_f64(-1.0 / std::f64::consts::LN_2))
}

/// `-log2` mass of one integer residual in `f64`, used for reported model
/// rates and table sanity checks.
pub fn nll_bits_scalar(v: f64, mu: f64, sigma: f64) -> f64 {
    let up = 0.5 * libm::erfc(-((v - mu + 0.5) / sigma) / std::f64::consts::SQRT_2);
    let dn = 0.5 * libm::erfc(-((v - mu - 0.5) / sigma) / std::f64::consts::SQRT_2);
    -((up - dn).max(P_FLOOR)).log2()
}
