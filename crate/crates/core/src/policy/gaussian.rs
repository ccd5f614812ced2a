//! Diagonal Gaussian latent: reparameterised sampling, log density and KL to
//! the standard normal prior.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::LATENT_DIM;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mean: [f64; LATENT_DIM],
    pub std: [f64; LATENT_DIM],
}

impl GaussianLatent {
    pub fn standard() -> Self {
        Self { mean: [0.0; LATENT_DIM], std: [1.0; LATENT_DIM] }
    }

    /// From a raw log-std head, clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn from_raw(mean: &[f64], raw_log_std: &[f64]) -> Self {
        Self {
            mean: std::array::from_fn(|i| mean[i]),
            std: std::array::from_fn(|i| raw_log_std[i].clamp(LOG_STD_MIN, LOG_STD_MAX).exp()),
        }
    }

    /// `μ + σ ⊙ ε`.
    pub fn reparameterize(&self, eps: &[f64; LATENT_DIM]) -> [f64; LATENT_DIM] {
        std::array::from_fn(|i| self.mean[i] + self.std[i] * eps[i])
    }

    pub fn log_prob(&self, z: &[f64; LATENT_DIM]) -> f64 {
        diag_gaussian_log_prob(z, &self.mean, &self.std)
    }
}

/// Log density of a diagonal Gaussian.
pub fn diag_gaussian_log_prob(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| {
            let u = (x - m) / s;
            -0.5 * u * u - s.ln() - 0.5 * LN_2PI
        })
        .sum()
}

/// Differential entropy of a diagonal Gaussian from its log-stds.
pub fn diag_gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|l| l + 0.5 * (LN_2PI + 1.0)).sum()
}

/// `Σᵢ ½(σᵢ² + μᵢ² − 1 − ln σᵢ²)`.
pub fn kl_to_prior(g: &GaussianLatent) -> f64 {
    (0..LATENT_DIM)
        .map(|i| {
            let v = g.std[i] * g.std[i];
            0.5 * (v + g.mean[i] * g.mean[i] - 1.0 - v.ln())
        })
        .sum()
}

/// `(∂KL/∂μ, ∂KL/∂σ)`.
pub fn kl_to_prior_grad(g: &GaussianLatent) -> ([f64; LATENT_DIM], [f64; LATENT_DIM]) {
    (g.mean, std::array::from_fn(|i| g.std[i] - 1.0 / g.std[i]))
}

pub fn standard_normal<R: Rng + ?Sized, const N: usize>(rng: &mut R) -> [f64; N] {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

/// Draws `z = μ + σ ⊙ ε` with `ε ~ N(0, I)`; returns `z` and its log density.
pub fn sample_latent<R: Rng + ?Sized>(g: &GaussianLatent, rng: &mut R) -> ([f64; LATENT_DIM], f64) {
    let eps = standard_normal::<R, LATENT_DIM>(rng);
    let z = g.reparameterize(&eps);
    (z, g.log_prob(&z))
}
