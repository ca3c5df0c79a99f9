//! Horseshoe prior on the interaction β's.
//!
//! `β_j ~ N(0, τ² λ_j²)`, `λ_j ~ C⁺(0, 1)`, written with the inverse-gamma
//! auxiliary representation `λ_j² | ν_j ~ IG(1/2, 1/ν_j)`,
//! `ν_j ~ IG(1/2, 1)`, which makes both local-scale conditionals
//! inverse-gamma.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorseshoeState {
    lambda_sq: Vec<f64>,
    nu: Vec<f64>,
}

impl HorseshoeState {
    /// All local scales at 1.
    pub fn new(len: usize) -> Self {
        Self {
            lambda_sq: vec![1.0; len],
            nu: vec![1.0; len],
        }
    }

    pub fn with_local_scales(scales: &[f64]) -> Self {
        assert!(scales.iter().all(|&s| s > 0.0), "local scales must be positive");
        Self {
            lambda_sq: scales.iter().map(|s| s * s).collect(),
            nu: vec![1.0; scales.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.lambda_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda_sq.is_empty()
    }

    pub fn local_scale(&self, j: usize) -> f64 {
        self.lambda_sq[j].sqrt()
    }

    /// Prior variance `τ² λ_j²` of `β_j` given the local scale.
    pub fn conditional_variance(&self, j: usize, tau: f64) -> f64 {
        tau * tau * self.lambda_sq[j]
    }

    /// `log p(β | λ, τ)` up to a β-independent constant.
    pub fn log_prior(&self, beta: &[f64], tau: f64) -> f64 {
        debug_assert_eq!(beta.len(), self.len());
        let tau_sq = tau * tau;
        beta.iter()
            .zip(&self.lambda_sq)
            .map(|(b, l)| -0.5 * b * b / (tau_sq * l))
            .sum()
    }
}

/// `IG(shape, rate)` draw, kept strictly positive and finite.
fn inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0)
        .expect("positive shape")
        .sample(rng);
    (rate / g.max(f64::MIN_POSITIVE)).clamp(f64::MIN_POSITIVE, f64::MAX)
}

/// Resamples every local scale from its full conditional given `beta`.
pub fn update_horseshoe<R: Rng + ?Sized>(
    beta: &[f64],
    state: &HorseshoeState,
    tau: f64,
    rng: &mut R,
) -> HorseshoeState {
    assert_eq!(beta.len(), state.len(), "one local scale per interaction");
    let tau_sq = tau * tau;
    let mut next = state.clone();
    for (j, b) in beta.iter().enumerate() {
        let lambda_sq = inverse_gamma(1.0, 1.0 / next.nu[j] + b * b / (2.0 * tau_sq), rng);
        next.lambda_sq[j] = lambda_sq;
        next.nu[j] = inverse_gamma(1.0, 1.0 + 1.0 / lambda_sq, rng);
    }
    next
}

/// One draw of `β` from the marginal Horseshoe prior, through the same
/// auxiliary representation the sampler uses.
pub fn sample_prior<R: Rng + ?Sized>(tau: f64, rng: &mut R) -> f64 {
    let nu = inverse_gamma(0.5, 1.0, rng);
    let lambda_sq = inverse_gamma(0.5, 1.0 / nu, rng);
    let z: f64 = StandardNormal.sample(rng);
    tau * lambda_sq.sqrt() * z
}
