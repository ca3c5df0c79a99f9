//! Random-walk Metropolis update of one target chain's β block, with
//! Robbins–Monro scale adaptation and a learned proposal covariance.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::horseshoe::HorseshoeState;
use crate::error::{ChmmError, Result};
use crate::model::{BetaParams, StateSpace};

/// `min(1, exp(Δ))`.
pub fn acceptance_probability(delta_log_target: f64) -> f64 {
    if delta_log_target >= 0.0 {
        1.0
    } else {
        delta_log_target.exp()
    }
}

/// Gaussian random-walk proposal `N(0, exp(2·log_scale) · L Lᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalState {
    dim: usize,
    log_scale: f64,
    // lower-triangular Cholesky factor of the base covariance, row-major
    chol: Vec<f64>,
    adaptations: u64,
    covariance_learned: bool,
    samples: u64,
    mean: Vec<f64>,
    comoment: Vec<f64>,
}

impl ProposalState {
    /// Isotropic proposal with covariance `variance · I`.
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        assert!(variance > 0.0, "proposal variance must be positive");
        let sd = variance.sqrt();
        let mut chol = vec![0.0; dim * dim];
        for i in 0..dim {
            chol[i * dim + i] = sd;
        }
        Self {
            dim,
            log_scale: 0.0,
            chol,
            adaptations: 0,
            covariance_learned: false,
            samples: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn covariance_learned(&self) -> bool {
        self.covariance_learned
    }

    /// Full proposal covariance, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let s2 = (2.0 * self.log_scale).exp();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..=i.min(j) {
                    acc += self.chol[i * d + k] * self.chol[j * d + k];
                }
                cov[i * d + j] = s2 * acc;
            }
        }
        cov
    }

    pub fn propose<R: Rng + ?Sized>(&self, current: &[f64], rng: &mut R) -> Vec<f64> {
        let d = self.dim;
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let s = self.scale();
        (0..d)
            .map(|i| {
                let step: f64 = (0..=i).map(|k| self.chol[i * d + k] * z[k]).sum();
                current[i] + s * step
            })
            .collect()
    }

    /// Adds one chain position to the running moments.
    pub fn record(&mut self, x: &[f64]) {
        let d = self.dim;
        self.samples += 1;
        let n = self.samples as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, dx) in self.mean.iter_mut().zip(&delta) {
            *m += dx / n;
        }
        for i in 0..d {
            let after_i = x[i] - self.mean[i];
            for j in 0..d {
                self.comoment[i * d + j] += delta[j] * after_i;
            }
        }
    }

    pub fn recorded(&self) -> u64 {
        self.samples
    }

    /// Replaces the base covariance with `2.38²/d · Σ̂`, where `Σ̂` is the
    /// recorded sample covariance plus a small ridge. The first switch
    /// resets the adaptive scale. Returns `false` (and keeps the current
    /// proposal) if `Σ̂` is not positive definite.
    pub fn refresh_covariance(&mut self) -> bool {
        let d = self.dim;
        if self.samples < 2 || d == 0 {
            return false;
        }
        let denom = (self.samples - 1) as f64;
        let factor = 2.38 * 2.38 / d as f64;
        let cov = DMatrix::from_fn(d, d, |i, j| {
            let ridge = if i == j { 1e-8 } else { 0.0 };
            factor * (self.comoment[i * d + j] / denom + ridge)
        });
        let Some(chol) = cov.cholesky() else {
            return false;
        };
        let l = chol.l();
        for i in 0..d {
            for j in 0..d {
                self.chol[i * d + j] = if j <= i { l[(i, j)] } else { 0.0 };
            }
        }
        if !self.covariance_learned {
            self.covariance_learned = true;
            self.log_scale = 0.0;
        }
        true
    }
}

/// One Robbins–Monro step on the log scale:
/// `log s ← log s + γ_m (rate − target)` with `γ_m = min(1, 3/√(m+1))`.
pub fn adapt_proposal(state: &ProposalState, acceptance_rate: f64, target: f64) -> ProposalState {
    let mut next = state.clone();
    let gain = (3.0 / ((state.adaptations + 1) as f64).sqrt()).min(1.0);
    next.log_scale += gain * (acceptance_rate - target);
    next.adaptations += 1;
    next
}

/// Unnormalized log full conditional of one target chain's β block: the
/// log-likelihood of every transition into that chain plus the Normal
/// (intercept) and Horseshoe (interaction) priors.
pub struct BetaTarget<'a> {
    pub space: &'a StateSpace,
    pub beta: &'a BetaParams,
    pub target: usize,
    /// `[joint previous code][next state]` counts for this chain.
    pub counts: &'a [f64],
    pub horseshoe: &'a HorseshoeState,
    pub intercept_sd: f64,
    pub horseshoe_scale: f64,
}

impl BetaTarget<'_> {
    pub fn log_likelihood(&self, block: &[f64]) -> f64 {
        let k = self.space.num_states();
        let mut ll = 0.0;
        for (code, row_counts) in self.counts.chunks(k).enumerate() {
            if row_counts.iter().all(|&n| n == 0.0) {
                continue;
            }
            let prev = self.space.decode(code);
            let u = self.beta.unnormalized_with(block, self.target, &prev);
            let from = prev[self.target] as usize;
            let row = &u[from * k..(from + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, &n) in row_counts.iter().enumerate() {
                if n != 0.0 {
                    ll += n * (row[j] - lse);
                }
            }
        }
        ll
    }

    pub fn log_prior(&self, block: &[f64]) -> f64 {
        let split = self.beta.intercept_len();
        let sd2 = self.intercept_sd * self.intercept_sd;
        let intercept: f64 = block[..split].iter().map(|b| -0.5 * b * b / sd2).sum();
        intercept + self.horseshoe.log_prior(&block[split..], self.horseshoe_scale)
    }

    pub fn log_density(&self, block: &[f64]) -> f64 {
        self.log_likelihood(block) + self.log_prior(block)
    }
}

#[derive(Debug, Clone)]
pub struct MhOutcome {
    pub block: Vec<f64>,
    pub accepted: bool,
    pub log_target: f64,
}

/// One Metropolis step from `current` under `target`.
pub fn mh_update_beta<R: Rng + ?Sized>(
    target: &BetaTarget<'_>,
    current: &[f64],
    proposal: &ProposalState,
    rng: &mut R,
) -> Result<MhOutcome> {
    let current_lp = target.log_density(current);
    if !current_lp.is_finite() {
        return Err(ChmmError::NonFiniteLogTarget {
            chain: target.target,
            value: current_lp,
        });
    }
    let candidate = proposal.propose(current, rng);
    let candidate_lp = target.log_density(&candidate);
    let accept_prob = if candidate_lp.is_finite() {
        acceptance_probability(candidate_lp - current_lp)
    } else {
        0.0
    };
    let u: f64 = rng.random();
    if u < accept_prob {
        Ok(MhOutcome {
            block: candidate,
            accepted: true,
            log_target: candidate_lp,
        })
    } else {
        Ok(MhOutcome {
            block: current.to_vec(),
            accepted: false,
            log_target: current_lp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::quantile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn acceptance_probabilities() {
        assert_eq!(acceptance_probability(0.0), 1.0);
        assert_eq!(acceptance_probability(3.0), 1.0);
        assert!((acceptance_probability(-0.5) - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn adaptation_direction() {
        let p = ProposalState::isotropic(3, 0.01);
        assert_eq!(adapt_proposal(&p, 0.23, 0.23).scale(), p.scale());
        assert!(adapt_proposal(&p, 0.0, 0.23).scale() < p.scale());
        assert!(adapt_proposal(&p, 1.0, 0.23).scale() > p.scale());
        // still symmetric positive definite after adaptation
        let cov = adapt_proposal(&p, 1.0, 0.23).covariance();
        for i in 0..3 {
            assert!(cov[i * 3 + i] > 0.0);
            for j in 0..3 {
                assert_eq!(cov[i * 3 + j], cov[j * 3 + i]);
            }
        }
    }

    #[test]
    fn initial_covariance_is_scaled_identity() {
        let p = ProposalState::isotropic(2, 0.01);
        let cov = p.covariance();
        assert!((cov[0] - 0.01).abs() < 1e-15 && cov[1] == 0.0 && (cov[3] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn learned_covariance_tracks_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ProposalState::isotropic(2, 0.01);
        for _ in 0..20_000 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            p.record(&[2.0 * a, a + b]);
        }
        assert!(p.refresh_covariance());
        let cov = p.covariance();
        let f = 2.38 * 2.38 / 2.0;
        assert!((cov[0] / f - 4.0).abs() < 0.15, "{}", cov[0] / f);
        assert!((cov[1] / f - 2.0).abs() < 0.1);
        assert!((cov[3] / f - 2.0).abs() < 0.1);
    }

    /// With no transition data the β block's stationary law is its prior.
    #[test]
    fn prior_only_target_is_preserved() {
        let space = StateSpace::anonymous(2, 2, 0).unwrap();
        let beta = BetaParams::zeros(&space);
        let dim = BetaParams::block_len(2, 2);
        let counts = vec![0.0; 4 * 2];
        let hs = HorseshoeState::with_local_scales(&[2.0, 2.0]);
        let target = BetaTarget {
            space: &space,
            beta: &beta,
            target: 0,
            counts: &counts,
            horseshoe: &hs,
            intercept_sd: 1.0,
            horseshoe_scale: 0.25,
        };
        let proposal = ProposalState::isotropic(dim, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = vec![0.0; dim];
        let mut intercepts = Vec::new();
        let mut interactions = Vec::new();
        for i in 0..400_000 {
            x = mh_update_beta(&target, &x, &proposal, &mut rng).unwrap().block;
            if i >= 1000 && i % 4 == 0 {
                intercepts.push(x[0]);
                interactions.push(x[2]);
            }
        }
        intercepts.sort_by(f64::total_cmp);
        interactions.sort_by(f64::total_cmp);
        // N(0,1) and N(0, 0.5²) quantiles
        for (q, z) in [(0.1, -1.281_551_565_545), (0.5, 0.0), (0.9, 1.281_551_565_545)] {
            let a = quantile(&intercepts, q);
            let b = quantile(&interactions, q);
            assert!((a - z).abs() < 0.05, "intercept q{q}: {a}");
            assert!((b - 0.5 * z).abs() < 0.03, "interaction q{q}: {b}");
        }
    }

    #[test]
    fn non_finite_current_state_is_an_error() {
        let space = StateSpace::anonymous(1, 2, 0).unwrap();
        let beta = BetaParams::zeros(&space);
        let counts = vec![0.0; 4];
        let hs = HorseshoeState::new(0);
        let target = BetaTarget {
            space: &space,
            beta: &beta,
            target: 0,
            counts: &counts,
            horseshoe: &hs,
            intercept_sd: 1.0,
            horseshoe_scale: 0.25,
        };
        let p = ProposalState::isotropic(2, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = mh_update_beta(&target, &[f64::NAN, 0.0], &p, &mut rng).unwrap_err();
        assert!(matches!(err, ChmmError::NonFiniteLogTarget { .. }));
    }

    #[test]
    fn identical_proposal_is_always_accepted() {
        let space = StateSpace::anonymous(1, 2, 0).unwrap();
        let beta = BetaParams::zeros(&space);
        let counts = vec![3.0, 1.0, 2.0, 5.0];
        let hs = HorseshoeState::new(0);
        let target = BetaTarget {
            space: &space,
            beta: &beta,
            target: 0,
            counts: &counts,
            horseshoe: &hs,
            intercept_sd: 1.0,
            horseshoe_scale: 0.25,
        };
        let x = [0.3, -0.2];
        let delta = target.log_density(&x) - target.log_density(&x);
        assert_eq!(acceptance_probability(delta), 1.0);
    }

    #[test]
    fn likelihood_matches_direct_transition_products() {
        let space = StateSpace::anonymous(2, 2, 0).unwrap();
        let mut beta = BetaParams::zeros(&space);
        beta.set_block(1, vec![0.4, -0.3, 0.8, 0.1]).unwrap();
        // counts into chain 1, indexed [code][next]
        let counts = vec![2.0, 1.0, 0.0, 3.0, 1.0, 0.0, 4.0, 2.0];
        let hs = HorseshoeState::new(2);
        let target = BetaTarget {
            space: &space,
            beta: &beta,
            target: 1,
            counts: &counts,
            horseshoe: &hs,
            intercept_sd: 1.0,
            horseshoe_scale: 0.25,
        };
        let mut expected = 0.0;
        for code in 0..4 {
            let prev = space.decode(code);
            let t = crate::model::build_transition(&beta, 1, &prev).unwrap();
            for next in 0..2 {
                expected += counts[code * 2 + next] * t.get(prev[1] as usize, next).ln();
            }
        }
        let got = target.log_likelihood(beta.block(1));
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }
}
