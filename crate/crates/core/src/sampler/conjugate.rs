//! Dirichlet-conjugate Gibbs steps for initial distributions and emissions.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::stats::SufficientStats;
use super::LatentTrajectories;
use crate::data::CohortDataset;
use crate::error::{ChmmError, Result};
use crate::model::{EmissionMatrix, InitialDistribution};

/// Draws from `Dirichlet(alpha)` by normalizing independent gammas.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let gamma = Gamma::new(a, 1.0).map_err(|_| {
            ChmmError::InvalidParameter(format!("Dirichlet concentration {a} must be positive"))
        })?;
        draws.push(gamma.sample(rng));
    }
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|d| *d /= sum);
        return Ok(draws);
    }
    // every gamma underflowed; fall back to the largest concentration
    let best = alpha
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok((0..alpha.len()).map(|i| f64::from(u8::from(i == best))).collect())
}

/// Dirichlet parameters of the initial-distribution full conditional:
/// prior plus the count of each state at month 0.
pub fn initial_posterior_params(
    traj: &LatentTrajectories,
    chain: usize,
    prior: &[f64],
) -> Vec<f64> {
    let mut alpha = prior.to_vec();
    for p in 0..traj.num_patients() {
        alpha[traj.get(p, chain, 0) as usize] += 1.0;
    }
    alpha
}

/// Dirichlet parameters of each emission row's full conditional:
/// prior row plus counts of (latent state, observed outcome) pairs over
/// non-missing cells.
pub fn emission_posterior_params(
    traj: &LatentTrajectories,
    data: &CohortDataset,
    chain: usize,
    prior: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut alpha = prior.to_vec();
    for p in 0..traj.num_patients() {
        let latent = traj.series(p, chain);
        for (t, obs) in data.series(p, chain).iter().enumerate() {
            if let Some(x) = obs {
                alpha[latent[t] as usize][*x as usize] += 1.0;
            }
        }
    }
    alpha
}

pub(crate) fn initial_from_stats(
    stats: &SufficientStats,
    chain: usize,
    prior: &[f64],
) -> Vec<f64> {
    prior
        .iter()
        .zip(stats.initial_counts(chain))
        .map(|(a, n)| a + n)
        .collect()
}

pub(crate) fn emission_from_stats(
    stats: &SufficientStats,
    chain: usize,
    prior: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let k = prior.len();
    let counts = stats.emission_counts(chain);
    prior
        .iter()
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .map(|(j, a)| a + counts[r * k + j])
                .collect()
        })
        .collect()
}

/// Gibbs draw of chain `chain`'s initial distribution.
pub fn gibbs_update_initial<R: Rng + ?Sized>(
    traj: &LatentTrajectories,
    chain: usize,
    prior: &[f64],
    rng: &mut R,
) -> Result<InitialDistribution> {
    let alpha = initial_posterior_params(traj, chain, prior);
    InitialDistribution::new(sample_dirichlet(&alpha, rng)?)
}

/// Gibbs draw of chain `chain`'s emission matrix.
pub fn gibbs_update_emission<R: Rng + ?Sized>(
    traj: &LatentTrajectories,
    data: &CohortDataset,
    chain: usize,
    prior: &[Vec<f64>],
    rng: &mut R,
) -> Result<EmissionMatrix> {
    let alpha = emission_posterior_params(traj, data, chain, prior);
    emission_from_alpha(&alpha, rng)
}

pub(crate) fn emission_from_alpha<R: Rng + ?Sized>(
    alpha: &[Vec<f64>],
    rng: &mut R,
) -> Result<EmissionMatrix> {
    let mut probs = Vec::with_capacity(alpha.len() * alpha.len());
    for row in alpha {
        probs.extend(sample_dirichlet(row, rng)?);
    }
    EmissionMatrix::new(alpha.len(), probs)
}
