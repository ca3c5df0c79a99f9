//! Forward-filtering backward-sampling of one chain's trajectory with every
//! other chain held fixed.
//!
//! Besides the chain's own time-varying transitions and its emissions, the
//! full conditional carries a coupling factor at each month `t`: the
//! probability of every other chain's move `t → t+1`, which depends on the
//! target's state at `t`. That factor is folded into the forward pass as a
//! pseudo-emission.

use rand::Rng;

use crate::data::Observation;
use crate::error::{ChmmError, Result};
use crate::model::{ChmmParams, State, StateSpace, TransitionTable};

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left u at the very top; take the last positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Resamples `states[target]` for one patient.
///
/// `states` and `obs` are `[chain][month]` blocks of length `C · num_months`.
/// `patient` is only used in error reports.
#[allow(clippy::too_many_arguments)]
pub fn ffbs_sample<R: Rng + ?Sized>(
    space: &StateSpace,
    table: &TransitionTable,
    params: &ChmmParams,
    target: usize,
    patient: usize,
    states: &mut [State],
    obs: &[Observation],
    num_months: usize,
    rng: &mut R,
) -> Result<()> {
    let k = space.num_states();
    let c = space.num_chains();
    debug_assert_eq!(states.len(), c * num_months);
    debug_assert_eq!(obs.len(), c * num_months);

    // radix of the target chain in the joint code
    let radix = k.pow(target as u32);
    // code of the joint state at month t with the target's digit zeroed
    let base_code = |states: &[State], t: usize| -> usize {
        let mut code = 0usize;
        for chain in (0..c).rev() {
            let s = if chain == target {
                0
            } else {
                states[chain * num_months + t] as usize
            };
            code = code * k + s;
        }
        code
    };

    let emission = &params.emissions[target];
    let initial = params.initials[target].probs();
    let own_obs = &obs[target * num_months..(target + 1) * num_months];

    let mut alpha = vec![0.0; num_months * k];
    let mut codes = vec![0usize; num_months];
    for t in 0..num_months {
        codes[t] = base_code(states, t);
        let (prev_part, cur) = alpha.split_at_mut(t * k);
        let cur = &mut cur[..k];
        for s in 0..k {
            let prior = if t == 0 {
                initial[s]
            } else {
                let prev = &prev_part[(t - 1) * k..t * k];
                (0..k)
                    .map(|r| prev[r] * table.prob(target, codes[t - 1], r, s))
                    .sum()
            };
            let mut w = prior;
            if let Some(x) = own_obs[t] {
                w *= emission.get(s, x as usize);
            }
            if t + 1 < num_months {
                let code_s = codes[t] + s * radix;
                for other in (0..c).filter(|&o| o != target) {
                    let from = states[other * num_months + t] as usize;
                    let to = states[other * num_months + t + 1] as usize;
                    w *= table.prob(other, code_s, from, to);
                }
            }
            cur[s] = w;
        }
        let norm: f64 = cur.iter().sum();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(ChmmError::NumericalUnderflow {
                chain: target,
                patient,
                month: t,
            });
        }
        cur.iter_mut().for_each(|a| *a /= norm);
    }

    let own = &mut states[target * num_months..(target + 1) * num_months];
    let last = num_months - 1;
    own[last] = sample_index(&alpha[last * k..], rng) as State;
    let mut weights = vec![0.0; k];
    for t in (0..last).rev() {
        let next = own[t + 1] as usize;
        for (r, w) in weights.iter_mut().enumerate() {
            *w = alpha[t * k + r] * table.prob(target, codes[t], r, next);
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(ChmmError::NumericalUnderflow {
                chain: target,
                patient,
                month: t,
            });
        }
        own[t] = sample_index(&weights, rng) as State;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BetaParams, EmissionMatrix, InitialDistribution};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_emission_reproduces_observations() {
        let space = StateSpace::anonymous(1, 2, 0).unwrap();
        let params = ChmmParams::neutral(&space);
        let table = TransitionTable::new(&space, &params.beta).unwrap();
        let obs: Vec<Observation> = vec![Some(1), Some(0), Some(0), Some(1), Some(1)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut states = vec![0u8; 5];
            ffbs_sample(&space, &table, &params, 0, 0, &mut states, &obs, 5, &mut rng).unwrap();
            assert_eq!(states, vec![1, 0, 0, 1, 1]);
        }
    }

    #[test]
    fn unobserved_chain_follows_matrix_powers() {
        let space = StateSpace::anonymous(1, 2, 0).unwrap();
        let mut beta = BetaParams::zeros(&space);
        beta.set_intercept_row(0, 0, &[0.9]).unwrap();
        beta.set_intercept_row(0, 1, &[-0.4]).unwrap();
        let params = ChmmParams {
            beta,
            emissions: vec![EmissionMatrix::from_accuracy(0, 0.9, 0.9).unwrap()],
            initials: vec![InitialDistribution::new(vec![0.3, 0.7]).unwrap()],
        };
        let table = TransitionTable::new(&space, &params.beta).unwrap();
        let t = crate::model::build_transition(&params.beta, 0, &[0]).unwrap();
        let months = 4;
        // oracle: π₀ Tᵗ
        let mut marginals = vec![vec![0.3, 0.7]];
        for m in 1..months {
            let p: &Vec<f64> = &marginals[m - 1];
            let next = (0..2)
                .map(|j| (0..2).map(|i| p[i] * t.get(i, j)).sum())
                .collect();
            marginals.push(next);
        }
        let obs = vec![None; months];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 50_000;
        let mut counts = vec![[0usize; 2]; months];
        for _ in 0..n {
            let mut states = vec![0u8; months];
            ffbs_sample(&space, &table, &params, 0, 0, &mut states, &obs, months, &mut rng)
                .unwrap();
            for (m, s) in states.iter().enumerate() {
                counts[m][*s as usize] += 1;
            }
        }
        for m in 0..months {
            let tv = 0.5
                * (0..2)
                    .map(|s| (counts[m][s] as f64 / n as f64 - marginals[m][s]).abs())
                    .sum::<f64>();
            assert!(tv <= 0.01, "month {m}: TV {tv}");
        }
    }

    #[test]
    fn underflow_is_reported() {
        let space = StateSpace::anonymous(1, 2, 0).unwrap();
        let mut params = ChmmParams::neutral(&space);
        params.initials[0] = InitialDistribution::new(vec![1.0, 0.0]).unwrap();
        let table = TransitionTable::new(&space, &params.beta).unwrap();
        // identity emission + observed 1 at month 0 contradicts π₀ = (1, 0)
        let obs = vec![Some(1), None];
        let mut states = vec![0u8; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err =
            ffbs_sample(&space, &table, &params, 0, 3, &mut states, &obs, 2, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            ChmmError::NumericalUnderflow {
                patient: 3,
                month: 0,
                ..
            }
        ));
    }
}
