//! Exact reference computations on the joint HMM over all `K^C` joint
//! states. Only for small models: it exists to check the sampler and the
//! simulator, not to replace them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CohortDataset, Observation};
use crate::error::{ChmmError, Result};
use crate::generative::{simulate_cohort, InitialSource, SimulationSpec};
use crate::model::{
    build_transition, BetaParams, ChmmParams, EmissionMatrix, InitialDistribution, State,
    StateSpace, TransitionTable,
};
use crate::sampler::ffbs_sample;

/// Largest joint state space [`build_joint`] accepts.
pub const MAX_JOINT_STATES: u128 = 4096;
/// Largest number of target trajectories [`enumerate_conditional`] lists.
pub const MAX_ENUMERATED_PATHS: u128 = 65_536;

#[derive(Debug, Clone)]
pub struct JointHmm {
    space: StateSpace,
    num_joint: usize,
    transition: Vec<f64>,
    initial: Vec<f64>,
    emissions: Vec<EmissionMatrix>,
}

/// Builds the product-space HMM whose transition `s → s'` is
/// `Π_c T^[c](s)(s[c] → s'[c])`.
pub fn build_joint(space: &StateSpace, params: &ChmmParams) -> Result<JointHmm> {
    params.validate(space)?;
    let size = space.joint_size().unwrap_or(u128::MAX);
    if size > MAX_JOINT_STATES {
        return Err(ChmmError::SizeLimit {
            what: "joint states K^C",
            size,
            limit: MAX_JOINT_STATES,
        });
    }
    let n = size as usize;
    let c = space.num_chains();
    let mut transition = vec![0.0; n * n];
    let mut initial = vec![0.0; n];
    for from in 0..n {
        let prev = space.decode(from);
        initial[from] = prev
            .iter()
            .enumerate()
            .map(|(chain, &s)| params.initials[chain].probs()[s as usize])
            .product();
        let per_chain = (0..c)
            .map(|chain| build_transition(&params.beta, chain, &prev))
            .collect::<Result<Vec<_>>>()?;
        for to in 0..n {
            let next = space.decode(to);
            transition[from * n + to] = (0..c)
                .map(|chain| per_chain[chain].get(prev[chain] as usize, next[chain] as usize))
                .product();
        }
    }
    Ok(JointHmm {
        space: space.clone(),
        num_joint: n,
        transition,
        initial,
        emissions: params.emissions.clone(),
    })
}

impl JointHmm {
    pub fn num_joint(&self) -> usize {
        self.num_joint
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transition[from * self.num_joint + to]
    }

    pub fn transition_row(&self, from: usize) -> &[f64] {
        &self.transition[from * self.num_joint..(from + 1) * self.num_joint]
    }

    pub fn initial(&self, state: usize) -> f64 {
        self.initial[state]
    }

    /// Product of per-chain emission factors for one month; missing
    /// observations contribute 1.
    pub fn emission_factor(&self, joint: usize, column: &[Observation]) -> f64 {
        let states = self.space.decode(joint);
        column
            .iter()
            .zip(&states)
            .enumerate()
            .map(|(chain, (obs, &s))| match obs {
                Some(x) => self.emissions[chain].get(s as usize, *x as usize),
                None => 1.0,
            })
            .product()
    }
}

/// Exact marginal log-likelihood of one patient's `[chain][month]`
/// observations (scaled forward algorithm).
pub fn joint_likelihood(joint: &JointHmm, obs: &[Observation], num_months: usize) -> f64 {
    let n = joint.num_joint;
    let c = joint.space.num_chains();
    assert_eq!(obs.len(), c * num_months, "observations must be [chain][month]");
    let column = |t: usize| -> Vec<Observation> { (0..c).map(|ch| obs[ch * num_months + t]).collect() };

    let mut log_lik = 0.0;
    let col0 = column(0);
    let mut alpha: Vec<f64> = (0..n)
        .map(|s| joint.initial[s] * joint.emission_factor(s, &col0))
        .collect();
    for t in 0..num_months {
        if t > 0 {
            let col = column(t);
            let mut next = vec![0.0; n];
            for (from, a) in alpha.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                for (to, p) in joint.transition_row(from).iter().enumerate() {
                    next[to] += a * p;
                }
            }
            for (s, v) in next.iter_mut().enumerate() {
                *v *= joint.emission_factor(s, &col);
            }
            alpha = next;
        }
        let norm: f64 = alpha.iter().sum();
        if norm <= 0.0 {
            return f64::NEG_INFINITY;
        }
        log_lik += norm.ln();
        alpha.iter_mut().for_each(|a| *a /= norm);
    }
    log_lik
}

/// Sum of [`joint_likelihood`] over every patient in `data`.
pub fn joint_log_likelihood_cohort(joint: &JointHmm, data: &CohortDataset) -> f64 {
    (0..data.num_patients())
        .map(|p| joint_likelihood(joint, data.patient_block(p), data.num_months()))
        .sum()
}

/// Index of a single-chain trajectory, month 0 least significant.
pub fn trajectory_code(path: &[State], num_states: usize) -> usize {
    path.iter()
        .rev()
        .fold(0, |acc, &s| acc * num_states + s as usize)
}

/// Exact conditional distribution of `target`'s trajectory given the other
/// chains' trajectories in `states` and the patient's observations, by
/// evaluating the complete-data joint density of every candidate path.
///
/// Entry `i` is the probability of the path with [`trajectory_code`] `i`.
pub fn enumerate_conditional(
    space: &StateSpace,
    params: &ChmmParams,
    target: usize,
    states: &[State],
    obs: &[Observation],
    num_months: usize,
) -> Result<Vec<f64>> {
    params.validate(space)?;
    let k = space.num_states();
    let paths = (k as u128)
        .checked_pow(num_months as u32)
        .unwrap_or(u128::MAX);
    if paths > MAX_ENUMERATED_PATHS {
        return Err(ChmmError::SizeLimit {
            what: "target trajectories K^T",
            size: paths,
            limit: MAX_ENUMERATED_PATHS,
        });
    }
    let mut work = states.to_vec();
    let mut log_weights = Vec::with_capacity(paths as usize);
    for code in 0..paths as usize {
        let mut rest = code;
        for t in 0..num_months {
            work[target * num_months + t] = (rest % k) as State;
            rest /= k;
        }
        log_weights.push(complete_log_density(space, params, &work, obs, num_months)?);
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(ChmmError::InvalidParameter(
            "every trajectory has zero probability".into(),
        ));
    }
    let weights: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// `log p(π, x | θ)` for one patient: initial, transition and emission
/// factors of every chain.
pub fn complete_log_density(
    space: &StateSpace,
    params: &ChmmParams,
    states: &[State],
    obs: &[Observation],
    num_months: usize,
) -> Result<f64> {
    let c = space.num_chains();
    let mut lp = 0.0;
    let mut prev = vec![0 as State; c];
    for chain in 0..c {
        lp += params.initials[chain].probs()[states[chain * num_months] as usize].ln();
    }
    for t in 0..num_months {
        if t > 0 {
            for (chain, s) in prev.iter_mut().enumerate() {
                *s = states[chain * num_months + t - 1];
            }
            for chain in 0..c {
                let tm = build_transition(&params.beta, chain, &prev)?;
                let to = states[chain * num_months + t] as usize;
                lp += tm.get(prev[chain] as usize, to).ln();
            }
        }
        for chain in 0..c {
            if let Some(x) = obs[chain * num_months + t] {
                let s = states[chain * num_months + t] as usize;
                lp += params.emissions[chain].get(s, x as usize).ln();
            }
        }
    }
    Ok(lp)
}

/// Exact-versus-engine comparison on one random small instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub num_chains: usize,
    pub num_months: usize,
    pub draws: usize,
    pub seed: u64,
    /// Forward algorithm on the joint HMM.
    pub log_likelihood_forward: f64,
    /// Sum of complete-data densities over every joint path.
    pub log_likelihood_enumerated: f64,
    pub likelihood_relative_error: f64,
    /// TV distance between FFBS draws and the exact conditional, per chain.
    pub ffbs_tv: Vec<f64>,
    /// TV distance between simulated joint states at the last month and
    /// the propagated joint distribution.
    pub simulator_tv: f64,
    pub likelihood_tolerance: f64,
    pub tv_tolerance: f64,
    pub passed: bool,
}

fn random_instance<R: Rng>(space: &StateSpace, rng: &mut R) -> Result<ChmmParams> {
    let k = space.num_states();
    let blocks = (0..space.num_chains())
        .map(|_| {
            (0..BetaParams::block_len(space.num_chains(), k))
                .map(|_| rng.random_range(-1.5..1.5))
                .collect()
        })
        .collect();
    let dist = |rng: &mut R| -> Vec<f64> {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    };
    Ok(ChmmParams {
        beta: BetaParams::from_blocks(space, blocks)?,
        emissions: (0..space.num_chains())
            .map(|_| EmissionMatrix::new(k, (0..k).flat_map(|_| dist(rng)).collect()))
            .collect::<Result<_>>()?,
        initials: (0..space.num_chains())
            .map(|_| InitialDistribution::new(dist(rng)))
            .collect::<Result<_>>()?,
    })
}

/// Draws a random binary instance with `num_chains` chains over
/// `num_months` months and checks the engine against exact answers:
/// likelihood (forward vs path enumeration), FFBS (draw frequencies vs
/// enumerated conditional) and the simulator (last-month joint state
/// frequencies vs `π₀ Tⁿ`).
pub fn oracle_check(num_chains: usize, num_months: usize, draws: usize, seed: u64) -> Result<OracleReport> {
    if num_chains == 0 || num_months == 0 || draws == 0 {
        return Err(ChmmError::InvalidParameter(
            "chains, months and draws must be positive".into(),
        ));
    }
    let space = StateSpace::anonymous(num_chains, 2, 0)?;
    let joint_paths = 2u128
        .checked_pow((num_chains * num_months) as u32)
        .unwrap_or(u128::MAX);
    if joint_paths > MAX_ENUMERATED_PATHS {
        return Err(ChmmError::SizeLimit {
            what: "joint paths 2^(C·T)",
            size: joint_paths,
            limit: MAX_ENUMERATED_PATHS,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_instance(&space, &mut rng)?;
    let joint = build_joint(&space, &params)?;
    let c = num_chains;
    let obs: Vec<Observation> = (0..c * num_months)
        .map(|_| (rng.random::<f64>() > 0.25).then(|| rng.random_range(0..2u8)))
        .collect();

    let forward = joint_likelihood(&joint, &obs, num_months);
    let mut states = vec![0 as State; c * num_months];
    let mut log_terms = Vec::with_capacity(joint_paths as usize);
    for code in 0..joint_paths as usize {
        for (i, s) in states.iter_mut().enumerate() {
            *s = ((code >> i) & 1) as State;
        }
        log_terms.push(complete_log_density(&space, &params, &states, &obs, num_months)?);
    }
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let enumerated = max + log_terms.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let likelihood_relative_error = (forward - enumerated).exp_m1().abs();

    let table = TransitionTable::new(&space, &params.beta)?;
    let mut current: Vec<State> = (0..c * num_months).map(|_| rng.random_range(0..2u8)).collect();
    let mut ffbs_tv = Vec::with_capacity(c);
    for target in 0..c {
        let exact = enumerate_conditional(&space, &params, target, &current, &obs, num_months)?;
        let mut counts = vec![0usize; exact.len()];
        for _ in 0..draws {
            ffbs_sample(&space, &table, &params, target, 0, &mut current, &obs, num_months, &mut rng)?;
            let path = &current[target * num_months..(target + 1) * num_months];
            counts[trajectory_code(path, 2)] += 1;
        }
        ffbs_tv.push(total_variation(&exact, &counts, draws));
    }

    let spec = SimulationSpec {
        num_patients: draws,
        horizon: num_months.max(2) - 1,
        initial: InitialSource::Params,
        schedule: Default::default(),
        rng_seed: seed ^ 0x5EED,
        arm: crate::data::Arm::Education,
    };
    let (traj, _) = simulate_cohort(&space, &params, &spec)?;
    let mut marginal: Vec<f64> = (0..joint.num_joint()).map(|s| joint.initial(s)).collect();
    for _ in 0..spec.horizon {
        let mut next = vec![0.0; marginal.len()];
        for (from, m) in marginal.iter().enumerate() {
            for (to, p) in joint.transition_row(from).iter().enumerate() {
                next[to] += m * p;
            }
        }
        marginal = next;
    }
    let mut counts = vec![0usize; marginal.len()];
    let mut last = vec![0 as State; c];
    for p in 0..draws {
        for (chain, s) in last.iter_mut().enumerate() {
            *s = traj.get(p, chain, spec.horizon);
        }
        counts[space.encode(&last)] += 1;
    }
    let simulator_tv = total_variation(&marginal, &counts, draws);

    let likelihood_tolerance = 1e-10;
    // three times the largest expected TV of a multinomial sample
    let cells = marginal.len().max(1 << num_months) as f64;
    let tv_tolerance = 3.0 * 0.5 * (cells / draws as f64).sqrt();
    let passed = likelihood_relative_error <= likelihood_tolerance
        && ffbs_tv.iter().all(|&t| t <= tv_tolerance)
        && simulator_tv <= tv_tolerance;
    Ok(OracleReport {
        num_chains,
        num_months,
        draws,
        seed,
        log_likelihood_forward: forward,
        log_likelihood_enumerated: enumerated,
        likelihood_relative_error,
        ffbs_tv,
        simulator_tv,
        likelihood_tolerance,
        tv_tolerance,
        passed,
    })
}

fn total_variation(exact: &[f64], counts: &[usize], n: usize) -> f64 {
    0.5 * exact
        .iter()
        .zip(counts)
        .map(|(p, &k)| (p - k as f64 / n as f64).abs())
        .sum::<f64>()
}
