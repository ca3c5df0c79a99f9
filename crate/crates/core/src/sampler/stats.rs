//! Sufficient statistics of the complete data (latent trajectories plus
//! observations). Everything the parameter updates need is in here.

use super::LatentTrajectories;
use crate::data::CohortDataset;
use crate::model::StateSpace;

#[derive(Debug, Clone)]
pub struct SufficientStats {
    num_states: usize,
    num_joint: usize,
    // [chain][state]
    initial: Vec<f64>,
    // [chain][truth][observed]
    emission: Vec<f64>,
    // [chain][joint previous code][next state of chain]
    transition: Vec<f64>,
}

impl SufficientStats {
    /// Caller guarantees `K^C` fits the transition table limit.
    pub fn compute(space: &StateSpace, traj: &LatentTrajectories, data: &CohortDataset) -> Self {
        let k = space.num_states();
        let c = space.num_chains();
        let num_joint = space.joint_size().expect("joint size checked by caller") as usize;
        let mut stats = Self {
            num_states: k,
            num_joint,
            initial: vec![0.0; c * k],
            emission: vec![0.0; c * k * k],
            transition: vec![0.0; c * num_joint * k],
        };
        let months = traj.num_months();
        let mut prev = vec![0u8; c];
        for p in 0..traj.num_patients() {
            for chain in 0..c {
                stats.initial[chain * k + traj.get(p, chain, 0) as usize] += 1.0;
                let latent = traj.series(p, chain);
                for (t, obs) in data.series(p, chain).iter().enumerate() {
                    if let Some(x) = obs {
                        stats.emission[(chain * k + latent[t] as usize) * k + *x as usize] += 1.0;
                    }
                }
            }
            for t in 1..months {
                for (chain, s) in prev.iter_mut().enumerate() {
                    *s = traj.get(p, chain, t - 1);
                }
                let code = space.encode(&prev);
                for chain in 0..c {
                    let next = traj.get(p, chain, t) as usize;
                    stats.transition[(chain * num_joint + code) * k + next] += 1.0;
                }
            }
        }
        stats
    }

    pub fn initial_counts(&self, chain: usize) -> &[f64] {
        &self.initial[chain * self.num_states..(chain + 1) * self.num_states]
    }

    /// Row-major `[truth][observed]` counts for one chain.
    pub fn emission_counts(&self, chain: usize) -> &[f64] {
        let kk = self.num_states * self.num_states;
        &self.emission[chain * kk..(chain + 1) * kk]
    }

    /// Counts of chain `chain`'s next state, indexed `[prev code][next]`.
    pub fn transition_counts(&self, chain: usize) -> &[f64] {
        let len = self.num_joint * self.num_states;
        &self.transition[chain * len..(chain + 1) * len]
    }

    pub fn num_joint(&self) -> usize {
        self.num_joint
    }
}
