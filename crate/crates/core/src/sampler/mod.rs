//! Metropolis-within-Gibbs sampler for the additive CHMM.
//!
//! Every sweep first updates, for each chain, the initial distribution and
//! emission matrix (conjugate Dirichlet draws), the Horseshoe local scales
//! and the β block (random-walk Metropolis); then it redraws every chain's
//! latent trajectories by FFBS, one chain at a time, patients in parallel.

pub mod conjugate;
pub mod ffbs;
pub mod horseshoe;
pub mod metropolis;
pub mod stats;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use conjugate::{
    emission_posterior_params, gibbs_update_emission, gibbs_update_initial,
    initial_posterior_params, sample_dirichlet,
};
pub use ffbs::ffbs_sample;
pub use horseshoe::{update_horseshoe, HorseshoeState};
pub use metropolis::{
    acceptance_probability, adapt_proposal, mh_update_beta, BetaTarget, MhOutcome, ProposalState,
};
pub use stats::SufficientStats;

use crate::data::CohortDataset;
use crate::error::{ChmmError, Result};
use crate::model::{
    BetaParams, ChmmParams, InitialDistribution, State, StateSpace, TransitionTable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    /// Total sweeps, warm-up included.
    pub num_samples: usize,
    pub warmup: usize,
    /// Initial proposal covariance is `proposal_init_scale · I`.
    pub proposal_init_scale: f64,
    pub target_acceptance: f64,
    pub adapt_during_warmup_only: bool,
    /// Sweeps between Robbins–Monro scale updates.
    pub adaptation_window: usize,
    pub rng_seed: u64,
    pub prior_beta0_sd: f64,
    pub horseshoe_scale: f64,
    /// Dirichlet pseudo-counts per emission row, `[true state][observed]`.
    pub emission_prior_pseudocounts: Vec<Vec<f64>>,
    pub initial_prior_pseudocounts: Vec<f64>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            num_samples: 50_000,
            warmup: 25_000,
            proposal_init_scale: 0.01,
            target_acceptance: 0.23,
            adapt_during_warmup_only: true,
            adaptation_window: 50,
            rng_seed: 1,
            prior_beta0_sd: 1.0,
            horseshoe_scale: 0.25,
            // specificity 30, sensitivity 15, uniform elsewhere
            emission_prior_pseudocounts: vec![vec![30.0, 1.0], vec![1.0, 15.0]],
            initial_prior_pseudocounts: vec![1.0, 1.0],
        }
    }
}

impl McmcConfig {
    pub fn retained(&self) -> usize {
        self.num_samples.saturating_sub(self.warmup)
    }

    pub fn validate(&self, num_states: usize) -> Result<()> {
        let bad = |msg: String| Err(ChmmError::InvalidConfig(msg));
        if self.num_samples == 0 {
            return bad("num_samples must be positive".into());
        }
        if self.warmup >= self.num_samples {
            return bad(format!(
                "warmup ({}) must be smaller than num_samples ({})",
                self.warmup, self.num_samples
            ));
        }
        if !(self.proposal_init_scale > 0.0 && self.proposal_init_scale.is_finite()) {
            return bad("proposal_init_scale must be positive".into());
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad("target_acceptance must lie in (0, 1)".into());
        }
        if self.adaptation_window == 0 {
            return bad("adaptation_window must be positive".into());
        }
        if !(self.prior_beta0_sd > 0.0 && self.prior_beta0_sd.is_finite()) {
            return bad("prior_beta0_sd must be positive".into());
        }
        if !(self.horseshoe_scale > 0.0 && self.horseshoe_scale.is_finite()) {
            return bad("horseshoe_scale must be positive".into());
        }
        let rows = &self.emission_prior_pseudocounts;
        if rows.len() != num_states || rows.iter().any(|r| r.len() != num_states) {
            return bad(format!(
                "emission_prior_pseudocounts must be {num_states}x{num_states}"
            ));
        }
        if self.initial_prior_pseudocounts.len() != num_states {
            return bad(format!(
                "initial_prior_pseudocounts must have {num_states} entries"
            ));
        }
        let all_positive = rows
            .iter()
            .flatten()
            .chain(&self.initial_prior_pseudocounts)
            .all(|&a| a > 0.0 && a.is_finite());
        if !all_positive {
            return bad("pseudo-counts must be positive".into());
        }
        Ok(())
    }
}

/// Latent states `[patient][chain][month]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentTrajectories {
    num_patients: usize,
    num_chains: usize,
    num_months: usize,
    states: Vec<State>,
}

impl LatentTrajectories {
    /// Every cell at `baseline`.
    pub fn baseline(num_patients: usize, num_chains: usize, num_months: usize, baseline: usize) -> Self {
        Self {
            num_patients,
            num_chains,
            num_months,
            states: vec![baseline as State; num_patients * num_chains * num_months],
        }
    }

    /// Observed cells copied; gaps carry the last observation forward,
    /// leading gaps take the first observation, unobserved series stay at
    /// baseline.
    pub fn from_observations(data: &CohortDataset, baseline: usize) -> Self {
        let c = data.num_sites();
        let m = data.num_months();
        let mut traj = Self::baseline(data.num_patients(), c, m, baseline);
        for p in 0..data.num_patients() {
            for chain in 0..c {
                let series = data.series(p, chain);
                let Some(first) = series.iter().flatten().next().copied() else {
                    continue;
                };
                let mut last = first;
                for (t, o) in series.iter().enumerate() {
                    if let Some(x) = o {
                        last = *x;
                    }
                    traj.set(p, chain, t, last);
                }
            }
        }
        traj
    }

    pub fn num_patients(&self) -> usize {
        self.num_patients
    }

    pub fn num_chains(&self) -> usize {
        self.num_chains
    }

    pub fn num_months(&self) -> usize {
        self.num_months
    }

    #[inline]
    pub fn get(&self, patient: usize, chain: usize, month: usize) -> State {
        self.states[(patient * self.num_chains + chain) * self.num_months + month]
    }

    pub fn set(&mut self, patient: usize, chain: usize, month: usize, state: State) {
        self.states[(patient * self.num_chains + chain) * self.num_months + month] = state;
    }

    pub fn series(&self, patient: usize, chain: usize) -> &[State] {
        let start = (patient * self.num_chains + chain) * self.num_months;
        &self.states[start..start + self.num_months]
    }

    /// One patient's `[chain][month]` block.
    pub fn patient_block(&self, patient: usize) -> &[State] {
        let len = self.num_chains * self.num_months;
        &self.states[patient * len..(patient + 1) * len]
    }

    pub fn patient_block_mut(&mut self, patient: usize) -> &mut [State] {
        let len = self.num_chains * self.num_months;
        &mut self.states[patient * len..(patient + 1) * len]
    }

    fn blocks_mut(&mut self) -> rayon::slice::ChunksMut<'_, State> {
        let len = (self.num_chains * self.num_months).max(1);
        self.states.par_chunks_mut(len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Post-warm-up MH acceptance rate per β block (one block per chain).
    pub acceptance_rate: Vec<f64>,
    pub warmup_acceptance_rate: Vec<f64>,
    /// Final proposal scale multiplier per block.
    pub proposal_scale: Vec<f64>,
    /// Complete-data log posterior of each retained draw.
    pub log_posterior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub space: StateSpace,
    pub draws: Vec<ChmmParams>,
    pub diagnostics: Diagnostics,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Runs the sampler with the binary application state space (clear = 0,
/// colonized = 1) over the dataset's sites.
pub fn run_mcmc(data: &CohortDataset, config: &McmcConfig) -> Result<PosteriorSamples> {
    let space = StateSpace::new(data.sites().to_vec(), 2, 0)?;
    run_mcmc_in(&space, data, config)
}

pub fn run_mcmc_in(
    space: &StateSpace,
    data: &CohortDataset,
    config: &McmcConfig,
) -> Result<PosteriorSamples> {
    Sampler::new(space, data, config)?.run()
}

struct Sampler<'a> {
    space: &'a StateSpace,
    data: &'a CohortDataset,
    config: &'a McmcConfig,
    params: ChmmParams,
    horseshoe: Vec<HorseshoeState>,
    proposals: Vec<ProposalState>,
    traj: LatentTrajectories,
    rng: ChaCha8Rng,
    patient_rngs: Vec<ChaCha8Rng>,
}

impl<'a> Sampler<'a> {
    fn new(space: &'a StateSpace, data: &'a CohortDataset, config: &'a McmcConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(ChmmError::EmptyDataset);
        }
        config.validate(space.num_states())?;
        data.check_compatible(space)?;
        // the sampler relies on tabulated transitions
        TransitionTable::new(space, &BetaParams::zeros(space))?;

        let block_len = BetaParams::block_len(space.num_chains(), space.num_states());
        let interaction_len = block_len - space.num_states() * (space.num_states() - 1);
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let patient_rngs = (0..data.num_patients())
            .map(|p| {
                let mut r = ChaCha8Rng::seed_from_u64(config.rng_seed);
                r.set_stream(p as u64 + 1);
                r
            })
            .collect();
        let mut params = ChmmParams::neutral(space);
        params.initials = vec![InitialDistribution::uniform(space.num_states()); space.num_chains()];
        Ok(Self {
            space,
            data,
            config,
            params,
            horseshoe: vec![HorseshoeState::new(interaction_len); space.num_chains()],
            proposals: vec![
                ProposalState::isotropic(block_len, config.proposal_init_scale);
                space.num_chains()
            ],
            traj: LatentTrajectories::from_observations(data, space.baseline()),
            rng,
            patient_rngs,
        })
    }

    fn run(mut self) -> Result<PosteriorSamples> {
        let cfg = self.config;
        let c = self.space.num_chains();
        let window = cfg.adaptation_window;
        let record_from = cfg.warmup / 4;
        let min_recorded = (10 * self.proposals[0].dim()).max(100) as u64;

        let mut draws = Vec::with_capacity(cfg.retained());
        let mut log_posterior = Vec::with_capacity(cfg.retained());
        let mut window_accepts = vec![0usize; c];
        let mut warm_accepts = vec![0usize; c];
        let mut post_accepts = vec![0usize; c];

        let mut stats = SufficientStats::compute(self.space, &self.traj, self.data);
        for iter in 0..cfg.num_samples {
            let warming = iter < cfg.warmup;
            let adapting = warming || !cfg.adapt_during_warmup_only;

            for chain in 0..c {
                let accepted = self.update_parameters(chain, &stats)?;
                if warming {
                    warm_accepts[chain] += usize::from(accepted);
                } else {
                    post_accepts[chain] += usize::from(accepted);
                }
                window_accepts[chain] += usize::from(accepted);
            }
            let table = TransitionTable::new(self.space, &self.params.beta)?;
            for chain in 0..c {
                self.update_trajectories(chain, &table)?;
            }
            stats = SufficientStats::compute(self.space, &self.traj, self.data);

            if adapting {
                let window_done = (iter + 1) % window == 0;
                for chain in 0..c {
                    let proposal = &mut self.proposals[chain];
                    if iter >= record_from {
                        proposal.record(self.params.beta.block(chain));
                    }
                    if window_done {
                        let rate = window_accepts[chain] as f64 / window as f64;
                        *proposal = adapt_proposal(proposal, rate, cfg.target_acceptance);
                        if proposal.recorded() >= min_recorded {
                            proposal.refresh_covariance();
                        }
                    }
                }
            }
            if (iter + 1) % window == 0 {
                window_accepts.iter_mut().for_each(|a| *a = 0);
            }

            if !warming {
                log_posterior.push(self.log_posterior(&stats, &table));
                draws.push(self.params.clone());
            }
        }

        let warm_n = cfg.warmup.max(1) as f64;
        let post_n = cfg.retained() as f64;
        Ok(PosteriorSamples {
            space: self.space.clone(),
            draws,
            diagnostics: Diagnostics {
                acceptance_rate: post_accepts.iter().map(|&a| a as f64 / post_n).collect(),
                warmup_acceptance_rate: warm_accepts.iter().map(|&a| a as f64 / warm_n).collect(),
                proposal_scale: self.proposals.iter().map(|p| p.scale()).collect(),
                log_posterior,
            },
        })
    }

    /// π₀, E, Horseshoe scales and β for one chain. Returns the MH
    /// acceptance flag.
    fn update_parameters(&mut self, chain: usize, stats: &SufficientStats) -> Result<bool> {
        let cfg = self.config;
        let alpha = conjugate::initial_from_stats(stats, chain, &cfg.initial_prior_pseudocounts);
        self.params.initials[chain] =
            InitialDistribution::new(sample_dirichlet(&alpha, &mut self.rng)?)?;
        let alpha = conjugate::emission_from_stats(stats, chain, &cfg.emission_prior_pseudocounts);
        self.params.emissions[chain] = conjugate::emission_from_alpha(&alpha, &mut self.rng)?;

        let split = self.params.beta.intercept_len();
        let block = self.params.beta.block(chain).to_vec();
        self.horseshoe[chain] = update_horseshoe(
            &block[split..],
            &self.horseshoe[chain],
            cfg.horseshoe_scale,
            &mut self.rng,
        );
        let target = BetaTarget {
            space: self.space,
            beta: &self.params.beta,
            target: chain,
            counts: stats.transition_counts(chain),
            horseshoe: &self.horseshoe[chain],
            intercept_sd: cfg.prior_beta0_sd,
            horseshoe_scale: cfg.horseshoe_scale,
        };
        let outcome = mh_update_beta(&target, &block, &self.proposals[chain], &mut self.rng)?;
        if outcome.accepted {
            self.params.beta.set_block(chain, outcome.block)?;
        }
        Ok(outcome.accepted)
    }

    fn update_trajectories(&mut self, chain: usize, table: &TransitionTable) -> Result<()> {
        let space = self.space;
        let data = self.data;
        let params = &self.params;
        let months = data.num_months();
        self.traj
            .blocks_mut()
            .zip(self.patient_rngs.par_iter_mut())
            .enumerate()
            .try_for_each(|(p, (states, rng))| {
                ffbs_sample(
                    space,
                    table,
                    params,
                    chain,
                    p,
                    states,
                    data.patient_block(p),
                    months,
                    rng,
                )
            })
    }

    /// Complete-data log posterior (up to a constant) of the current state.
    fn log_posterior(&self, stats: &SufficientStats, table: &TransitionTable) -> f64 {
        let cfg = self.config;
        let k = self.space.num_states();
        let mut lp = 0.0;
        for chain in 0..self.space.num_chains() {
            let init = self.params.initials[chain].probs();
            for (s, n) in stats.initial_counts(chain).iter().enumerate() {
                lp += xlogy(*n + cfg.initial_prior_pseudocounts[s] - 1.0, init[s]);
            }
            let e = self.params.emissions[chain].as_slice();
            for (i, n) in stats.emission_counts(chain).iter().enumerate() {
                lp += xlogy(*n + cfg.emission_prior_pseudocounts[i / k][i % k] - 1.0, e[i]);
            }
            for (i, n) in stats.transition_counts(chain).iter().enumerate() {
                if *n > 0.0 {
                    let code = i / k;
                    let from = self.space.decode(code)[chain] as usize;
                    lp += n * table.prob(chain, code, from, i % k).ln();
                }
            }
            let block = self.params.beta.block(chain);
            let split = self.params.beta.intercept_len();
            let sd2 = cfg.prior_beta0_sd * cfg.prior_beta0_sd;
            lp += block[..split].iter().map(|b| -0.5 * b * b / sd2).sum::<f64>();
            lp += self.horseshoe[chain].log_prior(&block[split..], cfg.horseshoe_scale);
        }
        lp
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Arm, Patient};

    fn small_dataset() -> CohortDataset {
        let patients: Vec<Patient> = (0..30)
            .map(|i| Patient {
                id: format!("p{i}"),
                arm: Arm::Education,
            })
            .collect();
        let mut d = CohortDataset::empty_grid(vec!["a".into(), "b".into()], 4, patients).unwrap();
        for p in 0..30 {
            for s in 0..2 {
                for t in [0, 1, 3] {
                    d.set(p, s, t, Some(((p + s + t) % 3 == 0) as u8));
                }
            }
        }
        d
    }

    fn quick_config(seed: u64) -> McmcConfig {
        McmcConfig {
            num_samples: 300,
            warmup: 100,
            rng_seed: seed,
            ..McmcConfig::default()
        }
    }

    #[test]
    fn default_config_has_expected_values() {
        let c = McmcConfig::default();
        assert_eq!((c.num_samples, c.warmup, c.retained()), (50_000, 25_000, 25_000));
        assert_eq!(c.proposal_init_scale, 0.01);
        assert_eq!(c.target_acceptance, 0.23);
        assert_eq!(c.horseshoe_scale, 0.25);
        assert_eq!(c.prior_beta0_sd, 1.0);
        assert!(c.validate(2).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = McmcConfig::default();
        c.num_samples = 0;
        assert!(matches!(c.validate(2), Err(ChmmError::InvalidConfig(_))));
        let c = McmcConfig {
            warmup: 50_000,
            ..McmcConfig::default()
        };
        assert!(c.validate(2).is_err());
        let c = McmcConfig {
            horseshoe_scale: 0.0,
            ..McmcConfig::default()
        };
        assert!(c.validate(2).is_err());
        assert!(McmcConfig::default().validate(3).is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let d = CohortDataset::empty_grid(vec!["a".into()], 3, vec![]).unwrap();
        assert!(matches!(
            run_mcmc(&d, &quick_config(1)),
            Err(ChmmError::EmptyDataset)
        ));
    }

    #[test]
    fn retains_post_warmup_draws() {
        let samples = run_mcmc(&small_dataset(), &quick_config(3)).unwrap();
        assert_eq!(samples.len(), 200);
        assert_eq!(samples.diagnostics.log_posterior.len(), 200);
        for d in &samples.draws {
            d.validate(&samples.space).unwrap();
        }
        for r in &samples.diagnostics.acceptance_rate {
            assert!((0.0..=1.0).contains(r));
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let d = small_dataset();
        let a = run_mcmc(&d, &quick_config(42)).unwrap();
        let b = run_mcmc(&d, &quick_config(42)).unwrap();
        assert_eq!(a, b);
        let c = run_mcmc(&d, &quick_config(43)).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn initial_trajectories_fill_gaps() {
        let patients = vec![Patient {
            id: "x".into(),
            arm: Arm::Education,
        }];
        let mut d = CohortDataset::empty_grid(vec!["a".into(), "b".into()], 5, patients).unwrap();
        d.set(0, 0, 1, Some(1));
        d.set(0, 0, 3, Some(0));
        let t = LatentTrajectories::from_observations(&d, 0);
        assert_eq!(t.series(0, 0), &[1, 1, 1, 0, 0]);
        assert_eq!(t.series(0, 1), &[0, 0, 0, 0, 0]);
    }
}
