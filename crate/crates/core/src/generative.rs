//! Forward simulation of cohorts and posterior predictive carriage curves.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, CohortDataset, Observation, Patient};
use crate::error::{ChmmError, Result};
use crate::model::{ChmmParams, InitialDistribution, State, StateSpace, TransitionTable};
use crate::sampler::{LatentTrajectories, PosteriorSamples};
use crate::stats::Summary;

/// Label used for the any-site row of a curve.
pub const TOTAL_LABEL: &str = "total";

/// Enrollment plus the three follow-up visits.
pub const VISIT_MONTHS: [usize; 4] = [0, 1, 3, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSource {
    /// Use each parameter set's own initial distributions.
    Params,
    /// Fixed per-chain initial distributions.
    Explicit(Vec<InitialDistribution>),
}

impl InitialSource {
    /// Per-site observed state frequencies at month 0 (uniform where a
    /// site has no month-0 observations).
    pub fn empirical(space: &StateSpace, data: &CohortDataset) -> Self {
        let k = space.num_states();
        let dists = (0..data.num_sites())
            .map(|site| {
                let mut counts = vec![0.0; k];
                for p in 0..data.num_patients() {
                    if let Some(x) = data.get(p, site, 0) {
                        counts[x as usize] += 1.0;
                    }
                }
                let total: f64 = counts.iter().sum();
                if total == 0.0 {
                    InitialDistribution::uniform(k)
                } else {
                    InitialDistribution::new(counts.iter().map(|c| c / total).collect())
                        .expect("frequencies are a distribution")
                }
            })
            .collect();
        InitialSource::Explicit(dists)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub num_patients: usize,
    /// Last simulated month; the grid is `0..=horizon`.
    pub horizon: usize,
    #[serde(default = "default_initial")]
    pub initial: InitialSource,
    /// Months at which swabs are emitted.
    pub schedule: BTreeSet<usize>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_arm")]
    pub arm: Arm,
}

fn default_initial() -> InitialSource {
    InitialSource::Params
}

fn default_arm() -> Arm {
    Arm::Education
}

impl SimulationSpec {
    /// Months 0..=6 with swabs at enrollment and months 1, 3, 6.
    pub fn visit_schedule(num_patients: usize, rng_seed: u64) -> Self {
        Self {
            num_patients,
            horizon: 6,
            initial: InitialSource::Params,
            schedule: VISIT_MONTHS.into_iter().collect(),
            rng_seed,
            arm: Arm::Education,
        }
    }

    pub fn num_months(&self) -> usize {
        self.horizon + 1
    }

    pub fn validate(&self, space: &StateSpace) -> Result<()> {
        if self.horizon < 1 {
            return Err(ChmmError::InvalidParameter("horizon must be at least 1".into()));
        }
        if let Some(m) = self.schedule.iter().find(|&&m| m > self.horizon) {
            return Err(ChmmError::InvalidParameter(format!(
                "scheduled month {m} is beyond the horizon {}",
                self.horizon
            )));
        }
        if let InitialSource::Explicit(dists) = &self.initial {
            if dists.len() != space.num_chains()
                || dists.iter().any(|d| d.probs().len() != space.num_states())
            {
                return Err(ChmmError::InvalidParameter(
                    "explicit initial distributions do not match the state space".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Derives the seed of sub-stream `index` from `seed` (SplitMix64 finalizer).
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> State {
    let mut u: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i as State;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as State
}

/// Simulates a cohort: initial states from π₀, every later month from the
/// coupled transitions given all chains' previous states, swabs through
/// the emission matrices at scheduled months only.
pub fn simulate_cohort(
    space: &StateSpace,
    params: &ChmmParams,
    spec: &SimulationSpec,
) -> Result<(LatentTrajectories, CohortDataset)> {
    simulate_with_clearance(space, params, spec, &vec![false; space.num_chains()])
}

/// As [`simulate_cohort`], but every chain flagged in `cleared` is forced
/// to the baseline state after each transition (months ≥ 1).
pub fn simulate_with_clearance(
    space: &StateSpace,
    params: &ChmmParams,
    spec: &SimulationSpec,
    cleared: &[bool],
) -> Result<(LatentTrajectories, CohortDataset)> {
    params.validate(space)?;
    spec.validate(space)?;
    if cleared.len() != space.num_chains() {
        return Err(ChmmError::InvalidParameter(
            "one clearance flag per chain required".into(),
        ));
    }
    let table = TransitionTable::new(space, &params.beta)?;
    let c = space.num_chains();
    let months = spec.num_months();
    let initials: &[InitialDistribution] = match &spec.initial {
        InitialSource::Params => &params.initials,
        InitialSource::Explicit(d) => d,
    };
    let baseline = space.baseline() as State;

    let per_patient: Vec<(Vec<State>, Vec<Observation>)> = (0..spec.num_patients)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
            rng.set_stream(p as u64);
            let mut states = vec![0 as State; c * months];
            let mut obs = vec![None; c * months];
            let mut prev = vec![0 as State; c];
            for chain in 0..c {
                prev[chain] = draw_from(initials[chain].probs(), &mut rng);
                states[chain * months] = prev[chain];
            }
            for t in 1..months {
                let code = space.encode(&prev);
                for chain in 0..c {
                    let row = table.row(chain, code, prev[chain] as usize);
                    let s = draw_from(row, &mut rng);
                    states[chain * months + t] = if cleared[chain] { baseline } else { s };
                }
                for chain in 0..c {
                    prev[chain] = states[chain * months + t];
                }
            }
            for &t in &spec.schedule {
                for chain in 0..c {
                    let truth = states[chain * months + t] as usize;
                    obs[chain * months + t] =
                        Some(draw_from(params.emissions[chain].row(truth), &mut rng));
                }
            }
            (states, obs)
        })
        .collect();

    let mut traj = LatentTrajectories::baseline(spec.num_patients, c, months, space.baseline());
    let mut all_obs = Vec::with_capacity(spec.num_patients * c * months);
    for (p, (states, obs)) in per_patient.into_iter().enumerate() {
        traj.patient_block_mut(p).copy_from_slice(&states);
        all_obs.extend(obs);
    }
    let patients = (0..spec.num_patients)
        .map(|p| Patient {
            id: format!("sim{p:05}"),
            arm: spec.arm,
        })
        .collect();
    let data = CohortDataset::new(space.chain_labels().to_vec(), months, patients, all_obs)?;
    Ok((traj, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// Fraction of swabs positive (comparable with observed data).
    Observed,
    /// Fraction of patients truly colonized.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveCell {
    pub site: String,
    pub month: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarriageCurve {
    pub measure: Measure,
    pub cells: Vec<CurveCell>,
}

impl CarriageCurve {
    pub fn get(&self, site: &str, month: usize) -> Option<&CurveCell> {
        self.cells.iter().find(|c| c.site == site && c.month == month)
    }

    pub fn months(&self) -> BTreeSet<usize> {
        self.cells.iter().map(|c| c.month).collect()
    }
}

/// Per site and month, the fraction of non-missing observations that are
/// positive. Cells without observations are left out.
pub fn observed_curve(data: &CohortDataset, positive: State) -> CarriageCurve {
    let mut cells = Vec::new();
    for (site, label) in data.sites().iter().enumerate() {
        for month in 0..data.num_months() {
            let mut hits = 0usize;
            let mut total = 0usize;
            for p in 0..data.num_patients() {
                if let Some(x) = data.get(p, site, month) {
                    total += 1;
                    hits += usize::from(x == positive);
                }
            }
            if total > 0 {
                let v = hits as f64 / total as f64;
                cells.push(CurveCell {
                    site: label.clone(),
                    month,
                    mean: v,
                    lower: v,
                    upper: v,
                });
            }
        }
    }
    CarriageCurve {
        measure: Measure::Observed,
        cells,
    }
}

/// Per-(site, month) proportions of one simulated cohort, in a fixed order:
/// sites (then the total row if requested) × scheduled months.
fn cohort_proportions(
    space: &StateSpace,
    traj: &LatentTrajectories,
    data: &CohortDataset,
    schedule: &BTreeSet<usize>,
    measure: Measure,
    include_total: bool,
) -> Vec<f64> {
    let c = space.num_chains();
    let baseline = space.baseline() as State;
    let n = traj.num_patients().max(1) as f64;
    let positive = |p: usize, chain: usize, t: usize| -> bool {
        match measure {
            Measure::Latent => traj.get(p, chain, t) != baseline,
            Measure::Observed => data.get(p, chain, t).is_some_and(|x| x != baseline),
        }
    };
    let mut out = Vec::with_capacity((c + 1) * schedule.len());
    for chain in 0..c {
        for &t in schedule {
            let hits = (0..traj.num_patients()).filter(|&p| positive(p, chain, t)).count();
            out.push(hits as f64 / n);
        }
    }
    if include_total {
        for &t in schedule {
            let hits = (0..traj.num_patients())
                .filter(|&p| (0..c).any(|chain| positive(p, chain, t)))
                .count();
            out.push(hits as f64 / n);
        }
    }
    out
}

/// Indices `0, thin, 2·thin, ...` into a draw list.
pub fn thinned_indices(len: usize, thin: usize) -> Vec<usize> {
    (0..len).step_by(thin.max(1)).collect()
}

/// Simulates one cohort per draw and returns, for each draw, the
/// proportions at `months` in the layout of `cohort_proportions`. Draw `i`
/// uses sub-stream `i` of `spec.rng_seed`, so protocols evaluated with the
/// same spec share random numbers.
pub(crate) fn per_draw_proportions(
    space: &StateSpace,
    draws: &[ChmmParams],
    cleared: &[bool],
    spec: &SimulationSpec,
    months: &BTreeSet<usize>,
    measure: Measure,
    include_total: bool,
) -> Result<Vec<Vec<f64>>> {
    if draws.is_empty() {
        return Err(ChmmError::InvalidParameter("no posterior draws".into()));
    }
    if let Some(m) = months.iter().find(|&&m| m > spec.horizon) {
        return Err(ChmmError::InvalidParameter(format!(
            "month {m} is beyond the horizon {}",
            spec.horizon
        )));
    }
    draws
        .par_iter()
        .enumerate()
        .map(|(i, params)| {
            let mut draw_spec = spec.clone();
            draw_spec.rng_seed = stream_seed(spec.rng_seed, i as u64);
            let (traj, data) = simulate_with_clearance(space, params, &draw_spec, cleared)?;
            Ok(cohort_proportions(space, &traj, &data, months, measure, include_total))
        })
        .collect()
}

/// Summarizes per-draw proportions at the scheduled months into a curve.
pub(crate) fn predictive_curve(
    space: &StateSpace,
    draws: &[ChmmParams],
    cleared: &[bool],
    spec: &SimulationSpec,
    measure: Measure,
    include_total: bool,
) -> Result<CarriageCurve> {
    let per_draw =
        per_draw_proportions(space, draws, cleared, spec, &spec.schedule, measure, include_total)?;
    let mut labels: Vec<String> = space.chain_labels().to_vec();
    if include_total {
        labels.push(TOTAL_LABEL.to_string());
    }
    let mut cells = Vec::new();
    let mut idx = 0;
    for label in &labels {
        for &month in &spec.schedule {
            let values: Vec<f64> = per_draw.iter().map(|v| v[idx]).collect();
            let s = Summary::of(&values);
            cells.push(CurveCell {
                site: label.clone(),
                month,
                mean: s.mean,
                lower: s.lower,
                upper: s.upper,
            });
            idx += 1;
        }
    }
    Ok(CarriageCurve { measure, cells })
}

/// Posterior predictive carriage curve with a 90% band, from every
/// `thin`-th retained draw.
pub fn posterior_predictive_curve(
    samples: &PosteriorSamples,
    spec: &SimulationSpec,
    thin: usize,
    measure: Measure,
) -> Result<CarriageCurve> {
    if samples.is_empty() {
        return Err(ChmmError::InvalidParameter("posterior has no draws".into()));
    }
    let draws: Vec<ChmmParams> = thinned_indices(samples.len(), thin)
        .into_iter()
        .map(|i| samples.draws[i].clone())
        .collect();
    predictive_curve(
        &samples.space,
        &draws,
        &vec![false; samples.space.num_chains()],
        spec,
        measure,
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BetaParams, EmissionMatrix};
    use crate::oracle::build_joint;

    fn two_chain_params() -> (StateSpace, ChmmParams) {
        let space = StateSpace::anonymous(2, 2, 0).unwrap();
        let beta = BetaParams::from_blocks(
            &space,
            vec![vec![0.6, -0.4, -0.5, 0.3], vec![0.2, -0.7, 0.4, -0.2]],
        )
        .unwrap();
        let params = ChmmParams {
            beta,
            emissions: vec![EmissionMatrix::from_accuracy(0, 0.85, 0.95).unwrap(); 2],
            initials: vec![
                InitialDistribution::new(vec![0.4, 0.6]).unwrap(),
                InitialDistribution::new(vec![0.7, 0.3]).unwrap(),
            ],
        };
        (space, params)
    }

    #[test]
    fn absorbing_transitions_keep_initial_state() {
        let space = StateSpace::anonymous(2, 2, 0).unwrap();
        let mut beta = BetaParams::zeros(&space);
        for c in 0..2 {
            beta.set_intercept_row(c, 0, &[30.0]).unwrap();
            beta.set_intercept_row(c, 1, &[-30.0]).unwrap();
        }
        let params = ChmmParams {
            beta,
            emissions: vec![EmissionMatrix::identity(2); 2],
            initials: vec![InitialDistribution::uniform(2); 2],
        };
        let spec = SimulationSpec::visit_schedule(500, 3);
        let (traj, data) = simulate_cohort(&space, &params, &spec).unwrap();
        for p in 0..500 {
            for c in 0..2 {
                let s = traj.series(p, c);
                assert!(s.iter().all(|&x| x == s[0]));
                assert_eq!(data.get(p, c, 3), Some(s[0]));
                assert_eq!(data.get(p, c, 2), None);
            }
        }
    }

    #[test]
    fn uniform_parameters_give_half_colonized() {
        let space = StateSpace::application();
        let params = ChmmParams::neutral(&space);
        let spec = SimulationSpec::visit_schedule(10_000, 5);
        let (traj, _) = simulate_cohort(&space, &params, &spec).unwrap();
        for c in 0..4 {
            let frac =
                (0..10_000).filter(|&p| traj.get(p, c, 6) == 1).count() as f64 / 10_000.0;
            // sd 0.005
            assert!((frac - 0.5).abs() < 0.02, "{frac}");
        }
    }

    #[test]
    fn step_frequencies_match_joint_transition() {
        let (space, params) = two_chain_params();
        let joint = build_joint(&space, &params).unwrap();
        let spec = SimulationSpec {
            num_patients: 20_000,
            horizon: 5,
            initial: InitialSource::Params,
            schedule: BTreeSet::new(),
            rng_seed: 17,
            arm: Arm::Education,
        };
        let (traj, _) = simulate_cohort(&space, &params, &spec).unwrap();
        let mut counts = vec![0.0f64; 16];
        for p in 0..spec.num_patients {
            for t in 1..6 {
                let from = space.encode(&[traj.get(p, 0, t - 1), traj.get(p, 1, t - 1)]);
                let to = space.encode(&[traj.get(p, 0, t), traj.get(p, 1, t)]);
                counts[from * 4 + to] += 1.0;
            }
        }
        // 100,000 steps in total
        for from in 0..4 {
            let row_total: f64 = counts[from * 4..from * 4 + 4].iter().sum();
            let mut chi2 = 0.0;
            for to in 0..4 {
                let freq = counts[from * 4 + to] / row_total;
                assert!((freq - joint.transition(from, to)).abs() < 0.01);
                let expected = row_total * joint.transition(from, to);
                chi2 += (counts[from * 4 + to] - expected).powi(2) / expected;
            }
            // χ²(3) critical value at α = 0.01
            assert!(chi2 < 11.345, "row {from}: χ² = {chi2}");
        }
    }

    #[test]
    fn observed_positivity_mixes_sensitivity_and_specificity() {
        let (space, params) = two_chain_params();
        let spec = SimulationSpec::visit_schedule(40_000, 23);
        let (traj, data) = simulate_cohort(&space, &params, &spec).unwrap();
        for c in 0..2 {
            let n = spec.num_patients as f64;
            let colonized = (0..spec.num_patients).filter(|&p| traj.get(p, c, 3) == 1).count() as f64 / n;
            let positive =
                (0..spec.num_patients).filter(|&p| data.get(p, c, 3) == Some(1)).count() as f64 / n;
            let expected = 0.85 * colonized + 0.05 * (1.0 - colonized);
            // binomial sd ≈ 0.0025
            assert!((positive - expected).abs() < 0.01, "{positive} vs {expected}");
        }
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let (space, params) = two_chain_params();
        let spec = SimulationSpec::visit_schedule(300, 99);
        assert_eq!(
            simulate_cohort(&space, &params, &spec).unwrap(),
            simulate_cohort(&space, &params, &spec).unwrap()
        );
    }

    #[test]
    fn spec_validation() {
        let (space, params) = two_chain_params();
        let mut spec = SimulationSpec::visit_schedule(10, 0);
        spec.schedule.insert(9);
        assert!(simulate_cohort(&space, &params, &spec).is_err());
        let mut spec = SimulationSpec::visit_schedule(10, 0);
        spec.horizon = 0;
        spec.schedule = BTreeSet::new();
        assert!(simulate_cohort(&space, &params, &spec).is_err());
    }

    #[test]
    fn observed_curve_cells() {
        let patients = (0..10)
            .map(|i| Patient {
                id: i.to_string(),
                arm: Arm::Education,
            })
            .collect();
        let mut d = CohortDataset::empty_grid(vec!["nares".into()], 4, patients).unwrap();
        for p in 0..10 {
            d.set(p, 0, 0, Some(1));
            d.set(p, 0, 1, Some(u8::from(p < 6)));
        }
        let curve = observed_curve(&d, 1);
        assert_eq!(curve.get("nares", 0).unwrap().mean, 1.0);
        assert!((curve.get("nares", 1).unwrap().mean - 0.6).abs() < 1e-15);
        assert!(curve.get("nares", 2).is_none());
    }

    #[test]
    fn single_draw_band_is_a_point() {
        let (space, params) = two_chain_params();
        let samples = PosteriorSamples {
            space: space.clone(),
            draws: vec![params],
            diagnostics: crate::sampler::Diagnostics {
                acceptance_rate: vec![],
                warmup_acceptance_rate: vec![],
                proposal_scale: vec![],
                log_posterior: vec![],
            },
        };
        let spec = SimulationSpec::visit_schedule(200, 1);
        let curve = posterior_predictive_curve(&samples, &spec, 25, Measure::Observed).unwrap();
        assert_eq!(curve.months(), [0, 1, 3, 6].into_iter().collect());
        for cell in &curve.cells {
            assert_eq!(cell.lower, cell.upper);
            assert_eq!(cell.mean, cell.lower);
        }
    }

    #[test]
    fn empirical_initial_frequencies() {
        let space = StateSpace::anonymous(1, 2, 0).unwrap();
        let patients = (0..4)
            .map(|i| Patient {
                id: i.to_string(),
                arm: Arm::Education,
            })
            .collect();
        let mut d = CohortDataset::empty_grid(vec!["c0".into()], 2, patients).unwrap();
        d.set(0, 0, 0, Some(1));
        d.set(1, 0, 0, Some(0));
        d.set(2, 0, 0, Some(1));
        let InitialSource::Explicit(dists) = InitialSource::empirical(&space, &d) else {
            panic!("expected explicit");
        };
        assert!((dists[0].probs()[1] - 2.0 / 3.0).abs() < 1e-15);
    }
}
