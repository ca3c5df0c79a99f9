//! Posterior summaries: persistence, transmission graphs, hypothetical
//! protocols and therapy contributions.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CohortDataset;
use crate::error::{ChmmError, Result};
use crate::generative::{per_draw_proportions, predictive_curve, CarriageCurve, Measure, SimulationSpec};
use crate::model::{build_transition, ChmmParams, State, StateSpace};
use crate::sampler::PosteriorSamples;
use crate::stats::Summary;

/// Default edge inclusion threshold of the transmission graph.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceEntry {
    pub site: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceSummary {
    pub entries: Vec<PersistenceEntry>,
}

/// Probability that `site` stays colonized for one month while every
/// other site is clear, for each draw.
pub fn persistence_draws(samples: &PosteriorSamples, site: usize) -> Result<Vec<f64>> {
    let space = &samples.space;
    let colonized = space.colonized_state()?;
    if site >= space.num_chains() {
        return Err(ChmmError::InvalidParameter(format!("no chain {site}")));
    }
    let prev = vec![space.baseline() as State; space.num_chains()];
    samples
        .draws
        .iter()
        .map(|d| Ok(build_transition(&d.beta, site, &prev)?.get(colonized, colonized)))
        .collect()
}

pub fn persistence(samples: &PosteriorSamples, site: usize) -> Result<PersistenceEntry> {
    if samples.is_empty() {
        return Err(ChmmError::InvalidParameter("posterior has no draws".into()));
    }
    Ok(PersistenceEntry {
        site: samples.space.chain_labels()[site].clone(),
        summary: Summary::of(&persistence_draws(samples, site)?),
    })
}

pub fn persistence_summary(samples: &PosteriorSamples) -> Result<PersistenceSummary> {
    let entries = (0..samples.space.num_chains())
        .map(|site| persistence(samples, site))
        .collect::<Result<_>>()?;
    Ok(PersistenceSummary { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionEdge {
    pub source: String,
    pub target: String,
    /// Pooled observed prevalence at the source.
    pub source_prevalence: f64,
    pub probability: Summary,
    /// Expected proportion: probability × source prevalence.
    pub weight: Summary,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionGraph {
    pub threshold: f64,
    /// Every directed pair with an observed source, included or not.
    pub edges: Vec<TransmissionEdge>,
    /// Sources without a single observation; their edges are absent.
    pub unobserved_sources: Vec<String>,
}

impl TransmissionGraph {
    pub fn included_edges(&self) -> impl Iterator<Item = &TransmissionEdge> {
        self.edges.iter().filter(|e| e.included)
    }

    /// Same graph, re-filtered at another threshold.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let mut g = self.clone();
        g.threshold = threshold;
        for e in &mut g.edges {
            e.included = e.weight.mean >= threshold;
        }
        g
    }

    /// Graphviz rendering of the included edges.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph transmission {\n");
        let mut nodes: BTreeSet<&str> = BTreeSet::new();
        for e in &self.edges {
            nodes.insert(&e.source);
            nodes.insert(&e.target);
        }
        for n in &self.unobserved_sources {
            nodes.insert(n);
        }
        for n in nodes {
            if self.unobserved_sources.iter().any(|u| u == n) {
                out.push_str(&format!("  \"{n}\" [style=dashed];\n"));
            } else {
                out.push_str(&format!("  \"{n}\";\n"));
            }
        }
        for e in self.included_edges() {
            out.push_str(&format!(
                "  \"{}\" -> \"{}\" [label=\"{:.3} [{:.3}, {:.3}]\", weight={:.6}];\n",
                e.source, e.target, e.weight.mean, e.weight.lower, e.weight.upper, e.weight.mean
            ));
        }
        out.push_str("}\n");
        out
    }
}

/// Per-draw probability that `target` becomes colonized when only `source`
/// was colonized the month before.
pub fn transmission_probability_draws(
    samples: &PosteriorSamples,
    source: usize,
    target: usize,
) -> Result<Vec<f64>> {
    let space = &samples.space;
    let colonized = space.colonized_state()?;
    if source == target || source >= space.num_chains() || target >= space.num_chains() {
        return Err(ChmmError::InvalidParameter(format!(
            "invalid transmission pair {source} -> {target}"
        )));
    }
    let mut prev = vec![space.baseline() as State; space.num_chains()];
    prev[source] = colonized as State;
    samples
        .draws
        .iter()
        .map(|d| Ok(build_transition(&d.beta, target, &prev)?.get(space.baseline(), colonized)))
        .collect()
}

pub fn transmission_graph(
    samples: &PosteriorSamples,
    data: &CohortDataset,
    threshold: f64,
) -> Result<TransmissionGraph> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(ChmmError::InvalidParameter(format!(
            "threshold must be a finite non-negative number, got {threshold}"
        )));
    }
    if samples.is_empty() {
        return Err(ChmmError::InvalidParameter("posterior has no draws".into()));
    }
    let space = &samples.space;
    data.check_compatible(space)?;
    let colonized = space.colonized_state()? as State;
    let labels = space.chain_labels();
    let mut edges = Vec::new();
    let mut unobserved_sources = Vec::new();
    for source in 0..space.num_chains() {
        let Some(prevalence) = data.pooled_fraction(source, colonized) else {
            unobserved_sources.push(labels[source].clone());
            continue;
        };
        for target in (0..space.num_chains()).filter(|&t| t != source) {
            let probs = transmission_probability_draws(samples, source, target)?;
            let weights: Vec<f64> = probs.iter().map(|p| p * prevalence).collect();
            let weight = Summary::of(&weights);
            edges.push(TransmissionEdge {
                source: labels[source].clone(),
                target: labels[target].clone(),
                source_prevalence: prevalence,
                probability: Summary::of(&probs),
                weight,
                included: weight.mean >= threshold,
            });
        }
    }
    Ok(TransmissionGraph {
        threshold,
        edges,
        unobserved_sources,
    })
}

/// Where a site's parameters come from in a hypothetical protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteSource {
    Education,
    Decolonization,
    /// Decolonization parameters, with the site forced clear every month.
    ForcedClearance,
}

impl SiteSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteSource::Education => "edu",
            SiteSource::Decolonization => "decol",
            SiteSource::ForcedClearance => "clear",
        }
    }
}

impl fmt::Display for SiteSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SiteSource {
    type Err = ChmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "edu" | "education" => Ok(SiteSource::Education),
            "decol" | "decolonization" => Ok(SiteSource::Decolonization),
            "clear" | "clearance" | "forced_clearance" | "forced-clearance" => {
                Ok(SiteSource::ForcedClearance)
            }
            other => Err(ChmmError::InvalidParameter(format!(
                "unknown protocol source '{other}' (expected edu, decol or clear)"
            ))),
        }
    }
}

/// One parameter source per site, in chain order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtocolSpec {
    sites: Vec<String>,
    sources: Vec<SiteSource>,
}

impl ProtocolSpec {
    pub fn uniform(space: &StateSpace, source: SiteSource) -> Self {
        Self {
            sites: space.chain_labels().to_vec(),
            sources: vec![source; space.num_chains()],
        }
    }

    /// Parses `site=source,site=source,...`; every site exactly once.
    pub fn parse(space: &StateSpace, text: &str) -> Result<Self> {
        let mut sources: Vec<Option<SiteSource>> = vec![None; space.num_chains()];
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (site, source) = item.split_once('=').ok_or_else(|| {
                ChmmError::InvalidParameter(format!("expected site=source, got '{item}'"))
            })?;
            let site = site.trim();
            let idx = space
                .chain_index(site)
                .ok_or_else(|| ChmmError::UnknownSite(site.to_string()))?;
            if sources[idx].is_some() {
                return Err(ChmmError::InvalidParameter(format!(
                    "site '{site}' assigned more than once"
                )));
            }
            sources[idx] = Some(source.parse()?);
        }
        let sources = sources
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    ChmmError::InvalidParameter(format!(
                        "site '{}' has no protocol source",
                        space.chain_labels()[i]
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            sites: space.chain_labels().to_vec(),
            sources,
        })
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn sources(&self) -> &[SiteSource] {
        &self.sources
    }

    pub fn source(&self, site: usize) -> SiteSource {
        self.sources[site]
    }

    pub fn set(&mut self, site: usize, source: SiteSource) {
        self.sources[site] = source;
    }

    pub fn cleared(&self) -> Vec<bool> {
        self.sources
            .iter()
            .map(|&s| s == SiteSource::ForcedClearance)
            .collect()
    }
}

impl fmt::Display for ProtocolSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .sites
            .iter()
            .zip(&self.sources)
            .map(|(site, src)| format!("{site}={src}"))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Parameter draws assembled from two arms, plus clearance overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedDraws {
    pub space: StateSpace,
    pub protocol: ProtocolSpec,
    pub draws: Vec<ChmmParams>,
    pub cleared: Vec<bool>,
}

impl ComposedDraws {
    /// Every `thin`-th draw.
    pub fn thinned(&self, thin: usize) -> Self {
        Self {
            draws: self.draws.iter().step_by(thin.max(1)).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Index pairs `(edu, decol)` used for composition. Equal counts pair by
/// index; otherwise, with `resample`, both lists are stretched to the
/// longer length.
pub fn pair_indices(n_edu: usize, n_decol: usize, resample: bool) -> Result<Vec<(usize, usize)>> {
    if n_edu == 0 || n_decol == 0 {
        return Err(ChmmError::InvalidParameter("posterior has no draws".into()));
    }
    if n_edu == n_decol {
        return Ok((0..n_edu).map(|i| (i, i)).collect());
    }
    if !resample {
        return Err(ChmmError::MismatchedDraws {
            left: n_edu,
            right: n_decol,
        });
    }
    let len = n_edu.max(n_decol);
    Ok((0..len).map(|i| (i * n_edu / len, i * n_decol / len)).collect())
}

fn compose_one(
    space: &StateSpace,
    edu: &ChmmParams,
    decol: &ChmmParams,
    protocol: &ProtocolSpec,
) -> Result<ChmmParams> {
    let mut out = edu.clone();
    for site in 0..space.num_chains() {
        if protocol.source(site) != SiteSource::Education {
            out.beta.set_block(site, decol.beta.block(site).to_vec())?;
            out.emissions[site] = decol.emissions[site].clone();
            out.initials[site] = decol.initials[site].clone();
        }
    }
    Ok(out)
}

/// Per site, takes its β block, emission row set and initial distribution
/// from the assigned arm.
pub fn compose_protocol(
    edu: &PosteriorSamples,
    decol: &PosteriorSamples,
    protocol: &ProtocolSpec,
    resample: bool,
) -> Result<ComposedDraws> {
    if edu.space != decol.space {
        return Err(ChmmError::InvalidParameter(
            "the two posteriors use different state spaces".into(),
        ));
    }
    let space = &edu.space;
    if protocol.sites() != space.chain_labels() {
        return Err(ChmmError::InvalidParameter(
            "protocol sites do not match the model chains".into(),
        ));
    }
    let draws = pair_indices(edu.len(), decol.len(), resample)?
        .into_iter()
        .map(|(i, j)| compose_one(space, &edu.draws[i], &decol.draws[j], protocol))
        .collect::<Result<_>>()?;
    Ok(ComposedDraws {
        space: space.clone(),
        protocol: protocol.clone(),
        draws,
        cleared: protocol.cleared(),
    })
}

/// Simulated carriage curve of a composed protocol, per site plus the
/// any-site total.
pub fn predict_protocol(
    composed: &ComposedDraws,
    spec: &SimulationSpec,
    measure: Measure,
) -> Result<CarriageCurve> {
    predictive_curve(&composed.space, &composed.draws, &composed.cleared, spec, measure, true)
}

/// A single-site component of the decolonization protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Therapy {
    pub name: String,
    pub site: String,
}

impl Therapy {
    pub fn new(name: &str, site: &str) -> Self {
        Self {
            name: name.to_string(),
            site: site.to_string(),
        }
    }
}

/// Mupirocin for the nares, chlorhexidine body wash for the skin and
/// chlorhexidine mouthwash for the throat.
pub fn application_therapies() -> Vec<Therapy> {
    vec![
        Therapy::new("mupirocin", "nares"),
        Therapy::new("chlorhexidine_body_wash", "skin"),
        Therapy::new("chlorhexidine_mouthwash", "throat"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContributionSetup {
    pub therapies: Vec<Therapy>,
    /// Therapy names in the order to report besides the greedy one.
    pub user_order: Option<Vec<String>>,
    /// Source for sites no therapy targets.
    pub background: SiteSource,
    pub measure: Measure,
    pub thin: usize,
    pub resample: bool,
}

impl Default for ContributionSetup {
    fn default() -> Self {
        Self {
            therapies: application_therapies(),
            user_order: None,
            background: SiteSource::Education,
            measure: Measure::Latent,
            thin: 25,
            resample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionStep {
    pub therapy: String,
    pub site: String,
    /// End-of-study total carriage after this addition.
    pub carriage: Summary,
    /// Drop in mean carriage caused by this addition.
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffect {
    pub therapy: String,
    pub site: String,
    pub effect: f64,
    /// Per-draw effect summary.
    pub interval: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub education: Summary,
    pub full: Summary,
    /// Education carriage minus full-protocol carriage (means).
    pub full_effect: f64,
    pub greedy: Vec<ContributionStep>,
    pub user_order: Option<Vec<ContributionStep>>,
    pub marginals: Vec<MarginalEffect>,
    /// Full effect minus the summed marginal effects.
    pub interaction: f64,
    /// Two binomial standard errors of a mean carriage estimate.
    pub tolerance: f64,
    pub num_draws: usize,
}

/// Part of the full effect not explained by the single-therapy effects.
pub fn interaction_term(full_effect: f64, marginal_effects: &[f64]) -> f64 {
    full_effect - marginal_effects.iter().sum::<f64>()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Evaluator<'a> {
    edu: &'a PosteriorSamples,
    decol: &'a PosteriorSamples,
    spec: &'a SimulationSpec,
    setup: &'a ContributionSetup,
    cache: HashMap<ProtocolSpec, Vec<f64>>,
}

impl Evaluator<'_> {
    /// Per-draw end-of-study total carriage under `protocol`.
    fn carriage(&mut self, protocol: &ProtocolSpec) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.get(protocol) {
            return Ok(v.clone());
        }
        let composed =
            compose_protocol(self.edu, self.decol, protocol, self.setup.resample)?.thinned(self.setup.thin);
        let end: BTreeSet<usize> = [self.spec.horizon].into_iter().collect();
        let per_draw = per_draw_proportions(
            &composed.space,
            &composed.draws,
            &composed.cleared,
            self.spec,
            &end,
            self.setup.measure,
            true,
        )?;
        let values: Vec<f64> = per_draw.iter().map(|v| *v.last().expect("total row")).collect();
        self.cache.insert(protocol.clone(), values.clone());
        Ok(values)
    }
}

/// Greedy (and optionally user-ordered) incremental contributions plus
/// marginal effects of single therapies on top of education.
///
/// Every protocol is evaluated with the same simulation seeds, so
/// differences between protocols carry no independent simulation noise.
pub fn contribution_analysis(
    edu: &PosteriorSamples,
    decol: &PosteriorSamples,
    setup: &ContributionSetup,
    spec: &SimulationSpec,
) -> Result<ContributionReport> {
    let space = &edu.space;
    if setup.background == SiteSource::ForcedClearance {
        return Err(ChmmError::InvalidConfig(
            "background source must be edu or decol".into(),
        ));
    }
    if setup.measure == Measure::Observed && !spec.schedule.contains(&spec.horizon) {
        return Err(ChmmError::InvalidConfig(
            "observed carriage needs a swab at the horizon".into(),
        ));
    }
    if setup.therapies.is_empty() {
        return Err(ChmmError::InvalidConfig("no therapies given".into()));
    }
    let mut therapy_sites = Vec::with_capacity(setup.therapies.len());
    for t in &setup.therapies {
        let idx = space
            .chain_index(&t.site)
            .ok_or_else(|| ChmmError::UnknownSite(t.site.clone()))?;
        if therapy_sites.contains(&idx) {
            return Err(ChmmError::InvalidConfig(format!(
                "more than one therapy targets '{}'",
                t.site
            )));
        }
        therapy_sites.push(idx);
    }

    let mut base = ProtocolSpec::uniform(space, setup.background);
    for &site in &therapy_sites {
        base.set(site, SiteSource::Education);
    }
    let with = |applied: &[usize]| {
        let mut p = base.clone();
        for &i in applied {
            p.set(therapy_sites[i], SiteSource::Decolonization);
        }
        p
    };

    let mut eval = Evaluator {
        edu,
        decol,
        spec,
        setup,
        cache: HashMap::new(),
    };
    let education = eval.carriage(&base)?;
    let all: Vec<usize> = (0..therapy_sites.len()).collect();
    let full = eval.carriage(&with(&all))?;
    let num_draws = education.len();

    let steps_for = |order: &[usize], eval: &mut Evaluator| -> Result<Vec<ContributionStep>> {
        let mut steps = Vec::new();
        let mut prev = mean(&education);
        for k in 0..order.len() {
            let values = eval.carriage(&with(&order[..=k]))?;
            let m = mean(&values);
            let t = &setup.therapies[order[k]];
            steps.push(ContributionStep {
                therapy: t.name.clone(),
                site: t.site.clone(),
                carriage: Summary::of(&values),
                reduction: prev - m,
            });
            prev = m;
        }
        Ok(steps)
    };

    let mut greedy_order = Vec::new();
    let mut remaining = all.clone();
    while !remaining.is_empty() {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &cand) in remaining.iter().enumerate() {
            let mut applied = greedy_order.clone();
            applied.push(cand);
            let m = mean(&eval.carriage(&with(&applied))?);
            if best.is_none_or(|(_, bm)| m < bm) {
                best = Some((pos, m));
            }
        }
        let (pos, _) = best.expect("remaining is non-empty");
        greedy_order.push(remaining.remove(pos));
    }
    let greedy = steps_for(&greedy_order, &mut eval)?;

    let user_order = match &setup.user_order {
        None => None,
        Some(names) => {
            let mut order = Vec::with_capacity(names.len());
            for name in names {
                let idx = setup
                    .therapies
                    .iter()
                    .position(|t| &t.name == name)
                    .ok_or_else(|| ChmmError::InvalidConfig(format!("unknown therapy '{name}'")))?;
                if order.contains(&idx) {
                    return Err(ChmmError::InvalidConfig(format!("therapy '{name}' repeated")));
                }
                order.push(idx);
            }
            if order.len() != setup.therapies.len() {
                return Err(ChmmError::InvalidConfig(
                    "user order must list every therapy once".into(),
                ));
            }
            Some(steps_for(&order, &mut eval)?)
        }
    };

    let education_mean = mean(&education);
    let mut marginals = Vec::new();
    for (i, t) in setup.therapies.iter().enumerate() {
        let single = eval.carriage(&with(&[i]))?;
        let diffs: Vec<f64> = education.iter().zip(&single).map(|(a, b)| a - b).collect();
        marginals.push(MarginalEffect {
            therapy: t.name.clone(),
            site: t.site.clone(),
            effect: education_mean - mean(&single),
            interval: Summary::of(&diffs),
        });
    }
    let full_effect = education_mean - mean(&full);
    let interaction = interaction_term(full_effect, &marginals.iter().map(|m| m.effect).collect::<Vec<_>>());
    let tolerance = 2.0 * (0.25 / (spec.num_patients.max(1) * num_draws) as f64).sqrt();

    Ok(ContributionReport {
        education: Summary::of(&education),
        full: Summary::of(&full),
        full_effect,
        greedy,
        user_order,
        marginals,
        interaction,
        tolerance,
        num_draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Arm, Patient};
    use crate::model::{BetaParams, EmissionMatrix, InitialDistribution};
    use crate::sampler::Diagnostics;

    fn posterior(space: &StateSpace, draws: Vec<ChmmParams>) -> PosteriorSamples {
        PosteriorSamples {
            space: space.clone(),
            draws,
            diagnostics: Diagnostics {
                acceptance_rate: vec![],
                warmup_acceptance_rate: vec![],
                proposal_scale: vec![],
                log_posterior: vec![],
            },
        }
    }

    fn with_intercepts(space: &StateSpace, clear_row: f64, colonized_row: f64) -> ChmmParams {
        let mut p = ChmmParams::neutral(space);
        for c in 0..space.num_chains() {
            p.beta.set_intercept_row(c, 0, &[clear_row]).unwrap();
            p.beta.set_intercept_row(c, 1, &[colonized_row]).unwrap();
        }
        p
    }

    #[test]
    fn persistence_examples() {
        let space = StateSpace::application();
        let mut p = ChmmParams::neutral(&space);
        p.beta.set_intercept_row(1, 1, &[-0.6]).unwrap();
        let s = posterior(&space, vec![p]);
        let e = persistence(&s, 1).unwrap();
        assert!((e.summary.mean - 0.7685247834990175).abs() < 1e-12);
        assert_eq!(persistence(&s, 0).unwrap().summary.mean, 0.5);
    }

    #[test]
    fn persistence_two_draw_summary() {
        let space = StateSpace::application();
        // σ(2a) = p  ⇔  a = ln(p/(1-p))/2, colonized-row free entry is -a
        let draws = [0.7f64, 0.8]
            .iter()
            .map(|&p| {
                let mut d = ChmmParams::neutral(&space);
                d.beta
                    .set_intercept_row(0, 1, &[-(p / (1.0 - p)).ln() / 2.0])
                    .unwrap();
                d
            })
            .collect();
        let e = persistence(&posterior(&space, draws), 0).unwrap();
        assert!((e.summary.mean - 0.75).abs() < 1e-12);
        assert!((e.summary.lower - 0.705).abs() < 1e-12);
        assert!((e.summary.upper - 0.795).abs() < 1e-12);
    }

    #[test]
    fn persistence_ignores_interactions() {
        let space = StateSpace::application();
        let mut p = with_intercepts(&space, 1.3, -0.4);
        let before = persistence(&posterior(&space, vec![p.clone()]), 2).unwrap();
        for source in [0, 1, 3] {
            p.beta.set_interaction_row(2, source, 1, 0, &[2.5]).unwrap();
            p.beta.set_interaction_row(2, source, 1, 1, &[-1.7]).unwrap();
        }
        let after = persistence(&posterior(&space, vec![p]), 2).unwrap();
        assert_eq!(before, after);
    }

    fn dataset_with_prevalence(space: &StateSpace, positives: &[usize], n: usize) -> CohortDataset {
        let patients = (0..n)
            .map(|i| Patient {
                id: format!("p{i}"),
                arm: Arm::Education,
            })
            .collect();
        let mut d = CohortDataset::empty_grid(space.chain_labels().to_vec(), 7, patients).unwrap();
        for (site, &pos) in positives.iter().enumerate() {
            for p in 0..n {
                d.set(p, site, 0, Some(u8::from(p < pos)));
            }
        }
        d
    }

    #[test]
    fn transmission_weight_and_threshold() {
        let space = StateSpace::anonymous(2, 2, 0).unwrap();
        // clear-row free entry a gives P(clear → colonized) = σ(-2a)
        let acquisition = |p: f64| -(p / (1.0 - p)).ln() / 2.0;
        let mut d = ChmmParams::neutral(&space);
        d.beta.set_intercept_row(0, 0, &[acquisition(0.10)]).unwrap();
        d.beta.set_intercept_row(1, 0, &[acquisition(0.05)]).unwrap();
        let s = posterior(&space, vec![d]);
        // prevalence: chain 0 → 0.20, chain 1 → 0.30
        let data = dataset_with_prevalence(&space, &[2, 3], 10);
        let g = transmission_graph(&s, &data, DEFAULT_EDGE_THRESHOLD).unwrap();
        let e10 = g.edges.iter().find(|e| e.source == "c1").unwrap();
        assert!((e10.probability.mean - 0.10).abs() < 1e-12);
        assert!((e10.weight.mean - 0.03).abs() < 1e-12);
        assert!(e10.included);
        let e01 = g.edges.iter().find(|e| e.source == "c0").unwrap();
        assert!((e01.weight.mean - 0.01).abs() < 1e-12);
        assert!(!e01.included);
        assert_eq!(g.included_edges().count(), 1);
        assert!(g.to_dot().contains("\"c1\" -> \"c0\""));
        assert!(!g.to_dot().contains("\"c0\" -> \"c1\""));
    }

    #[test]
    fn zero_interactions_share_the_acquisition_probability() {
        let space = StateSpace::application();
        let p = with_intercepts(&space, 0.8, -0.3);
        let s = posterior(&space, vec![p]);
        let data = dataset_with_prevalence(&space, &[5, 2, 7, 1], 10);
        let g = transmission_graph(&s, &data, 0.0).unwrap();
        let expected = 1.0 / (1.0 + (1.6f64).exp());
        for e in &g.edges {
            assert!((e.probability.mean - expected).abs() < 1e-12);
            assert!((e.weight.mean - expected * e.source_prevalence).abs() < 1e-12);
        }
        assert_eq!(g.edges.len(), 12);
    }

    #[test]
    fn unobserved_source_is_flagged() {
        let space = StateSpace::anonymous(3, 2, 0).unwrap();
        let s = posterior(&space, vec![ChmmParams::neutral(&space)]);
        let patients = vec![Patient {
            id: "a".into(),
            arm: Arm::Education,
        }];
        let mut data = CohortDataset::empty_grid(space.chain_labels().to_vec(), 2, patients).unwrap();
        data.set(0, 0, 0, Some(1));
        data.set(0, 1, 0, Some(0));
        let g = transmission_graph(&s, &data, 0.0).unwrap();
        assert_eq!(g.unobserved_sources, vec!["c2".to_string()]);
        assert!(g.edges.iter().all(|e| e.source != "c2"));
        assert_eq!(g.edges.len(), 4);
        assert!(g.to_dot().contains("\"c2\" [style=dashed]"));
    }

    #[test]
    fn raising_threshold_never_adds_edges() {
        let space = StateSpace::application();
        let mut d = with_intercepts(&space, 1.1, -0.5);
        d.beta.set_interaction_row(1, 0, 1, 0, &[-0.8]).unwrap();
        d.beta.set_interaction_row(2, 3, 1, 0, &[-0.3]).unwrap();
        let s = posterior(&space, vec![d]);
        let data = dataset_with_prevalence(&space, &[6, 3, 4, 2], 10);
        let g = transmission_graph(&s, &data, 0.0).unwrap();
        let mut last = usize::MAX;
        for th in [0.0, 0.01, 0.02, 0.05, 0.1, 0.5] {
            let included: Vec<_> = g.with_threshold(th).included_edges().cloned().collect();
            assert!(included.len() <= last);
            assert!(included.iter().all(|e| e.weight.mean >= th));
            last = included.len();
        }
    }

    #[test]
    fn protocol_parsing() {
        let space = StateSpace::application();
        let p = ProtocolSpec::parse(&space, "nares=decol,skin=edu,throat=clear,wound=edu").unwrap();
        assert_eq!(
            p.sources(),
            &[
                SiteSource::Decolonization,
                SiteSource::Education,
                SiteSource::ForcedClearance,
                SiteSource::Education
            ]
        );
        assert_eq!(p.to_string(), "nares=decol,skin=edu,throat=clear,wound=edu");
        assert!(matches!(
            ProtocolSpec::parse(&space, "nose=decol,skin=edu,throat=edu,wound=edu"),
            Err(ChmmError::UnknownSite(_))
        ));
        assert!(ProtocolSpec::parse(&space, "nares=decol,skin=edu,throat=edu").is_err());
        assert!(ProtocolSpec::parse(&space, "nares=decol,nares=edu,skin=edu,throat=edu,wound=edu").is_err());
        assert!(ProtocolSpec::parse(&space, "nares=magic,skin=edu,throat=edu,wound=edu").is_err());
    }

    fn random_params(space: &StateSpace, seed: u64) -> ChmmParams {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..space.num_chains())
            .map(|_| {
                (0..BetaParams::block_len(space.num_chains(), space.num_states()))
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        ChmmParams {
            beta: BetaParams::from_blocks(space, blocks).unwrap(),
            emissions: (0..space.num_chains())
                .map(|_| {
                    EmissionMatrix::from_accuracy(0, rng.random_range(0.7..0.95), rng.random_range(0.9..0.99))
                        .unwrap()
                })
                .collect(),
            initials: (0..space.num_chains())
                .map(|_| {
                    let p = rng.random_range(0.1..0.9);
                    InitialDistribution::new(vec![1.0 - p, p]).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn composition_is_blockwise_and_idempotent() {
        let space = StateSpace::application();
        let edu = posterior(&space, (0..5).map(|i| random_params(&space, i)).collect());
        let decol = posterior(&space, (0..5).map(|i| random_params(&space, 100 + i)).collect());
        let all_edu = compose_protocol(&edu, &decol, &ProtocolSpec::uniform(&space, SiteSource::Education), false).unwrap();
        assert_eq!(all_edu.draws, edu.draws);
        let all_decol =
            compose_protocol(&edu, &decol, &ProtocolSpec::uniform(&space, SiteSource::Decolonization), false).unwrap();
        assert_eq!(all_decol.draws, decol.draws);

        let mixed = ProtocolSpec::parse(&space, "nares=decol,skin=edu,throat=edu,wound=edu").unwrap();
        let c = compose_protocol(&edu, &decol, &mixed, false).unwrap();
        for (i, d) in c.draws.iter().enumerate() {
            assert_eq!(d.beta.block(0), decol.draws[i].beta.block(0));
            assert_eq!(d.emissions[0], decol.draws[i].emissions[0]);
            assert_eq!(d.initials[0], decol.draws[i].initials[0]);
            for site in 1..4 {
                assert_eq!(d.beta.block(site), edu.draws[i].beta.block(site));
                assert_eq!(d.emissions[site], edu.draws[i].emissions[site]);
            }
        }
        assert_eq!(c.cleared, vec![false; 4]);
    }

    #[test]
    fn mismatched_draw_counts() {
        let space = StateSpace::application();
        let edu = posterior(&space, (0..4).map(|i| random_params(&space, i)).collect());
        let decol = posterior(&space, (0..6).map(|i| random_params(&space, 50 + i)).collect());
        let p = ProtocolSpec::uniform(&space, SiteSource::Education);
        assert!(matches!(
            compose_protocol(&edu, &decol, &p, false),
            Err(ChmmError::MismatchedDraws { left: 4, right: 6 })
        ));
        let c = compose_protocol(&edu, &decol, &p, true).unwrap();
        assert_eq!(c.draws.len(), 6);
        assert_eq!(pair_indices(4, 6, true).unwrap()[5], (3, 5));
    }

    #[test]
    fn full_clearance_empties_every_month_after_enrollment() {
        let space = StateSpace::application();
        let edu = posterior(&space, (0..4).map(|i| random_params(&space, i)).collect());
        let p = ProtocolSpec::uniform(&space, SiteSource::ForcedClearance);
        let c = compose_protocol(&edu, &edu, &p, false).unwrap();
        let spec = SimulationSpec::visit_schedule(300, 4);
        let curve = predict_protocol(&c, &spec, Measure::Latent).unwrap();
        for cell in curve.cells.iter().filter(|c| c.month >= 1) {
            assert_eq!((cell.mean, cell.upper), (0.0, 0.0));
        }
        assert!(curve.get("total", 0).unwrap().mean > 0.0);
    }

    #[test]
    fn clearing_a_never_colonized_site_changes_nothing() {
        let space = StateSpace::application();
        let mut d = random_params(&space, 3);
        // wound: never colonized initially and never acquires
        d.initials[3] = InitialDistribution::new(vec![1.0, 0.0]).unwrap();
        d.beta.set_block(3, vec![0.0; d.beta.block(3).len()]).unwrap();
        d.beta.set_intercept_row(3, 0, &[40.0]).unwrap();
        let s = posterior(&space, vec![d]);
        let spec = SimulationSpec::visit_schedule(500, 11);
        let plain = compose_protocol(&s, &s, &ProtocolSpec::uniform(&space, SiteSource::Education), false).unwrap();
        let mut cleared = ProtocolSpec::uniform(&space, SiteSource::Education);
        cleared.set(3, SiteSource::ForcedClearance);
        let cl = compose_protocol(&s, &s, &cleared, false).unwrap();
        assert_eq!(
            predict_protocol(&plain, &spec, Measure::Latent).unwrap(),
            predict_protocol(&cl, &spec, Measure::Latent).unwrap()
        );
    }

    #[test]
    fn identical_arms_have_no_effects() {
        let space = StateSpace::application();
        let s = posterior(&space, (0..6).map(|i| random_params(&space, i)).collect());
        let setup = ContributionSetup {
            thin: 1,
            ..Default::default()
        };
        let spec = SimulationSpec::visit_schedule(200, 5);
        let r = contribution_analysis(&s, &s, &setup, &spec).unwrap();
        assert_eq!(r.full_effect, 0.0);
        assert_eq!(r.interaction, 0.0);
        assert!(r.marginals.iter().all(|m| m.effect == 0.0));
    }

    fn contrast_arms(space: &StateSpace) -> (PosteriorSamples, PosteriorSamples) {
        let edu: Vec<ChmmParams> = (0..8)
            .map(|i| {
                let mut d = random_params(space, 200 + i);
                // other sites rarely colonized, nares persistent
                for c in 0..4 {
                    d.beta.set_block(c, vec![0.0; d.beta.block(c).len()]).unwrap();
                    d.beta.set_intercept_row(c, 0, &[1.5]).unwrap();
                    d.beta.set_intercept_row(c, 1, &[1.0]).unwrap();
                    d.initials[c] = InitialDistribution::new(vec![0.9, 0.1]).unwrap();
                }
                d.beta.set_intercept_row(0, 1, &[-2.0]).unwrap();
                d.initials[0] = InitialDistribution::new(vec![0.2, 0.8]).unwrap();
                d
            })
            .collect();
        let decol = edu
            .iter()
            .map(|d| {
                let mut d = d.clone();
                // nares clears fast and stays clear
                d.beta.set_intercept_row(0, 1, &[2.0]).unwrap();
                d
            })
            .collect();
        (posterior(space, edu), posterior(space, decol))
    }

    #[test]
    fn greedy_picks_the_only_differing_site_first() {
        let space = StateSpace::application();
        let (edu, decol) = contrast_arms(&space);
        let setup = ContributionSetup {
            thin: 1,
            user_order: Some(vec![
                "chlorhexidine_mouthwash".into(),
                "mupirocin".into(),
                "chlorhexidine_body_wash".into(),
            ]),
            ..Default::default()
        };
        let spec = SimulationSpec::visit_schedule(2000, 21);
        let r = contribution_analysis(&edu, &decol, &setup, &spec).unwrap();
        assert_eq!(r.greedy[0].therapy, "mupirocin");
        assert!(r.marginals[0].effect > 0.05);
        for m in &r.marginals[1..] {
            assert!(m.effect.abs() <= r.tolerance, "{m:?}");
        }
        for steps in [&r.greedy, r.user_order.as_ref().unwrap()] {
            let total: f64 = steps.iter().map(|s| s.reduction).sum();
            assert!((total - r.full_effect).abs() < 1e-12);
            assert!(steps.iter().all(|s| (0.0..=1.0).contains(&s.carriage.mean)));
        }
        let marginal_sum: f64 = r.marginals.iter().map(|m| m.effect).sum();
        assert!((marginal_sum + r.interaction - r.full_effect).abs() < 1e-12);
    }

    #[test]
    fn contribution_setup_errors() {
        let space = StateSpace::application();
        let s = posterior(&space, vec![ChmmParams::neutral(&space)]);
        let spec = SimulationSpec::visit_schedule(10, 0);
        let setup = ContributionSetup {
            therapies: vec![Therapy::new("x", "elbow")],
            ..Default::default()
        };
        assert!(matches!(
            contribution_analysis(&s, &s, &setup, &spec),
            Err(ChmmError::UnknownSite(_))
        ));
        let setup = ContributionSetup {
            therapies: vec![Therapy::new("x", "nares"), Therapy::new("y", "nares")],
            ..Default::default()
        };
        assert!(contribution_analysis(&s, &s, &setup, &spec).is_err());
    }

    #[test]
    fn interaction_subtraction() {
        assert!((interaction_term(0.12, &[0.05, 0.03, 0.02]) - 0.02).abs() < 1e-15);
    }
}
