//! Visit-record ingestion, run configuration and result files.
//!
//! Input rows are `patient_id,arm,site,month,result` with result `1`, `0`
//! or `NA`. Months missing from the input stay missing on the grid.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{ContributionReport, PersistenceSummary, TransmissionGraph, DEFAULT_EDGE_THRESHOLD};
use crate::data::{Arm, CohortDataset, Observation, Patient};
use crate::error::{ChmmError, Result, RowIssue};
use crate::generative::{CarriageCurve, InitialSource, SimulationSpec, VISIT_MONTHS};
use crate::model::{
    BetaParams, ChmmParams, EmissionMatrix, InitialDistribution, StateSpace, DEFAULT_SITES,
};
use crate::sampler::{run_mcmc_in, Diagnostics, McmcConfig, PosteriorSamples};
use crate::stats::Summary;

pub const DATA_HEADER: [&str; 5] = ["patient_id", "arm", "site", "month", "result"];

/// Last modelled month (third follow-up visit).
pub const LAST_MONTH: usize = 6;

pub const BETA_FILE: &str = "beta.csv";
pub const EMISSION_FILE: &str = "emission.csv";
pub const INITIAL_FILE: &str = "initial.csv";
pub const LOG_POSTERIOR_FILE: &str = "log_posterior.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DATA_FILE: &str = "data.csv";
pub const CONFIG_FILE: &str = "config.json";

/// One input row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub patient_id: String,
    pub arm: Arm,
    pub site: String,
    pub month: usize,
    pub result: Observation,
}

fn parse_result(s: &str) -> Option<Observation> {
    match s.trim() {
        "1" => Some(Some(1)),
        "0" => Some(Some(0)),
        t if t.eq_ignore_ascii_case("na") => Some(None),
        _ => None,
    }
}

fn format_result(o: Observation) -> String {
    match o {
        Some(x) => x.to_string(),
        None => "NA".to_string(),
    }
}

/// Reads visit records onto the default four-site, seven-month grid.
pub fn ingest<R: Read>(reader: R) -> Result<CohortDataset> {
    let sites = DEFAULT_SITES.iter().map(|s| s.to_string()).collect();
    ingest_with_sites(reader, sites, LAST_MONTH + 1)
}

/// Reads visit records onto a grid of `sites` × months `0..num_months`.
/// Every problem is reported with its line number; nothing is dropped.
pub fn ingest_with_sites<R: Read>(
    reader: R,
    sites: Vec<String>,
    num_months: usize,
) -> Result<CohortDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(ChmmError::EmptyDataset);
    }
    if header.iter().collect::<Vec<_>>() != DATA_HEADER {
        return Err(ChmmError::Ingest(vec![RowIssue {
            line: 1,
            message: format!("expected header `{}`", DATA_HEADER.join(",")),
        }]));
    }

    let mut issues = Vec::new();
    let mut patients: Vec<Patient> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<(usize, usize, usize, Observation)> = Vec::new();
    let mut seen: HashMap<(usize, usize, usize), usize> = HashMap::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut issue = |message: String| issues.push(RowIssue { line, message });
        if record.len() != DATA_HEADER.len() {
            issue(format!("expected 5 fields, found {}", record.len()));
            continue;
        }
        let id = record[0].to_string();
        if id.is_empty() {
            issue("empty patient_id".into());
            continue;
        }
        let arm: Arm = match record[1].parse() {
            Ok(a) => a,
            Err(_) => {
                issue(format!("unknown arm `{}`", &record[1]));
                continue;
            }
        };
        let Some(site) = sites.iter().position(|s| s == &record[2]) else {
            issue(format!("unknown site `{}`", &record[2]));
            continue;
        };
        let month = match record[3].parse::<usize>() {
            Ok(m) if m < num_months => m,
            Ok(m) => {
                issue(format!("month {m} outside the modelled grid 0..={}", num_months - 1));
                continue;
            }
            Err(_) => {
                issue(format!("month `{}` is not a non-negative integer", &record[3]));
                continue;
            }
        };
        let Some(result) = parse_result(&record[4]) else {
            issue(format!("result `{}` must be 1, 0 or NA", &record[4]));
            continue;
        };
        let p = *index.entry(id.clone()).or_insert_with(|| {
            patients.push(Patient { id: id.clone(), arm });
            patients.len() - 1
        });
        if patients[p].arm != arm {
            issue(format!(
                "patient `{id}` listed under arm {arm} but earlier under {}",
                patients[p].arm
            ));
            continue;
        }
        if let Some(first) = seen.insert((p, site, month), line) {
            issue(format!(
                "duplicate record for ({id}, {}, {month}); first on line {first}",
                sites[site]
            ));
            continue;
        }
        cells.push((p, site, month, result));
    }

    if !issues.is_empty() {
        return Err(ChmmError::Ingest(issues));
    }
    if patients.is_empty() {
        return Err(ChmmError::EmptyDataset);
    }
    let mut data = CohortDataset::empty_grid(sites, num_months, patients)?;
    for (p, site, month, result) in cells {
        data.set(p, site, month, result);
    }
    Ok(data)
}

pub fn read_dataset(path: &Path) -> Result<CohortDataset> {
    ingest(File::open(path).map_err(|e| ChmmError::io(path, e))?)
}

/// Writes every grid cell, missing ones as `NA`.
pub fn write_dataset<W: Write>(writer: W, data: &CohortDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DATA_HEADER)?;
    for (p, patient) in data.patients().iter().enumerate() {
        for (site, label) in data.sites().iter().enumerate() {
            for month in 0..data.num_months() {
                w.write_record([
                    patient.id.as_str(),
                    patient.arm.as_str(),
                    label.as_str(),
                    &month.to_string(),
                    &format_result(data.get(p, site, month)),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| ChmmError::io("<csv>", e))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| ChmmError::io(path, e))?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| ChmmError::io(path, e))
}

pub fn save_dataset(path: &Path, data: &CohortDataset) -> Result<()> {
    write_dataset(create(path)?, data)
}

/// A full run: sampler settings, visit schedule and analysis defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mcmc: McmcConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Every `thin`-th retained draw feeds predictive simulations.
    pub thin: usize,
    /// Transmission edge inclusion threshold.
    pub threshold: f64,
    pub horizon_months: usize,
    pub visit_months: Vec<usize>,
    /// Arm to fit when the data holds both.
    pub arm: Option<Arm>,
    /// Cohort size of predictive simulations; defaults to the data size.
    pub predictive_patients: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mcmc: McmcConfig::default(),
            data: None,
            out: None,
            thin: 25,
            threshold: DEFAULT_EDGE_THRESHOLD,
            horizon_months: LAST_MONTH,
            visit_months: VISIT_MONTHS.to_vec(),
            arm: None,
            predictive_patients: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.mcmc.validate(2)?;
        if self.thin == 0 {
            return Err(ChmmError::InvalidConfig("thin must be at least 1".into()));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(ChmmError::InvalidConfig("threshold must be non-negative".into()));
        }
        if self.horizon_months == 0 || self.visit_months.iter().any(|&m| m > self.horizon_months) {
            return Err(ChmmError::InvalidConfig(
                "visit months must lie within 0..=horizon_months".into(),
            ));
        }
        Ok(())
    }

    /// Months on the grid that no visit covers.
    pub fn structurally_missing_months(&self) -> Vec<usize> {
        let visits: BTreeSet<usize> = self.visit_months.iter().copied().collect();
        (0..=self.horizon_months).filter(|m| !visits.contains(m)).collect()
    }

    pub fn simulation_spec(&self, num_patients: usize, rng_seed: u64) -> SimulationSpec {
        SimulationSpec {
            num_patients,
            horizon: self.horizon_months,
            initial: InitialSource::Params,
            schedule: self.visit_months.iter().copied().collect(),
            rng_seed,
            arm: self.arm.unwrap_or(Arm::Education),
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| ChmmError::io(path, e))?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| ChmmError::io(path, e))?;
    w.flush().map_err(|e| ChmmError::io(path, e))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ChmmError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Column names of one target chain's β block, in block order.
pub fn beta_names(space: &StateSpace, target: usize) -> Vec<String> {
    let k = space.num_states();
    let labels = space.chain_labels();
    let t = &labels[target];
    let mut names = Vec::with_capacity(BetaParams::block_len(space.num_chains(), k));
    let mut matrix = |prefix: &str, suffix: &str| {
        for r in 1..=k {
            for j in 1..k {
                names.push(format!("{prefix}.row{r}.col{j}{suffix}"));
            }
        }
    };
    matrix(&format!("beta0.{t}"), "");
    for (s, source) in labels.iter().enumerate() {
        if s == target {
            continue;
        }
        for state in space.active_states() {
            let suffix = if k > 2 { format!(".state{state}") } else { String::new() };
            matrix(&format!("beta.{t}_from_{source}"), &suffix);
        }
    }
    names
}

pub fn emission_names(space: &StateSpace) -> Vec<String> {
    let k = space.num_states();
    space
        .chain_labels()
        .iter()
        .flat_map(|c| {
            (0..k).flat_map(move |i| (0..k).map(move |j| format!("emission.{c}.true{i}.obs{j}")))
        })
        .collect()
}

pub fn initial_names(space: &StateSpace) -> Vec<String> {
    let k = space.num_states();
    space
        .chain_labels()
        .iter()
        .flat_map(|c| (0..k).map(move |s| format!("initial.{c}.state{s}")))
        .collect()
}

fn fmt_exact(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_table<'a, I>(path: &Path, names: &[String], rows: I) -> Result<()>
where
    I: Iterator<Item = Vec<f64>> + 'a,
{
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["draw".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, row) in rows.enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.into_iter().map(fmt_exact));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| ChmmError::io(path, e))
}

fn read_table(path: &Path, names: &[String]) -> Result<Vec<Vec<f64>>> {
    let malformed = |message: String| ChmmError::MalformedPosterior {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let header = rdr.headers()?.clone();
    if header.len() != names.len() + 1
        || &header[0] != "draw"
        || header.iter().skip(1).zip(names).any(|(h, n)| h != n)
    {
        return Err(malformed("column names do not match the state space".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() + 1 || rec[0].parse::<usize>() != Ok(i) {
            return Err(malformed(format!("bad row for draw {i}")));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| malformed(format!("bad number `{v}` in draw {i}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceDescription {
    pub chains: Vec<String>,
    pub num_states: usize,
    pub baseline: usize,
}

impl SpaceDescription {
    pub fn of(space: &StateSpace) -> Self {
        Self {
            chains: space.chain_labels().to_vec(),
            num_states: space.num_states(),
            baseline: space.baseline(),
        }
    }

    pub fn build(&self) -> Result<StateSpace> {
        StateSpace::new(self.chains.clone(), self.num_states, self.baseline)
    }
}

/// A single parameter set together with its state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub space: SpaceDescription,
    pub params: ChmmParams,
}

impl ModelFile {
    pub fn new(space: &StateSpace, params: ChmmParams) -> Self {
        Self {
            space: SpaceDescription::of(space),
            params,
        }
    }

    /// Loads and validates a model file.
    pub fn load(path: &Path) -> Result<(StateSpace, ChmmParams)> {
        let file: ModelFile = load_json(path)?;
        let space = file.space.build()?;
        file.params.validate(&space)?;
        Ok((space, file.params))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummaryFile {
    pub space: SpaceDescription,
    pub num_draws: usize,
    pub acceptance_rate: Vec<f64>,
    pub warmup_acceptance_rate: Vec<f64>,
    pub proposal_scale: Vec<f64>,
    pub parameters: Vec<ParameterSummary>,
}

fn beta_row(params: &ChmmParams) -> Vec<f64> {
    params.beta.blocks().iter().flatten().copied().collect()
}

fn emission_row(params: &ChmmParams) -> Vec<f64> {
    params.emissions.iter().flat_map(|e| e.as_slice().to_vec()).collect()
}

fn initial_row(params: &ChmmParams) -> Vec<f64> {
    params.initials.iter().flat_map(|d| d.probs().to_vec()).collect()
}

/// Writes per-draw parameter tables, the log posterior trace and a JSON
/// summary (means, 90% intervals, sampler diagnostics) into `dir`.
pub fn write_posterior(samples: &PosteriorSamples, dir: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(ChmmError::InvalidParameter("posterior has no draws".into()));
    }
    fs::create_dir_all(dir).map_err(|e| ChmmError::io(dir, e))?;
    let space = &samples.space;
    let bnames: Vec<String> = (0..space.num_chains()).flat_map(|c| beta_names(space, c)).collect();
    let enames = emission_names(space);
    let inames = initial_names(space);
    write_table(&dir.join(BETA_FILE), &bnames, samples.draws.iter().map(beta_row))?;
    write_table(&dir.join(EMISSION_FILE), &enames, samples.draws.iter().map(emission_row))?;
    write_table(&dir.join(INITIAL_FILE), &inames, samples.draws.iter().map(initial_row))?;
    write_table(
        &dir.join(LOG_POSTERIOR_FILE),
        &["log_posterior".to_string()],
        samples.diagnostics.log_posterior.iter().map(|&v| vec![v]),
    )?;

    let mut parameters = Vec::new();
    let columns: [(&[String], fn(&ChmmParams) -> Vec<f64>); 3] =
        [(&bnames, beta_row), (&enames, emission_row), (&inames, initial_row)];
    for (names, row) in columns {
        let table: Vec<Vec<f64>> = samples.draws.iter().map(row).collect();
        for (j, name) in names.iter().enumerate() {
            let column: Vec<f64> = table.iter().map(|r| r[j]).collect();
            parameters.push(ParameterSummary {
                name: name.clone(),
                summary: Summary::of(&column),
            });
        }
    }
    let d = &samples.diagnostics;
    let summary = PosteriorSummaryFile {
        space: SpaceDescription::of(space),
        num_draws: samples.len(),
        acceptance_rate: d.acceptance_rate.clone(),
        warmup_acceptance_rate: d.warmup_acceptance_rate.clone(),
        proposal_scale: d.proposal_scale.clone(),
        parameters,
    };
    save_json(&dir.join(SUMMARY_FILE), &summary)
}

/// Reads what [`write_posterior`] wrote; values round-trip bit-exactly.
pub fn read_posterior(dir: &Path) -> Result<PosteriorSamples> {
    let summary: PosteriorSummaryFile = load_json(&dir.join(SUMMARY_FILE))?;
    let space = summary.space.build()?;
    let c = space.num_chains();
    let k = space.num_states();
    let bnames: Vec<String> = (0..c).flat_map(|t| beta_names(&space, t)).collect();
    let betas = read_table(&dir.join(BETA_FILE), &bnames)?;
    let emissions = read_table(&dir.join(EMISSION_FILE), &emission_names(&space))?;
    let initials = read_table(&dir.join(INITIAL_FILE), &initial_names(&space))?;
    let log_post = read_table(&dir.join(LOG_POSTERIOR_FILE), &["log_posterior".to_string()])?;
    let n = betas.len();
    if emissions.len() != n || initials.len() != n || n != summary.num_draws {
        return Err(ChmmError::MalformedPosterior {
            path: dir.to_path_buf(),
            message: "parameter files disagree on the number of draws".into(),
        });
    }
    let block = BetaParams::block_len(c, k);
    let draws = (0..n)
        .map(|i| {
            let beta = BetaParams::from_blocks(
                &space,
                betas[i].chunks(block).map(<[f64]>::to_vec).collect(),
            )?;
            let emissions = emissions[i]
                .chunks(k * k)
                .map(|m| EmissionMatrix::new(k, m.to_vec()))
                .collect::<Result<_>>()?;
            let initials = initials[i]
                .chunks(k)
                .map(|p| InitialDistribution::new(p.to_vec()))
                .collect::<Result<_>>()?;
            Ok(ChmmParams {
                beta,
                emissions,
                initials,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| ChmmError::MalformedPosterior {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(PosteriorSamples {
        space,
        draws,
        diagnostics: Diagnostics {
            acceptance_rate: summary.acceptance_rate,
            warmup_acceptance_rate: summary.warmup_acceptance_rate,
            proposal_scale: summary.proposal_scale,
            log_posterior: log_post.into_iter().map(|r| r[0]).collect(),
        },
    })
}

/// Fits `data` (one arm) and writes the posterior, the data and the config
/// into `dir`.
pub fn fit_to_dir(data: &CohortDataset, config: &RunConfig, dir: &Path) -> Result<PosteriorSamples> {
    config.validate()?;
    let space = StateSpace::new(data.sites().to_vec(), 2, 0)?;
    let samples = run_mcmc_in(&space, data, &config.mcmc)?;
    write_posterior(&samples, dir)?;
    save_dataset(&dir.join(DATA_FILE), data)?;
    save_json(&dir.join(CONFIG_FILE), config)?;
    Ok(samples)
}

pub fn write_curve_csv<W: Write>(writer: W, curve: &CarriageCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["measure", "site", "month", "mean", "lower", "upper"])?;
    let measure = serde_json::to_value(curve.measure)?;
    let measure = measure.as_str().unwrap_or_default();
    for c in &curve.cells {
        w.write_record([
            measure,
            &c.site,
            &c.month.to_string(),
            &c.mean.to_string(),
            &c.lower.to_string(),
            &c.upper.to_string(),
        ])?;
    }
    w.flush().map_err(|e| ChmmError::io("<csv>", e))
}

pub fn write_persistence_csv<W: Write>(writer: W, summary: &PersistenceSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["site", "mean", "lower", "upper"])?;
    for e in &summary.entries {
        w.write_record([
            e.site.clone(),
            e.summary.mean.to_string(),
            e.summary.lower.to_string(),
            e.summary.upper.to_string(),
        ])?;
    }
    w.flush().map_err(|e| ChmmError::io("<csv>", e))
}

pub fn write_transmission_csv<W: Write>(writer: W, graph: &TransmissionGraph) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "source",
        "target",
        "source_prevalence",
        "probability_mean",
        "probability_lower",
        "probability_upper",
        "weight_mean",
        "weight_lower",
        "weight_upper",
        "included",
    ])?;
    for e in &graph.edges {
        w.write_record([
            e.source.clone(),
            e.target.clone(),
            e.source_prevalence.to_string(),
            e.probability.mean.to_string(),
            e.probability.lower.to_string(),
            e.probability.upper.to_string(),
            e.weight.mean.to_string(),
            e.weight.lower.to_string(),
            e.weight.upper.to_string(),
            e.included.to_string(),
        ])?;
    }
    for s in &graph.unobserved_sources {
        w.write_record([s.as_str(), "", "", "", "", "", "", "", "", "unobserved_source"])?;
    }
    w.flush().map_err(|e| ChmmError::io("<csv>", e))
}

/// One row per reported quantity: `kind` is `education`, `full`,
/// `greedy`, `user`, `marginal` or `interaction`.
pub fn write_contribution_csv<W: Write>(writer: W, report: &ContributionReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "step", "therapy", "site", "mean", "lower", "upper", "effect"])?;
    let row = |w: &mut csv::Writer<W>, kind: &str, step: String, therapy: &str, site: &str, s: Option<&Summary>, effect: f64| {
        let (m, l, u) = s.map_or((String::new(), String::new(), String::new()), |s| {
            (s.mean.to_string(), s.lower.to_string(), s.upper.to_string())
        });
        w.write_record([kind, &step, therapy, site, &m, &l, &u, &effect.to_string()])
    };
    row(&mut w, "education", String::new(), "", "", Some(&report.education), 0.0)?;
    row(&mut w, "full", String::new(), "", "", Some(&report.full), report.full_effect)?;
    for (i, s) in report.greedy.iter().enumerate() {
        row(&mut w, "greedy", (i + 1).to_string(), &s.therapy, &s.site, Some(&s.carriage), s.reduction)?;
    }
    for (i, s) in report.user_order.iter().flatten().enumerate() {
        row(&mut w, "user", (i + 1).to_string(), &s.therapy, &s.site, Some(&s.carriage), s.reduction)?;
    }
    for m in &report.marginals {
        row(&mut w, "marginal", String::new(), &m.therapy, &m.site, Some(&m.interval), m.effect)?;
    }
    row(&mut w, "interaction", String::new(), "", "", None, report.interaction)?;
    w.flush().map_err(|e| ChmmError::io("<csv>", e))
}

/// Writes `content` produced by `f` to `path`.
pub fn write_file<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| ChmmError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Diagnostics;

    fn text(rows: &[&str]) -> String {
        let mut s = String::from("patient_id,arm,site,month,result\n");
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn nares_only_visits() {
        let csv = text(&[
            "a,education,nares,0,1",
            "a,education,nares,1,0",
            "a,education,nares,3,1",
            "a,education,nares,6,NA",
        ]);
        let d = ingest(csv.as_bytes()).unwrap();
        assert_eq!(d.num_patients(), 1);
        assert_eq!(d.num_months(), 7);
        assert_eq!(d.observed_count(), 3);
        assert_eq!(d.series(0, 0), &[Some(1), Some(0), None, Some(1), None, None, None]);
        // wound never listed
        assert!(d.series(0, 3).iter().all(Option::is_none));
    }

    #[test]
    fn four_observed_cells() {
        let csv = text(&[
            "a,education,nares,0,1",
            "a,education,nares,1,0",
            "a,education,nares,3,1",
            "a,education,nares,6,0",
        ]);
        let d = ingest(csv.as_bytes()).unwrap();
        assert_eq!(d.observed_count(), 4);
        for m in [2, 4, 5] {
            assert_eq!(d.get(0, 0, m), None);
        }
    }

    #[test]
    fn bad_rows_are_reported_with_lines() {
        let csv = text(&[
            "a,education,nares,0,1",
            "a,education,nares,9,1",
            "a,education,elbow,1,1",
            "a,education,nares,0,0",
            "b,placebo,nares,0,0",
            "a,decolonization,skin,0,0",
            "c,education,skin,1,yes",
        ]);
        let Err(ChmmError::Ingest(issues)) = ingest(csv.as_bytes()) else {
            panic!("expected ingest error");
        };
        let lines: Vec<usize> = issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 6, 7, 8]);
        assert!(issues[0].message.contains("month 9"));
        assert!(issues[2].message.contains("duplicate"));
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(ingest("".as_bytes()), Err(ChmmError::EmptyDataset)));
        assert!(matches!(ingest(text(&[]).as_bytes()), Err(ChmmError::EmptyDataset)));
        assert!(matches!(ingest("a,b\n".as_bytes()), Err(ChmmError::Ingest(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let csv = text(&[
            "p2,decol,throat,3,1",
            "p1,education,nares,0,1",
            "p2,decolonization,wound,6,0",
        ]);
        let d = ingest(csv.as_bytes()).unwrap();
        assert_eq!(d.patients()[0].id, "p2");
        let mut out = Vec::new();
        write_dataset(&mut out, &d).unwrap();
        assert_eq!(ingest(out.as_slice()).unwrap(), d);
    }

    fn sample_posterior() -> PosteriorSamples {
        use rand::{Rng, SeedableRng};
        let space = StateSpace::application();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let draws = (0..7)
            .map(|_| {
                let mut p = ChmmParams::neutral(&space);
                for c in 0..4 {
                    let block = (0..p.beta.block(c).len()).map(|_| rng.random_range(-2.0..2.0)).collect();
                    p.beta.set_block(c, block).unwrap();
                    let a: f64 = rng.random();
                    p.initials[c] = InitialDistribution::new(vec![1.0 - a, a]).unwrap();
                    p.emissions[c] =
                        EmissionMatrix::from_accuracy(0, rng.random_range(0.5..1.0), rng.random_range(0.5..1.0))
                            .unwrap();
                }
                p
            })
            .collect();
        PosteriorSamples {
            space,
            draws,
            diagnostics: Diagnostics {
                acceptance_rate: vec![0.2, 0.25, 0.3, 0.22],
                warmup_acceptance_rate: vec![0.21, 0.24, 0.28, 0.23],
                proposal_scale: vec![0.1, 0.2, 0.3, 0.4],
                log_posterior: (0..7).map(|i| -1000.0 - i as f64 / 3.0).collect(),
            },
        }
    }

    #[test]
    fn posterior_round_trip_is_bit_exact() {
        let s = sample_posterior();
        let dir = tempfile::tempdir().unwrap();
        write_posterior(&s, dir.path()).unwrap();
        let back = read_posterior(dir.path()).unwrap();
        assert_eq!(back, s);
        let beta = fs::read_to_string(dir.path().join(BETA_FILE)).unwrap();
        assert_eq!(beta.lines().count(), 8);
        let header = beta.lines().next().unwrap();
        assert!(header.starts_with("draw,beta0.nares.row1.col1,beta0.nares.row2.col1,beta.nares_from_skin.row1.col1"));
    }

    #[test]
    fn beta_names_follow_block_layout() {
        let space = StateSpace::application();
        let mut beta = BetaParams::zeros(&space);
        beta.set_interaction_row(2, 3, 1, 1, &[7.0]).unwrap();
        let names = beta_names(&space, 2);
        let pos = beta.block(2).iter().position(|&v| v == 7.0).unwrap();
        assert_eq!(names[pos], "beta.throat_from_wound.row2.col1");
        assert_eq!(names.len(), 8);

        let space3 = StateSpace::anonymous(2, 3, 0).unwrap();
        let mut beta3 = BetaParams::zeros(&space3);
        beta3.set_interaction_row(0, 1, 2, 2, &[0.0, 5.0]).unwrap();
        let names3 = beta_names(&space3, 0);
        let pos = beta3.block(0).iter().position(|&v| v == 5.0).unwrap();
        assert_eq!(names3[pos], "beta.c0_from_c1.row3.col2.state2");
    }

    #[test]
    fn summary_of_constant_column() {
        let mut s = sample_posterior();
        for d in &mut s.draws {
            d.beta.set_intercept_row(0, 0, &[0.125]).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        write_posterior(&s, dir.path()).unwrap();
        let summary: PosteriorSummaryFile = load_json(&dir.path().join(SUMMARY_FILE)).unwrap();
        let p = summary.parameters.iter().find(|p| p.name == "beta0.nares.row1.col1").unwrap();
        assert_eq!((p.summary.mean, p.summary.lower, p.summary.upper), (0.125, 0.125, 0.125));
    }

    #[test]
    fn malformed_posterior_is_rejected() {
        let s = sample_posterior();
        let dir = tempfile::tempdir().unwrap();
        write_posterior(&s, dir.path()).unwrap();
        let path = dir.path().join(INITIAL_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let truncated: Vec<&str> = text.lines().take(3).collect();
        fs::write(&path, truncated.join("\n")).unwrap();
        assert!(matches!(
            read_posterior(dir.path()),
            Err(ChmmError::MalformedPosterior { .. })
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let s = sample_posterior();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_json(&path, &ModelFile::new(&s.space, s.draws[3].clone())).unwrap();
        let (space, params) = ModelFile::load(&path).unwrap();
        assert_eq!(space, s.space);
        assert_eq!(params, s.draws[3]);
    }

    #[test]
    fn run_config_defaults_and_overrides() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.structurally_missing_months(), vec![2, 4, 5]);
        assert_eq!(cfg.threshold, 0.02);
        let cfg: RunConfig =
            serde_json::from_str(r#"{"mcmc": {"num_samples": 10, "warmup": 5}, "thin": 2}"#).unwrap();
        assert_eq!(cfg.mcmc.num_samples, 10);
        assert_eq!(cfg.mcmc.proposal_init_scale, 0.01);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = RunConfig {
            visit_months: vec![0, 9],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
