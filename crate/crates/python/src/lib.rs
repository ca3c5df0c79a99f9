//! Python bindings for the coupled HMM engine.
//!
//! Structured results (summaries, graphs, curves) are handed over as plain
//! dicts and lists built from their JSON form.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use chmm_core::analysis::{self, ContributionSetup};
use chmm_core::generative::{self, Measure, SimulationSpec};
use chmm_core::io::{self as cio, ModelFile};
use chmm_core::{
    oracle, ChmmError, ChmmParams, CohortDataset, EmissionMatrix, InitialDistribution,
    McmcConfig, PosteriorSamples, ProtocolSpec, State, StateSpace,
};

create_exception!(chmm, ChmmException, PyValueError);

fn err(e: ChmmError) -> PyErr {
    ChmmException::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn from_py<T: for<'de> serde::Deserialize<'de>>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = PyModule::import(obj.py(), "json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err(e.into()))
}

fn parse_measure(text: &str) -> PyResult<Measure> {
    match text {
        "latent" => Ok(Measure::Latent),
        "observed" => Ok(Measure::Observed),
        other => Err(PyValueError::new_err(format!(
            "measure must be `latent` or `observed`, got `{other}`"
        ))),
    }
}

#[pyclass(name = "StateSpace", module = "chmm", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyStateSpace(StateSpace);

#[pymethods]
impl PyStateSpace {
    #[new]
    #[pyo3(signature = (chains, num_states = 2, baseline = 0))]
    fn new(chains: Vec<String>, num_states: usize, baseline: usize) -> PyResult<Self> {
        StateSpace::new(chains, num_states, baseline).map(Self).map_err(err)
    }

    /// Nares, skin, throat and wound with states clear (0) and colonized (1).
    #[staticmethod]
    fn application() -> Self {
        Self(StateSpace::application())
    }

    #[getter]
    fn chains(&self) -> Vec<String> {
        self.0.chain_labels().to_vec()
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.0.num_states()
    }

    #[getter]
    fn baseline(&self) -> usize {
        self.0.baseline()
    }

    fn __repr__(&self) -> String {
        format!(
            "StateSpace(chains={:?}, num_states={}, baseline={})",
            self.0.chain_labels(),
            self.0.num_states(),
            self.0.baseline()
        )
    }
}

#[pyclass(name = "Params", module = "chmm", skip_from_py_object)]
#[derive(Clone)]
struct PyParams {
    space: StateSpace,
    params: ChmmParams,
}

impl PyParams {
    fn chain(&self, label: &str) -> PyResult<usize> {
        self.space
            .chain_index(label)
            .ok_or_else(|| err(ChmmError::UnknownSite(label.to_string())))
    }
}

#[pymethods]
impl PyParams {
    /// Zero β, identity emissions and uniform initial distributions.
    #[new]
    fn new(space: &PyStateSpace) -> Self {
        Self {
            space: space.0.clone(),
            params: ChmmParams::neutral(&space.0),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (space, params) = ModelFile::load(&path).map_err(err)?;
        Ok(Self { space, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cio::save_json(&path, &ModelFile::new(&self.space, self.params.clone())).map_err(err)
    }

    #[getter]
    fn space(&self) -> PyStateSpace {
        PyStateSpace(self.space.clone())
    }

    fn set_intercept(&mut self, target: &str, row: usize, free: Vec<f64>) -> PyResult<()> {
        let t = self.chain(target)?;
        self.params.beta.set_intercept_row(t, row, &free).map_err(err)
    }

    /// Sets the effect of `source` being in state `state` on `target`.
    #[pyo3(signature = (target, source, row, free, state = 1))]
    fn set_interaction(
        &mut self,
        target: &str,
        source: &str,
        row: usize,
        free: Vec<f64>,
        state: usize,
    ) -> PyResult<()> {
        let (t, s) = (self.chain(target)?, self.chain(source)?);
        self.params
            .beta
            .set_interaction_row(t, s, state, row, &free)
            .map_err(err)
    }

    fn set_accuracy(&mut self, chain: &str, sensitivity: f64, specificity: f64) -> PyResult<()> {
        let c = self.chain(chain)?;
        self.params.emissions[c] =
            EmissionMatrix::from_accuracy(self.space.baseline(), sensitivity, specificity)
                .map_err(err)?;
        Ok(())
    }

    fn set_initial(&mut self, chain: &str, probs: Vec<f64>) -> PyResult<()> {
        let c = self.chain(chain)?;
        self.params.initials[c] = InitialDistribution::new(probs).map_err(err)?;
        Ok(())
    }

    /// Row-stochastic K×K transition matrix of `target` given the previous
    /// states of every chain.
    fn transition(&self, target: &str, prev_states: Vec<State>) -> PyResult<Vec<Vec<f64>>> {
        let t = self.chain(target)?;
        let m = chmm_core::build_transition(&self.params.beta, t, &prev_states)
            .map_err(err)?;
        Ok((0..m.num_states()).map(|r| m.row(r).to_vec()).collect())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ModelFile::new(&self.space, self.params.clone()))
    }

    fn __repr__(&self) -> String {
        format!("Params(chains={:?})", self.space.chain_labels())
    }
}

#[pyclass(name = "Dataset", module = "chmm", frozen)]
struct PyDataset(CohortDataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        cio::read_dataset(&path).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_csv_text(text: &str) -> PyResult<Self> {
        cio::ingest(text.as_bytes()).map(Self).map_err(err)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        cio::save_dataset(&path, &self.0).map_err(err)
    }

    fn to_csv_text(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        cio::write_dataset(&mut buf, &self.0).map_err(err)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// Keeps only patients of one arm (`education`/`edu` or
    /// `decolonization`/`decol`).
    fn filter_arm(&self, arm: &str) -> PyResult<Self> {
        let arm = arm.parse().map_err(err)?;
        Ok(Self(self.0.filter_arm(arm)))
    }

    #[getter]
    fn sites(&self) -> Vec<String> {
        self.0.sites().to_vec()
    }

    #[getter]
    fn num_months(&self) -> usize {
        self.0.num_months()
    }

    fn __len__(&self) -> usize {
        self.0.num_patients()
    }

    /// Observation of one patient, site and month; `None` when missing.
    fn get(&self, patient: usize, site: &str, month: usize) -> PyResult<Option<State>> {
        let s = self
            .0
            .sites()
            .iter()
            .position(|x| x == site)
            .ok_or_else(|| err(ChmmError::UnknownSite(site.to_string())))?;
        if patient >= self.0.num_patients() || month >= self.0.num_months() {
            return Err(PyValueError::new_err("patient or month out of range"));
        }
        Ok(self.0.get(patient, s, month))
    }

    /// Per-site, per-month fraction of positive swabs.
    fn observed_curve<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &generative::observed_curve(&self.0, 1))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(patients={}, sites={:?}, months={})",
            self.0.num_patients(),
            self.0.sites(),
            self.0.num_months()
        )
    }
}

#[pyclass(name = "Posterior", module = "chmm", frozen)]
struct PyPosterior(PosteriorSamples);

#[pymethods]
impl PyPosterior {
    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        cio::read_posterior(&dir).map(Self).map_err(err)
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        cio::write_posterior(&self.0, &dir).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn space(&self) -> PyStateSpace {
        PyStateSpace(self.0.space.clone())
    }

    #[getter]
    fn acceptance_rate(&self) -> Vec<f64> {
        self.0.diagnostics.acceptance_rate.clone()
    }

    #[getter]
    fn log_posterior(&self) -> Vec<f64> {
        self.0.diagnostics.log_posterior.clone()
    }

    fn draw(&self, index: usize) -> PyResult<PyParams> {
        let params = self
            .0
            .draws
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no draw {index}")))?;
        Ok(PyParams {
            space: self.0.space.clone(),
            params: params.clone(),
        })
    }

    fn persistence<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &analysis::persistence_summary(&self.0).map_err(err)?)
    }

    #[pyo3(signature = (data, threshold = analysis::DEFAULT_EDGE_THRESHOLD))]
    fn transmission<'py>(
        &self,
        py: Python<'py>,
        data: &PyDataset,
        threshold: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &analysis::transmission_graph(&self.0, &data.0, threshold).map_err(err)?)
    }

    #[pyo3(signature = (data, threshold = analysis::DEFAULT_EDGE_THRESHOLD))]
    fn transmission_dot(&self, data: &PyDataset, threshold: f64) -> PyResult<String> {
        Ok(analysis::transmission_graph(&self.0, &data.0, threshold)
            .map_err(err)?
            .to_dot())
    }

    #[pyo3(signature = (num_patients = 1000, seed = 0, thin = 25, measure = "observed"))]
    fn predictive<'py>(
        &self,
        py: Python<'py>,
        num_patients: usize,
        seed: u64,
        thin: usize,
        measure: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let measure = parse_measure(measure)?;
        let spec = SimulationSpec::visit_schedule(num_patients, seed);
        let curve = py
            .detach(|| generative::posterior_predictive_curve(&self.0, &spec, thin, measure))
            .map_err(err)?;
        to_py(py, &curve)
    }
}

/// Fits the model to one arm. `config` holds sampler settings as a dict.
#[pyfunction]
#[pyo3(signature = (data, config = None))]
fn fit(py: Python<'_>, data: &PyDataset, config: Option<&Bound<'_, PyAny>>) -> PyResult<PyPosterior> {
    let config: McmcConfig = match config {
        Some(c) => from_py(c)?,
        None => McmcConfig::default(),
    };
    py.detach(|| chmm_core::run_mcmc(&data.0, &config))
        .map(PyPosterior)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (params, num_patients = 1000, seed = 0, horizon = 6, arm = "education"))]
fn simulate(
    params: &PyParams,
    num_patients: usize,
    seed: u64,
    horizon: usize,
    arm: &str,
) -> PyResult<PyDataset> {
    let mut spec = SimulationSpec::visit_schedule(num_patients, seed);
    spec.horizon = horizon;
    spec.arm = arm.parse().map_err(err)?;
    spec.schedule.retain(|&m| m <= horizon);
    spec.validate(&params.space).map_err(err)?;
    let (_, data) = generative::simulate_cohort(&params.space, &params.params, &spec).map_err(err)?;
    Ok(PyDataset(data))
}

/// Carriage curve for a protocol such as `"nares=decol,skin=edu,..."`.
#[pyfunction]
#[pyo3(signature = (edu, decol, protocol, num_patients = 1000, seed = 0, thin = 25, measure = "latent", resample = false))]
#[allow(clippy::too_many_arguments)]
fn predict<'py>(
    py: Python<'py>,
    edu: &PyPosterior,
    decol: &PyPosterior,
    protocol: &str,
    num_patients: usize,
    seed: u64,
    thin: usize,
    measure: &str,
    resample: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let measure = parse_measure(measure)?;
    let protocol = ProtocolSpec::parse(&edu.0.space, protocol).map_err(err)?;
    let composed = analysis::compose_protocol(&edu.0, &decol.0, &protocol, resample)
        .map_err(err)?
        .thinned(thin);
    let spec = SimulationSpec::visit_schedule(num_patients, seed);
    let curve = py
        .detach(|| analysis::predict_protocol(&composed, &spec, measure))
        .map_err(err)?;
    to_py(py, &curve)
}

#[pyfunction]
#[pyo3(signature = (edu, decol, num_patients = 1000, seed = 0, setup = None))]
fn contributions<'py>(
    py: Python<'py>,
    edu: &PyPosterior,
    decol: &PyPosterior,
    num_patients: usize,
    seed: u64,
    setup: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let setup: ContributionSetup = match setup {
        Some(s) => from_py(s)?,
        None => ContributionSetup::default(),
    };
    let spec = SimulationSpec::visit_schedule(num_patients, seed);
    let report = py
        .detach(|| analysis::contribution_analysis(&edu.0, &decol.0, &setup, &spec))
        .map_err(err)?;
    to_py(py, &report)
}

/// Compares the forward likelihood, FFBS and simulator against exact
/// joint-state computations on a random small model.
#[pyfunction]
#[pyo3(signature = (chains = 2, months = 3, draws = 20000, seed = 1))]
fn oracle_check<'py>(
    py: Python<'py>,
    chains: usize,
    months: usize,
    draws: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| oracle::oracle_check(chains, months, draws, seed))
        .map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn chmm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ChmmError", m.py().get_type::<ChmmException>())?;
    m.add_class::<PyStateSpace>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(contributions, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    Ok(())
}
