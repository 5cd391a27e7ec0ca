//! Python bindings for the `detpol` crate.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use detpol::analytic;
use detpol::bandwidth::BandwidthGrid;
use detpol::env::{self, BehaviorModel, DeterministicPolicy, EnvConfig, PolicyForm, Trajectory};
use detpol::estimators::{EstimateReport, Estimator};
use detpol::harness::{self, ExperimentConfig, ExperimentResult};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Env", module = "detpol_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyEnv(EnvConfig);

#[pymethods]
impl PyEnv {
    /// `s' = a - s + Normal(0, 0.3^2)`, `r = -s'^2`, `s_1 = 0`.
    #[staticmethod]
    #[pyo3(signature = (horizon = 5))]
    fn standard(horizon: usize) -> PyResult<Self> {
        let cfg = EnvConfig::standard(horizon);
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    /// One step with `s_1 ~ Normal(0, 1)`.
    #[staticmethod]
    #[pyo3(signature = (noise_std = 0.3))]
    fn bandit(noise_std: f64) -> PyResult<Self> {
        let cfg = EnvConfig::bandit(noise_std);
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon
    }

    #[getter]
    fn noise_std(&self) -> f64 {
        self.0.noise_std
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id()
    }

    fn __repr__(&self) -> String {
        format!("Env({})", self.0.id())
    }
}

#[pyclass(name = "Behavior", module = "detpol_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyBehavior(BehaviorModel);

#[pymethods]
impl PyBehavior {
    /// Gaussian behavior `a ~ Normal(mean_coeff * s, std^2)`.
    #[new]
    #[pyo3(signature = (mean_coeff = 0.8, std = 1.0))]
    fn new(mean_coeff: f64, std: f64) -> PyResult<Self> {
        BehaviorModel::linear(mean_coeff, std).map(Self).map_err(err)
    }

    fn density(&self, s: f64, a: f64) -> f64 {
        self.0.density(s, a)
    }
}

#[pyclass(name = "Policy", module = "detpol_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyPolicy(DeterministicPolicy);

#[pymethods]
impl PyPolicy {
    /// `form` is `"linear"` (`theta_0 * s`) or `"affine"`
    /// (`theta_0 + theta_1 * s`).
    #[new]
    #[pyo3(signature = (theta, form = "linear"))]
    fn new(theta: Vec<f64>, form: &str) -> PyResult<Self> {
        let form = match form.to_ascii_lowercase().as_str() {
            "linear" => PolicyForm::Linear,
            "affine" => PolicyForm::Affine,
            other => return Err(err(format!("unknown policy form {other:?}"))),
        };
        DeterministicPolicy::new(form, theta).map(Self).map_err(err)
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.0.theta().to_vec()
    }

    fn action(&self, s: f64) -> f64 {
        self.0.action(s)
    }

    fn gradient(&self, s: f64) -> Vec<f64> {
        self.0.gradient(s)
    }

    fn __repr__(&self) -> String {
        format!("Policy({:?}, {:?})", self.0.theta(), self.0.form())
    }
}

#[pyclass(name = "Dataset", module = "detpol_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyDataset(env::Dataset);

#[pymethods]
impl PyDataset {
    /// Builds a dataset from `n x H` nested lists.
    #[staticmethod]
    #[pyo3(signature = (states, actions, rewards, env_id = "external".to_string()))]
    fn from_arrays(
        states: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<Vec<f64>>,
        env_id: String,
    ) -> PyResult<Self> {
        if states.len() != actions.len() || states.len() != rewards.len() {
            return Err(err("states, actions and rewards need the same number of rows"));
        }
        let trajectories = states
            .into_iter()
            .zip(actions)
            .zip(rewards)
            .map(|((s, a), r)| Trajectory::new(s, a, r))
            .collect::<detpol::Result<Vec<_>>>()
            .map_err(err)?;
        env::Dataset::new(trajectories, 0, env_id).map(Self).map_err(err)
    }

    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        let id = path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
        let file = std::fs::File::open(&path).map_err(err)?;
        env::Dataset::read_csv(std::io::BufReader::new(file), id).map(Self).map_err(err)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(&path).map_err(err)?;
        self.0.write_csv(std::io::BufWriter::new(file)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon
    }

    #[getter]
    fn states(&self) -> Vec<Vec<f64>> {
        self.0.trajectories.iter().map(|t| t.states.clone()).collect()
    }

    #[getter]
    fn actions(&self) -> Vec<Vec<f64>> {
        self.0.trajectories.iter().map(|t| t.actions.clone()).collect()
    }

    #[getter]
    fn rewards(&self) -> Vec<Vec<f64>> {
        self.0.trajectories.iter().map(|t| t.rewards.clone()).collect()
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.0.len()) {
            return Err(err(format!("index {i} out of range")));
        }
        Ok(Self(self.0.subset(&indices)))
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, horizon={}, env={})", self.0.len(), self.0.horizon, self.0.env_id)
    }
}

#[pyclass(name = "Report", module = "detpol_py", frozen, skip_from_py_object)]
struct PyReport(EstimateReport);

#[pymethods]
impl PyReport {
    #[getter]
    fn variant(&self) -> String {
        self.0.variant.clone()
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }

    #[getter]
    fn h(&self) -> f64 {
        self.0.h
    }

    /// One entry for value estimators, `d` for gradients.
    #[getter]
    fn estimate(&self) -> Vec<f64> {
        self.0.estimate.clone()
    }

    #[getter]
    fn se(&self) -> Vec<f64> {
        self.0.se()
    }

    #[getter]
    fn per_trajectory(&self) -> Vec<Vec<f64>> {
        self.0.per_trajectory.clone()
    }

    #[getter]
    fn clip_count(&self) -> usize {
        self.0.clip_count
    }

    fn __repr__(&self) -> String {
        format!("Report({}, n={}, h={}, estimate={:?})", self.0.variant, self.0.n, self.0.h, self.0.estimate)
    }
}

#[pyclass(name = "Config", module = "detpol_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    /// Parses an experiment configuration; the empty string gives the
    /// defaults.
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml(toml).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(Self).map_err(err)
    }

    fn paper_scale(&self) -> Self {
        Self(self.0.clone().paper_scale())
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml().map_err(err)
    }

    #[getter]
    fn hash(&self) -> String {
        self.0.hash()
    }

    #[getter]
    fn env(&self) -> PyEnv {
        PyEnv(self.0.env)
    }

    #[getter]
    fn behavior(&self) -> PyBehavior {
        PyBehavior(self.0.behavior.clone())
    }

    #[getter]
    fn eval_policy(&self) -> PyResult<PyPolicy> {
        self.0.eval_policy().map(PyPolicy).map_err(err)
    }

    #[pyo3(signature = (cache_dir = None))]
    fn run_mse(&self, py: Python<'_>, cache_dir: Option<PathBuf>) -> PyResult<PyExperiment> {
        let cfg = &self.0;
        py.detach(|| harness::run_mse_experiment(cfg, cache_dir.as_deref()))
            .map(PyExperiment)
            .map_err(err)
    }

    #[pyo3(signature = (cache_dir = None))]
    fn run_regret(&self, py: Python<'_>, cache_dir: Option<PathBuf>) -> PyResult<PyExperiment> {
        let cfg = &self.0;
        py.detach(|| harness::run_regret_experiment(cfg, cache_dir.as_deref()))
            .map(PyExperiment)
            .map_err(err)
    }
}

#[pyclass(name = "Experiment", module = "detpol_py", frozen, skip_from_py_object)]
struct PyExperiment(ExperimentResult);

#[pymethods]
impl PyExperiment {
    #[getter]
    fn config_hash(&self) -> String {
        self.0.config_hash.clone()
    }

    #[getter]
    fn failures(&self) -> usize {
        self.0.failures()
    }

    fn summary_csv(&self) -> PyResult<String> {
        self.0.summary_csv().map_err(err)
    }

    fn summary_json(&self) -> String {
        self.0.summary_json()
    }

    fn replications_csv(&self) -> PyResult<String> {
        self.0.replications_csv().map_err(err)
    }

    /// Writes the result files and returns their paths.
    fn write(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        self.0.write(&dir).map_err(err)
    }
}

/// Trajectories from the Gaussian behavior policy.
#[pyfunction]
#[pyo3(signature = (env, behavior, n, seed = 0))]
fn simulate(env: &PyEnv, behavior: &PyBehavior, n: usize, seed: u64) -> PyResult<PyDataset> {
    env::simulate(&env.0, &behavior.0, n, seed).map(PyDataset).map_err(err)
}

/// Cross-fits the nuisances and runs the named estimator. Without `h` the
/// bandwidth comes from the config: its fixed bandwidth if set, otherwise
/// bootstrap selection over its grid.
#[pyfunction]
#[pyo3(signature = (data, policy, estimator, h = None, config = None, seed = 0))]
fn estimate(
    py: Python<'_>,
    data: &PyDataset,
    policy: &PyPolicy,
    estimator: &str,
    h: Option<f64>,
    config: Option<&PyConfig>,
    seed: u64,
) -> PyResult<PyReport> {
    let est: Estimator = estimator.parse().map_err(err)?;
    let cfg = config.map_or_else(ExperimentConfig::default, |c| c.0.clone());
    let recipe = cfg.recipe(est);
    py.detach(|| {
        let h = match h.or(cfg.fixed_bandwidth) {
            Some(h) => h,
            None => recipe.select_bandwidth(&data.0, &policy.0, &cfg.grid, cfg.frozen_bootstrap, seed)?.h_star,
        };
        recipe.run(&data.0, &policy.0, h, seed)
    })
    .map(PyReport)
    .map_err(err)
}

/// Bootstrap bandwidth choice; returns `(h_star, [(h, variance), ...])`.
#[pyfunction]
#[pyo3(signature = (data, policy, estimator, candidates, replicates = 100, frozen = false, config = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn select_bandwidth(
    py: Python<'_>,
    data: &PyDataset,
    policy: &PyPolicy,
    estimator: &str,
    candidates: Vec<f64>,
    replicates: usize,
    frozen: bool,
    config: Option<&PyConfig>,
    seed: u64,
) -> PyResult<(f64, Vec<(f64, f64)>)> {
    let est: Estimator = estimator.parse().map_err(err)?;
    let cfg = config.map_or_else(ExperimentConfig::default, |c| c.0.clone());
    let grid = BandwidthGrid { candidates, replicates };
    let sel = py
        .detach(|| cfg.recipe(est).select_bandwidth(&data.0, &policy.0, &grid, frozen, seed))
        .map_err(err)?;
    Ok((sel.h_star, sel.table.iter().map(|r| (r.h, r.variance)).collect()))
}

/// Monte Carlo value `(mean, se)` from on-policy rollouts.
#[pyfunction]
#[pyo3(signature = (env, policy, n_mc = 100_000, seed = 0))]
fn oracle_value(py: Python<'_>, env: &PyEnv, policy: &PyPolicy, n_mc: usize, seed: u64) -> PyResult<(f64, f64)> {
    let v = py.detach(|| env::oracle_value(&env.0, &policy.0, n_mc, seed)).map_err(err)?;
    Ok((v.value, v.se))
}

/// Finite-difference gradient of the Monte Carlo value, `(gradient, se)`.
#[pyfunction]
#[pyo3(signature = (env, policy, n_mc = 100_000, delta = 1e-2, seed = 0))]
fn oracle_gradient(
    py: Python<'_>,
    env: &PyEnv,
    policy: &PyPolicy,
    n_mc: usize,
    delta: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let g = py
        .detach(|| env::oracle_gradient(&env.0, &policy.0, n_mc, delta, seed))
        .map_err(err)?;
    Ok((g.gradient, g.se))
}

/// Closed-form value for the linear-Gaussian environment.
#[pyfunction]
fn analytic_value(env: &PyEnv, policy: &PyPolicy) -> PyResult<f64> {
    analytic::analytic_value(&env.0, &policy.0).map_err(err)
}

/// Kernel constant checks; returns `(passed, [(name, abs_error, tolerance), ...])`.
#[pyfunction]
fn selfcheck() -> (bool, Vec<(String, f64, f64)>) {
    let report = harness::kernel_selfcheck();
    let checks = report.checks.iter().map(|c| (c.name.clone(), c.abs_error, c.tolerance)).collect();
    (report.passed(), checks)
}

#[pymodule]
fn detpol_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyBehavior>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(select_bandwidth, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_value, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_value, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}
