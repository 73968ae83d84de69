//! Python bindings: group samples, first-stage estimates, MD and pooled GMM
//! fits, and the simulation lab.

use std::collections::HashMap;

use mdgmm::diagnostics;
use mdgmm::first_stage::{estimate_groups, GroupEstimate};
use mdgmm::gmm_estimator::{fit_gmm_pooled, GmmWeights};
use mdgmm::md_estimator::{fit_md, BasisPreset, FitResult, GammaPreset, GroupWeights, OracleSpec};
use mdgmm::moments::{build_did_unit, build_iv_unit, GroupSample, UnitMoment, DEFAULT_RANK_TOL};
use mdgmm::simlab::{self, EstimatorTag};
use mdgmm::Error;
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(
    mdgmm_py,
    DegenerateError,
    PyValueError,
    "The design cannot be solved."
);

fn to_py(e: Error) -> PyErr {
    if e.is_degenerate() {
        DegenerateError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_gamma(name: &str) -> PyResult<GammaPreset> {
    match name {
        "none" => Ok(GammaPreset::None),
        "intercept" => Ok(GammaPreset::Intercept),
        "ones" => Ok(GammaPreset::Ones),
        _ => Err(PyValueError::new_err(format!(
            "unknown gamma preset `{name}`"
        ))),
    }
}

fn parse_basis(name: &str) -> PyResult<BasisPreset> {
    match name {
        "full" => Ok(BasisPreset::Full),
        "scalar" => Ok(BasisPreset::Scalar),
        "diagonal" => Ok(BasisPreset::Diagonal),
        "effect" => Ok(BasisPreset::Effect),
        _ => Err(PyValueError::new_err(format!(
            "unknown basis preset `{name}`"
        ))),
    }
}

fn parse_weights(name: &str) -> PyResult<GroupWeights> {
    match name {
        "unit" => Ok(GroupWeights::Unit),
        "group_size" => Ok(GroupWeights::GroupSize),
        _ => Err(PyValueError::new_err(format!("unknown weighting `{name}`"))),
    }
}

/// Second-stage design.
#[pyclass(name = "Spec", frozen)]
#[derive(Clone)]
struct PySpec {
    inner: OracleSpec,
}

#[pymethods]
impl PySpec {
    /// Design from presets: gamma in {none, intercept, ones}, basis in
    /// {full, scalar, diagonal, effect}, weights in {unit, group_size}.
    #[new]
    #[pyo3(signature = (k, p, gamma = "none", basis = "full", weights = "unit"))]
    fn new(k: usize, p: usize, gamma: &str, basis: &str, weights: &str) -> PyResult<Self> {
        let spec = OracleSpec::from_presets(k, p, parse_gamma(gamma)?, parse_basis(basis)?)
            .map_err(to_py)?;
        Ok(Self {
            inner: spec.with_weights(parse_weights(weights)?),
        })
    }

    /// Group effect on the first coordinate, policies move the second.
    #[staticmethod]
    fn did_effect(p: usize) -> PyResult<Self> {
        Ok(Self {
            inner: OracleSpec::did_effect(p).map_err(to_py)?,
        })
    }

    /// Explicit `k x q` gamma and a list of `k x p` basis matrices, row by row.
    #[staticmethod]
    fn custom(
        gamma: Vec<Vec<f64>>,
        basis: Vec<Vec<Vec<f64>>>,
        k: usize,
        p: usize,
    ) -> PyResult<Self> {
        let mut g = matrix(&gamma)?;
        if gamma.is_empty() {
            g = DMatrix::zeros(k, 0);
        }
        let b = basis
            .iter()
            .map(|m| matrix(m))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: OracleSpec::new(k, p, g, b).map_err(to_py)?,
        })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }

    fn __repr__(&self) -> String {
        format!(
            "Spec(k={}, p={}, q={}, m={})",
            self.inner.k(),
            self.inner.p(),
            self.inner.q(),
            self.inner.m()
        )
    }
}

/// Unit moments grouped by id, in order of first appearance.
#[pyclass(name = "Samples", frozen)]
struct PySamples {
    inner: Vec<GroupSample>,
}

fn group_units(ids: &[String], units: Vec<UnitMoment>) -> PyResult<Vec<GroupSample>> {
    let mut order: Vec<String> = Vec::new();
    let mut buckets: HashMap<&str, Vec<UnitMoment>> = HashMap::new();
    for (id, u) in ids.iter().zip(units) {
        buckets
            .entry(id.as_str())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push(u);
    }
    order
        .into_iter()
        .map(|id| {
            let units = buckets.remove(id.as_str()).unwrap_or_default();
            GroupSample::new(id, units).map_err(to_py)
        })
        .collect()
}

fn same_length(lens: &[usize]) -> PyResult<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(PyValueError::new_err(
            "input columns have different lengths",
        ));
    }
    Ok(())
}

#[pymethods]
impl PySamples {
    /// Differenced outcomes with a binary treatment.
    #[staticmethod]
    fn did(group_ids: Vec<String>, delta_y: Vec<f64>, e: Vec<f64>) -> PyResult<Self> {
        same_length(&[group_ids.len(), delta_y.len(), e.len()])?;
        let units = delta_y
            .iter()
            .zip(&e)
            .map(|(y, e)| build_did_unit(*y, *e))
            .collect::<Result<Vec<_>, _>>();
        Ok(Self {
            inner: group_units(&group_ids, units.map_err(to_py)?)?,
        })
    }

    /// Differenced outcomes with treatment `e` and binary instrument `z`.
    #[staticmethod]
    fn iv(group_ids: Vec<String>, delta_y: Vec<f64>, e: Vec<f64>, z: Vec<f64>) -> PyResult<Self> {
        same_length(&[group_ids.len(), delta_y.len(), e.len(), z.len()])?;
        let units = (0..delta_y.len())
            .map(|i| build_iv_unit(delta_y[i], e[i], z[i]))
            .collect::<Result<Vec<_>, _>>();
        Ok(Self {
            inner: group_units(&group_ids, units.map_err(to_py)?)?,
        })
    }

    #[getter]
    fn group_ids(&self) -> Vec<String> {
        self.inner
            .iter()
            .map(|s| s.group_id().to_string())
            .collect()
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.inner.iter().map(GroupSample::n_g).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// First-stage result for one group.
#[pyclass(name = "GroupEstimate", frozen, get_all)]
struct PyGroupEstimate {
    group_id: String,
    n_g: usize,
    omega: bool,
    theta_hat: Option<Vec<f64>>,
}

impl From<&GroupEstimate> for PyGroupEstimate {
    fn from(e: &GroupEstimate) -> Self {
        Self {
            group_id: e.group_id.clone(),
            n_g: e.n_g,
            omega: e.omega,
            theta_hat: e.theta_hat.as_ref().map(|t| t.iter().copied().collect()),
        }
    }
}

#[pymethods]
impl PyGroupEstimate {
    fn __repr__(&self) -> String {
        format!(
            "GroupEstimate({:?}, n_g={}, theta_hat={:?})",
            self.group_id, self.n_g, self.theta_hat
        )
    }
}

/// Second-stage fit.
#[pyclass(name = "Fit", frozen, get_all)]
struct PyFit {
    /// `(name, estimate, std_error)` for every intercept and basis coefficient.
    coefficients: Vec<(String, f64, f64)>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    b_hat: Vec<Vec<f64>>,
    vcov: Vec<Vec<f64>>,
    n_used: usize,
    n_dropped: usize,
    pseudo_inverse: bool,
    residuals: HashMap<String, Option<Vec<f64>>>,
}

impl PyFit {
    fn new(fit: &FitResult, spec: &OracleSpec) -> Self {
        Self {
            coefficients: fit
                .coefficients(spec)
                .into_iter()
                .map(|c| (c.name, c.estimate, c.std_error))
                .collect(),
            alpha: fit.alpha_hat.iter().copied().collect(),
            beta: fit.b_coefficients.iter().copied().collect(),
            b_hat: rows(&fit.b_hat),
            vcov: rows(&fit.vcov),
            n_used: fit.n_used,
            n_dropped: fit.n_dropped,
            pseudo_inverse: fit.pseudo_inverse,
            residuals: fit
                .residuals()
                .map(|(id, r)| (id.to_string(), r.map(|v| v.iter().copied().collect())))
                .collect(),
        }
    }
}

#[pymethods]
impl PyFit {
    fn __repr__(&self) -> String {
        format!(
            "Fit(beta={:?}, n_used={}, n_dropped={})",
            self.beta, self.n_used, self.n_dropped
        )
    }
}

fn policy_vectors(policies: Vec<Vec<f64>>, groups: usize) -> PyResult<Vec<DVector<f64>>> {
    if policies.len() != groups {
        return Err(PyValueError::new_err(format!(
            "{} policy rows for {groups} groups",
            policies.len()
        )));
    }
    Ok(policies.into_iter().map(DVector::from_vec).collect())
}

/// Group-by-group first stage.
#[pyfunction]
#[pyo3(signature = (samples, rank_tol = DEFAULT_RANK_TOL))]
fn first_stage(samples: &PySamples, rank_tol: f64) -> PyResult<Vec<PyGroupEstimate>> {
    let est = estimate_groups(&samples.inner, rank_tol).map_err(to_py)?;
    Ok(est.iter().map(PyGroupEstimate::from).collect())
}

/// Two-step minimum distance: first stage per group, then the second stage
/// on the groups with a unique solution. `policies` holds one row per group
/// in the order of `samples.group_ids`.
#[pyfunction(name = "fit_md")]
#[pyo3(signature = (samples, policies, spec, rank_tol = DEFAULT_RANK_TOL))]
fn py_fit_md(
    samples: &PySamples,
    policies: Vec<Vec<f64>>,
    spec: &PySpec,
    rank_tol: f64,
) -> PyResult<PyFit> {
    let policies = policy_vectors(policies, samples.inner.len())?;
    let est = estimate_groups(&samples.inner, rank_tol).map_err(to_py)?;
    let fit = fit_md(&est, &policies, &spec.inner).map_err(to_py)?;
    Ok(PyFit::new(&fit, &spec.inner))
}

/// Identity-weighted one-step GMM on the pooled unit moments.
#[pyfunction(name = "fit_gmm")]
fn py_fit_gmm(samples: &PySamples, policies: Vec<Vec<f64>>, spec: &PySpec) -> PyResult<PyFit> {
    let policies = policy_vectors(policies, samples.inner.len())?;
    let fit = fit_gmm_pooled(
        &samples.inner,
        &policies,
        &spec.inner,
        &GmmWeights::Identity,
    )
    .map_err(to_py)?;
    Ok(PyFit::new(&fit, &spec.inner))
}

/// Names of the shipped scenarios.
#[pyfunction]
fn scenario_names() -> Vec<&'static str> {
    simlab::PRESET_NAMES.to_vec()
}

fn scenario(
    name: &str,
    seed: Option<u64>,
    groups: Option<usize>,
) -> PyResult<simlab::ScenarioConfig> {
    let mut cfg = simlab::preset(name).map_err(to_py)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(groups) = groups {
        cfg.groups = groups;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

type Replication = (PySamples, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// One replication of a shipped scenario: `(samples, policies, true_thetas)`.
/// Policies are restricted to the columns the second stage uses.
#[pyfunction]
#[pyo3(signature = (name, replication = 0, seed = None, groups = None))]
fn simulate(
    name: &str,
    replication: u64,
    seed: Option<u64>,
    groups: Option<usize>,
) -> PyResult<Replication> {
    let cfg = scenario(name, seed, groups)?;
    let data = simlab::simulate(&cfg, replication).map_err(to_py)?;
    let samples = data.to_samples().map_err(to_py)?;
    let policies = data
        .policy_columns(&cfg.used_policies())
        .into_iter()
        .map(|w| w.iter().copied().collect())
        .collect();
    let thetas = data
        .true_thetas
        .iter()
        .map(|t| t.iter().copied().collect())
        .collect();
    Ok((PySamples { inner: samples }, policies, thetas))
}

/// Monte Carlo study on a shipped scenario. Returns a dict with `truth`,
/// `summaries` (one dict per estimator and coefficient) and
/// `bound_violations`.
#[pyfunction]
#[pyo3(signature = (name, estimators, replications, seed = None, groups = None))]
fn monte_carlo<'py>(
    py: Python<'py>,
    name: &str,
    estimators: Vec<String>,
    replications: usize,
    seed: Option<u64>,
    groups: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = scenario(name, seed, groups)?;
    let tags = estimators
        .iter()
        .map(|s| s.parse::<EstimatorTag>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let mc = py
        .detach(|| simlab::run_monte_carlo(&cfg, &tags, replications))
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("scenario", &mc.scenario)?;
    out.set_item("replications", mc.replications)?;
    out.set_item("truth", &mc.truth)?;
    let mut rows = Vec::with_capacity(mc.summaries.len());
    for s in &mc.summaries {
        let d = PyDict::new(py);
        d.set_item("estimator", s.estimator.as_str())?;
        d.set_item("coefficient", &s.coefficient)?;
        d.set_item("failures", s.failures)?;
        d.set_item("mean", s.mean)?;
        d.set_item("sd", s.sd)?;
        d.set_item("mc_se", s.mc_se)?;
        d.set_item("truth", s.truth)?;
        d.set_item("bias", s.bias)?;
        d.set_item("coverage", s.coverage)?;
        d.set_item("mean_dropped_share", s.mean_dropped_share)?;
        d.set_item("mean_abs_diff_oracle", s.mean_abs_diff_oracle)?;
        rows.push(d);
    }
    out.set_item("summaries", rows)?;
    out.set_item("bound_violations", mc.bound_violations(1e-9))?;
    Ok(out)
}

/// Weight a group receives in the banking application.
#[pyfunction]
fn banking_weight(p_a: f64, p_b: f64) -> PyResult<f64> {
    diagnostics::banking_weight(p_a, p_b).map_err(to_py)
}

#[pymodule]
fn mdgmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PySamples>()?;
    m.add_class::<PyGroupEstimate>()?;
    m.add_class::<PyFit>()?;
    m.add("DegenerateError", m.py().get_type::<DegenerateError>())?;
    m.add_function(wrap_pyfunction!(first_stage, m)?)?;
    m.add_function(wrap_pyfunction!(py_fit_md, m)?)?;
    m.add_function(wrap_pyfunction!(py_fit_gmm, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_names, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(banking_weight, m)?)?;
    Ok(())
}
