//! Python bindings: environments, index policies, divergence, Pareto
//! filtering, closed-form shaping and full runs.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vortex::metrics::{self, DivergenceKind, FeatureDistribution, PreferenceSpec};
use vortex::orchestrator::{self, RunConfig};
use vortex::shaping::{self, ScalarizationConfig, ShapingReward, UtilityScale};
use vortex::solver::{self, IndexKind};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_kind(kind: &str) -> PyResult<DivergenceKind> {
    kind.parse().map_err(value_err)
}

fn parse_index(kind: &str) -> PyResult<IndexKind> {
    kind.parse().map_err(value_err)
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn pref(target: Vec<f64>, kind: &str) -> PyResult<PreferenceSpec> {
    PreferenceSpec::new("python", FeatureDistribution(target), parse_kind(kind)?).map_err(value_err)
}

/// An arm population with its budget and horizon.
#[pyclass(name = "Environment", module = "vortex_py", frozen)]
struct PyEnvironment {
    inner: vortex::Environment,
}

#[pymethods]
impl PyEnvironment {
    /// Loads `builtin:<name>`, a builtin name, or a JSON file.
    #[new]
    fn new(reference: &str) -> PyResult<Self> {
        Ok(Self {
            inner: vortex::Environment::resolve(reference).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: vortex::Environment::from_json(text).map_err(value_err)?,
        })
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn n_arms(&self) -> usize {
        self.inner.n_arms()
    }

    #[getter]
    fn budget(&self) -> usize {
        self.inner.budget()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    /// Class labels such as `income=High, education=Low`.
    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes().iter().map(|c| c.to_string()).collect()
    }

    #[getter]
    fn class_sizes(&self) -> Vec<usize> {
        self.inner.class_sizes()
    }

    fn summary(&self) -> String {
        self.inner.summary()
    }

    /// Copy with a different horizon.
    fn with_horizon(&self, horizon: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.clone().with_horizon(horizon).map_err(value_err)?,
        })
    }

    /// Index table as `[type][state][h - 1]`.
    #[pyo3(signature = (shaping, kind = "advantage"))]
    fn indices(&self, shaping: Vec<f64>, kind: &str) -> PyResult<Vec<[Vec<f64>; 2]>> {
        let table = solver::compute_indices(&self.inner, &ShapingReward(shaping), self.inner.horizon(), parse_index(kind)?)
            .map_err(value_err)?;
        Ok((0..table.n_types())
            .map(|t| [0u8, 1].map(|s| (1..=table.horizon()).map(|h| table.get(t, s, h)).collect()))
            .collect())
    }

    /// Rolls out the index policy for `shaping`. Returns utility, per-class
    /// pull shares and the acted set of every round.
    #[pyo3(signature = (shaping, seed, kind = "advantage"))]
    fn rollout<'py>(
        &self,
        py: Python<'py>,
        shaping: Vec<f64>,
        seed: u64,
        kind: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let env = &self.inner;
        let mut policy = solver::solve_policy(env, &ShapingReward(shaping), parse_index(kind)?).map_err(value_err)?;
        let traj = py
            .detach(|| vortex::rollout(env, &mut policy, env.horizon(), &mut vortex::rng::stream(seed)))
            .map_err(value_err)?;
        let d = metrics::feature_distribution(&traj, env).map_err(value_err)?;
        let out = serde_json::json!({
            "utility": metrics::utility(&traj),
            "distribution": d.as_slice(),
            "actions": traj.records.iter().map(|r| &r.actions).collect::<Vec<_>>(),
        });
        json_to_py(py, &out.to_string())
    }

    fn __repr__(&self) -> String {
        format!(
            "Environment(name={:?}, N={}, B={}, T={}, classes={})",
            self.inner.name(),
            self.inner.n_arms(),
            self.inner.budget(),
            self.inner.horizon(),
            self.inner.n_classes()
        )
    }
}

/// Divergence of `d` from `target` (`"kl"` or `"tv"`).
#[pyfunction]
#[pyo3(signature = (d, target, kind = "kl"))]
fn divergence(d: Vec<f64>, target: Vec<f64>, kind: &str) -> PyResult<f64> {
    metrics::divergence_between(&d, &target, parse_kind(kind)?).map_err(value_err)
}

/// Partial derivative of the divergence with respect to `d[z]`.
#[pyfunction]
#[pyo3(signature = (d, target, z, kind = "kl"))]
fn divergence_partial(d: Vec<f64>, target: Vec<f64>, z: usize, kind: &str) -> PyResult<f64> {
    shaping::divergence_partial(&FeatureDistribution(d), &pref(target, kind)?, z).map_err(value_err)
}

/// Non-dominated `(utility, divergence)` points, higher utility and lower
/// divergence preferred.
#[pyfunction]
fn pareto_filter(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    metrics::pareto_filter(&points)
}

/// Closed-form shaping vector for a visitation distribution.
#[pyfunction]
#[pyo3(signature = (d, target, lam, budget, horizon, kind = "kl", r_max = 1.0, per_pull = true))]
#[allow(clippy::too_many_arguments)]
fn analytic_shaping(
    d: Vec<f64>,
    target: Vec<f64>,
    lam: f64,
    budget: usize,
    horizon: usize,
    kind: &str,
    r_max: f64,
    per_pull: bool,
) -> PyResult<Vec<f64>> {
    let cfg = ScalarizationConfig {
        r_max,
        utility_scale: if per_pull { UtilityScale::PerPull } else { UtilityScale::Total },
        ..ScalarizationConfig::new(lam, parse_kind(kind)?, budget, horizon)
    };
    let p = pref(target, kind)?;
    Ok(shaping::analytic_shaping(&FeatureDistribution(d), &p, &cfg).map_err(value_err)?.0)
}

/// Runs a config given as a JSON string (or `None` for the defaults) and
/// returns the run result as a dict.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn run_vortex<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: RunConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(value_err)?,
        None => RunConfig::default(),
    };
    let result = py
        .detach(|| orchestrator::run_vortex(&cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let text = serde_json::to_string(&result).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &text)
}

#[pymodule]
fn vortex_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyEnvironment>()?;
    m.add_function(wrap_pyfunction!(divergence, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_partial, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_filter, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_shaping, m)?)?;
    m.add_function(wrap_pyfunction!(run_vortex, m)?)?;
    Ok(())
}
