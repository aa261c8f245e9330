//! Python bindings for the chmc sampler.
//!
//! Exposes benchmark problems, gauge potentials, the integrator step, gauge
//! fitting, full runs and the benchmark table. Vectors cross the boundary as
//! lists of floats; reports come back as plain dicts.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use chmc::bench::{annotate_report, run_table1 as bench_table1, second_moment_truth, Table1Settings};
use chmc::config::RunConfig;
use chmc::dynamics::{counterdiabatic_leapfrog, ParticleState};
use chmc::gauge::{Activation, GaugeKind, GaugePotential};
use chmc::output::write_run;
use chmc::rng::{stream, Purpose};
use chmc::smc::run_chmc;
use chmc::systems::{make_benchmark, BenchmarkName, HamiltonianProblem, MixtureParams};
use chmc::training::{fit_gauge_potential, FitConfig};
use chmc::{validate as checks, ChmcError};

fn py_err(e: ChmcError) -> PyErr {
    match e {
        ChmcError::Config(_) | ChmcError::Contract(_) => PyValueError::new_err(e.to_string()),
        ChmcError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn states_from(qs: Vec<Vec<f64>>, ps: Vec<Vec<f64>>) -> PyResult<Vec<ParticleState>> {
    if qs.len() != ps.len() {
        return Err(PyValueError::new_err("qs and ps differ in length"));
    }
    Ok(qs.into_iter().zip(ps).map(|(q, p)| ParticleState::new(q, p)).collect())
}

/// A benchmark Hamiltonian `V_lambda(q) + |p|^2 / 2`.
#[pyclass(name = "Problem", module = "pychmc", frozen)]
struct PyProblem {
    inner: HamiltonianProblem,
    name: BenchmarkName,
}

#[pymethods]
impl PyProblem {
    #[new]
    #[pyo3(signature = (name, dim=1, a=2.0, sigma=0.5))]
    fn new(name: &str, dim: usize, a: f64, sigma: f64) -> PyResult<Self> {
        let bench: BenchmarkName = name.parse().map_err(py_err)?;
        let inner = make_benchmark(bench, dim, MixtureParams { a, sigma }).map_err(py_err)?;
        Ok(PyProblem { inner, name: bench })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.name.as_str()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn potential(&self, lam: f64, q: Vec<f64>) -> PyResult<f64> {
        self.check(&q)?;
        Ok(self.inner.potential(lam, &q))
    }

    fn grad_q(&self, lam: f64, q: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&q)?;
        Ok(self.inner.grad_q_potential(lam, &q))
    }

    fn dlambda(&self, lam: f64, q: Vec<f64>) -> PyResult<f64> {
        self.check(&q)?;
        Ok(self.inner.dlambda_potential(lam, &q))
    }

    fn hamiltonian(&self, lam: f64, q: Vec<f64>, p: Vec<f64>) -> PyResult<f64> {
        self.check(&q)?;
        self.check(&p)?;
        Ok(self.inner.hamiltonian(lam, &q, &p))
    }

    fn __repr__(&self) -> String {
        format!("Problem({:?}, dim={})", self.name.as_str(), self.inner.dim())
    }
}

impl PyProblem {
    fn check(&self, v: &[f64]) -> PyResult<()> {
        if v.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!(
                "expected a vector of length {}, got {}",
                self.inner.dim(),
                v.len()
            )));
        }
        Ok(())
    }
}

/// A parametrised gauge potential `A(q, p)`.
#[pyclass(name = "Gauge", module = "pychmc")]
struct PyGauge {
    inner: GaugePotential,
}

#[pymethods]
impl PyGauge {
    /// Polynomial gauge with all monomials up to `order` (constant excluded), zero coefficients.
    #[staticmethod]
    #[pyo3(signature = (order, dim=1))]
    fn polynomial(order: usize, dim: usize) -> PyResult<Self> {
        Ok(PyGauge { inner: GaugePotential::polynomial(dim, order).map_err(py_err)? })
    }

    /// MLP gauge with random hidden weights and a zero output layer.
    #[staticmethod]
    #[pyo3(signature = (hidden_sizes=vec![32, 64], activation="relu", dim=1, seed=0))]
    fn mlp(hidden_sizes: Vec<usize>, activation: &str, dim: usize, seed: u64) -> PyResult<Self> {
        let act = match activation {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(PyValueError::new_err(format!("unknown activation '{other}'"))),
        };
        let mut rng = stream(seed, Purpose::GaugeInit, 0);
        Ok(PyGauge { inner: GaugePotential::mlp_init(dim, hidden_sizes, act, &mut rng).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyGauge { inner: GaugePotential::from_json(text).map_err(py_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    #[setter]
    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(params).map_err(py_err)
    }

    /// Monomial labels such as `"q^2 p"`, for polynomial gauges.
    fn labels(&self) -> Option<Vec<String>> {
        self.inner.basis().map(|b| (0..b.len()).map(|k| b.label(k)).collect())
    }

    fn evaluate(&self, q: Vec<f64>, p: Vec<f64>) -> PyResult<f64> {
        self.inner.evaluate(&q, &p).map_err(py_err)
    }

    /// `(grad_q A, grad_p A)`.
    fn input_gradients(&self, q: Vec<f64>, p: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        self.inner.input_gradients(&q, &p).map_err(py_err)
    }

    /// Poisson bracket `{A, H}` at `(q, p)`.
    fn bracket(&self, problem: &PyProblem, lam: f64, q: Vec<f64>, p: Vec<f64>) -> PyResult<f64> {
        self.inner.poisson_bracket_with_h(&problem.inner, lam, &q, &p).map_err(py_err)
    }

    /// Training loss and its parameter gradient on a weighted point set.
    fn loss(
        &self,
        problem: &PyProblem,
        lam: f64,
        qs: Vec<Vec<f64>>,
        ps: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> PyResult<(f64, Vec<f64>)> {
        let states = states_from(qs, ps)?;
        self.inner.loss_and_param_gradient(&problem.inner, lam, &states, &weights).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let kind = match self.inner.kind() {
            GaugeKind::Polynomial { order } => format!("polynomial, order={order}"),
            GaugeKind::Mlp { hidden_sizes, activation } => format!("mlp, hidden_sizes={hidden_sizes:?}, {activation:?}"),
        };
        format!("Gauge({kind}, dim={}, params={})", self.inner.dim(), self.inner.num_params())
    }
}

/// Adam fit of `gauge` on a weighted point set; returns `(fitted, losses)`.
#[pyfunction]
#[pyo3(signature = (gauge, problem, lam, qs, ps, weights, iterations=200, learning_rate=0.01))]
#[allow(clippy::too_many_arguments)]
fn fit_gauge(
    gauge: &PyGauge,
    problem: &PyProblem,
    lam: f64,
    qs: Vec<Vec<f64>>,
    ps: Vec<Vec<f64>>,
    weights: Vec<f64>,
    iterations: usize,
    learning_rate: f64,
) -> PyResult<(PyGauge, Vec<f64>)> {
    let states = states_from(qs, ps)?;
    let cfg = FitConfig { iterations, learning_rate, trace: true, ..FitConfig::default() };
    let out = fit_gauge_potential(&gauge.inner, &problem.inner, lam, &states, &weights, &cfg).map_err(py_err)?;
    Ok((PyGauge { inner: out.gauge }, out.losses))
}

/// One counterdiabatic integrator step from `(q, p)`; `gauge=None` is the plain leapfrog.
#[pyfunction]
#[pyo3(signature = (problem, gauge, lam, lam_dot, epsilon, q, p))]
fn leapfrog(
    problem: &PyProblem,
    gauge: Option<&PyGauge>,
    lam: f64,
    lam_dot: f64,
    epsilon: f64,
    q: Vec<f64>,
    p: Vec<f64>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = ParticleState::new(q, p);
    let out = counterdiabatic_leapfrog(&problem.inner, gauge.map(|g| &g.inner), lam, lam_dot, epsilon, &s)
        .map_err(py_err)?;
    Ok((out.q, out.p))
}

/// Runs a config given as a JSON string and returns the report as a dict.
/// With `write=True` the usual output files are written to the config's `output_dir`.
#[pyfunction]
#[pyo3(signature = (config_json, write=false))]
fn run<'py>(py: Python<'py>, config_json: &str, write: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = RunConfig::from_json(config_json).map_err(py_err)?;
    let r = cfg.resolve().map_err(py_err)?;
    let mut out = py.detach(|| run_chmc(&r.problem, &r.schedule, &r.settings)).map_err(py_err)?;
    annotate_report(&mut out.report, &r.problem).map_err(py_err)?;
    if write {
        write_run(&r.output_dir, &out).map_err(py_err)?;
    }
    json_to_py(py, &to_json(&out.report)?)
}

/// The benchmark table over `seeds` as a dict with `rows` and `summary`.
#[pyfunction]
#[pyo3(signature = (seeds, settings_json=None))]
fn run_table1<'py>(py: Python<'py>, seeds: Vec<u64>, settings_json: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let settings: Table1Settings = match settings_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => Table1Settings::default(),
    };
    let table = py.detach(|| bench_table1(&settings, &seeds)).map_err(py_err)?;
    json_to_py(py, &to_json(&table)?)
}

/// `E[q^2]` and `Var[q^2]` under the 1-D target at `lam`.
#[pyfunction]
fn oracle<'py>(py: Python<'py>, system: &str, lam: f64) -> PyResult<Bound<'py, PyAny>> {
    let name: BenchmarkName = system.parse().map_err(py_err)?;
    let problem = make_benchmark(name, 1, MixtureParams::default()).map_err(py_err)?;
    let truth = second_moment_truth(&problem, lam).map_err(py_err)?;
    json_to_py(py, &to_json(&truth)?)
}

/// Runs the validation suite; returns `(all_passed, table)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn validate(py: Python<'_>, seed: u64) -> (bool, String) {
    let report = py.detach(|| checks::run(&checks::Suite { seed, ..checks::Suite::default() }));
    (report.all_passed(), report.table())
}

#[pyfunction]
fn benchmark_names() -> Vec<&'static str> {
    BenchmarkName::ALL.iter().map(|b| b.as_str()).collect()
}

#[pymodule]
fn pychmc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PyGauge>()?;
    m.add_function(wrap_pyfunction!(fit_gauge, m)?)?;
    m.add_function(wrap_pyfunction!(leapfrog, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_table1, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_names, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
