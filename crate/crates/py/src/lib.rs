//! Python bindings: problem construction from TOML, particle simulation,
//! the mean-field solver, exact 1-Wasserstein distances, and control
//! optimization. Complex results cross the boundary as JSON-compatible
//! dicts or JSON strings so no Python-side schema is needed.

use herd_core::config::ProblemSpec;
use herd_core::cost::{cost_finite, cost_finite_breakdown};
use herd_core::measures::EmpiricalMeasure;
use herd_core::mckean::solve_mckean;
use herd_core::opt::{optimize, Objective, OptProblem};
use herd_core::sim::{simulate_batch, ControlSchedule};
use herd_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::Parameter(_)
        | Error::Unsupported(_)
        | Error::Io(_)
        | Error::SubsampleRequired { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Full problem description: dynamics, populations, cost, and seed.
#[pyclass(module = "herd", skip_from_py_object)]
#[derive(Clone)]
struct Problem {
    inner: ProblemSpec,
}

#[pymethods]
impl Problem {
    /// Parses a problem from its TOML description.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = herd_core::problem_from_toml(text).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    /// Ready-made 1D steering instance: followers chase sampled leaders,
    /// the cost pushes the crowd to a far target.
    #[staticmethod]
    fn example_steering(seed: u64, leaders: usize) -> Self {
        Self { inner: herd_core::studies::steering_benchmark(seed, leaders) }
    }

    fn to_toml(&self) -> PyResult<String> {
        toml::to_string(&self.inner)
            .map_err(|e| PyValueError::new_err(format!("serialization failed: {e}")))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn followers(&self) -> usize {
        self.inner.followers
    }

    #[setter]
    fn set_followers(&mut self, n: usize) {
        self.inner.followers = n;
    }

    #[getter]
    fn leaders(&self) -> usize {
        self.inner.leaders
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(dim={}, followers={}, leaders={}, horizon={}, dt={}, sigma={}, seed={})",
            self.inner.dim,
            self.inner.followers,
            self.inner.leaders,
            self.inner.horizon,
            self.inner.dt,
            self.inner.sigma,
            self.inner.seed
        )
    }
}

fn measure_from_points(points: Vec<Vec<f64>>) -> PyResult<EmpiricalMeasure> {
    EmpiricalMeasure::uniform(points).map_err(to_py_err)
}

/// Exact 1-Wasserstein distance between two uniform atomic measures given
/// as lists of points.
#[pyfunction]
fn wasserstein1(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let ma = measure_from_points(a)?;
    let mb = measure_from_points(b)?;
    herd_core::wasserstein1(&ma, &mb).map_err(to_py_err)
}

/// Runs the finite particle system with zero controls. Returns one dict
/// per realization with times and per-step positions; also reports each
/// realization's total cost.
#[pyfunction]
#[pyo3(signature = (problem, samples = 1, stride = 1))]
fn simulate<'py>(
    py: Python<'py>,
    problem: &Problem,
    samples: u32,
    stride: usize,
) -> PyResult<Bound<'py, PyList>> {
    let spec = &problem.inner;
    spec.validate().map_err(to_py_err)?;
    let controls =
        ControlSchedule::zero(spec.leaders, 1, spec.dim, spec.kappa, spec.gain);
    let plan = spec.noise_plan();
    let batch = simulate_batch(spec, &controls, &plan, samples, stride).map_err(to_py_err)?;
    let out = PyList::empty(py);
    for traj in &batch {
        let d = PyDict::new(py);
        d.set_item("sample", traj.sample_id)?;
        d.set_item("times", traj.times.clone())?;
        let followers: Vec<Vec<Vec<f64>>> = traj
            .states
            .iter()
            .map(|s| (0..spec.followers).map(|i| s.follower(i).to_vec()).collect())
            .collect();
        d.set_item("followers", followers)?;
        let leaders: Vec<Vec<Vec<f64>>> = traj
            .states
            .iter()
            .map(|s| (0..spec.leaders).map(|j| s.leader(j).to_vec()).collect())
            .collect();
        d.set_item("leaders", leaders)?;
        if stride == 1 {
            let single = std::slice::from_ref(traj);
            let breakdown =
                cost_finite_breakdown(single, &controls, &spec.cost).map_err(to_py_err)?;
            d.set_item("cost", cost_finite(single, &controls, &spec.cost).map_err(to_py_err)?)?;
            d.set_item("running_cost", breakdown.lagrangian_part)?;
            d.set_item("control_cost", breakdown.control_part)?;
        }
        out.append(d)?;
    }
    Ok(out)
}

/// Solves the mean-field fixed point with zero controls. Returns solver
/// diagnostics and the final-time law atoms.
#[pyfunction]
#[pyo3(signature = (problem, law_samples = None, tol = 1e-3, max_iter = 50))]
fn solve_law<'py>(
    py: Python<'py>,
    problem: &Problem,
    law_samples: Option<usize>,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = &problem.inner;
    spec.validate().map_err(to_py_err)?;
    let n = law_samples.unwrap_or(spec.law_samples);
    let controls =
        ControlSchedule::zero(spec.leaders, 1, spec.dim, spec.kappa, spec.gain);
    let plan = spec.noise_plan();
    let sol = solve_mckean(spec, &controls, n, tol, max_iter, &plan).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("iterations", sol.iterations)?;
    d.set_item("residual", sol.residual)?;
    d.set_item("residual_history", sol.residual_history.clone())?;
    let last = sol.law_flow.at_index(spec.n_steps());
    let atoms: Vec<Vec<f64>> = (0..last.len()).map(|i| last.atom(i).to_vec()).collect();
    d.set_item("final_atoms", atoms)?;
    d.set_item("final_mean", last.mean())?;
    if spec.leaders > 0 {
        d.set_item("final_leaders", sol.leader_path.last().cloned())?;
    }
    Ok(d)
}

/// Optimizes leader controls and returns the full result as a JSON
/// string (controls, cost, baseline, trace).
#[pyfunction]
#[pyo3(signature = (problem, objective = "finite_particle", n_u = 1, samples = 16, max_iters = 80))]
fn optimize_controls(
    problem: &Problem,
    objective: &str,
    n_u: usize,
    samples: u32,
    max_iters: usize,
) -> PyResult<String> {
    let objective = match objective {
        "finite_particle" => Objective::FiniteParticle,
        "mckean" => Objective::Mckean,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown objective {other:?}; use \"finite_particle\" or \"mckean\""
            )))
        }
    };
    let mut opt = OptProblem::new(problem.inner.clone(), objective, n_u, samples);
    opt.max_iters = max_iters;
    let result = optimize(&opt).map_err(to_py_err)?;
    serde_json::to_string(&result)
        .map_err(|e| PyRuntimeError::new_err(format!("serialization failed: {e}")))
}

#[pymodule]
fn herd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(solve_law, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_controls, m)?)?;
    Ok(())
}
