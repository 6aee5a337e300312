//! Python bindings. Matrices cross the boundary as lists of rows.

use std::collections::HashMap;

use gbmei_core::harness::{self, ExperimentConfig, MomentConfig, Reference};
use gbmei_core::model::{self, BuiltinParams, BUILTIN_PROBLEMS};
use gbmei_core::noise::{GridSpec, NoiseBatch, DEFAULT_LEVY_TERMS};
use gbmei_core::schemes::{self, SchemeKind, SchemeSpec};
use gbmei_core::{matexp, Error, Mat, SdeProblem};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::ExclusionLimit { .. } | Error::NonFinite(_) | Error::Singular => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_mat(rows: &[Vec<f64>]) -> PyResult<Mat> {
    Mat::from_rows(rows).map_err(py_err)
}

fn chunks(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks(width).map(<[f64]>::to_vec).collect()
}

#[pyclass(name = "Problem", module = "gbmei", frozen)]
struct PyProblem {
    inner: SdeProblem,
}

#[pymethods]
impl PyProblem {
    /// One of the built-in test problems, e.g. `Problem.builtin("diag_noise", {"alpha": 0.1})`.
    #[staticmethod]
    #[pyo3(signature = (name, params = None, waive_commutators = None))]
    fn builtin(
        name: &str,
        params: Option<HashMap<String, f64>>,
        waive_commutators: Option<bool>,
    ) -> PyResult<Self> {
        let mut bp = BuiltinParams::new();
        let mut params: Vec<_> = params.unwrap_or_default().into_iter().collect();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        for (k, v) in params {
            bp = bp.with(&k, v);
        }
        if let Some(w) = waive_commutators {
            bp = bp.waive_commutators(w);
        }
        Ok(PyProblem {
            inner: model::builtin(name, &bp).map_err(py_err)?,
        })
    }

    /// `du = A u dt + Σ B_i u dW_i` with commuting matrices and a closed-form solution.
    #[staticmethod]
    fn linear_gbm(a: Vec<Vec<f64>>, bs: Vec<Vec<Vec<f64>>>, u0: Vec<f64>) -> PyResult<Self> {
        let bs = bs.iter().map(|b| to_mat(b)).collect::<PyResult<Vec<_>>>()?;
        Ok(PyProblem {
            inner: model::linear_gbm(to_mat(&a)?, bs, u0).map_err(py_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }

    #[getter]
    fn u0(&self) -> Vec<f64> {
        self.inner.u0().to_vec()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        self.inner.a().to_rows()
    }

    #[getter]
    fn bs(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.bs().iter().map(Mat::to_rows).collect()
    }

    #[getter]
    fn commutative_noise(&self) -> bool {
        self.inner.commutative_noise()
    }

    #[getter]
    fn waived(&self) -> bool {
        self.inner.waived()
    }

    #[getter]
    fn default_homotopy(&self) -> Option<f64> {
        self.inner.default_homotopy()
    }

    fn drift(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_state(&u)?;
        Ok(self.inner.drift_at(&u))
    }

    fn diffusion(&self, i: usize, u: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_state(&u)?;
        if i >= self.inner.noise_dim() {
            return Err(PyValueError::new_err(format!("noise index {i} out of range")));
        }
        Ok(self.inner.diffusion_at(i, &u))
    }

    /// Exact trajectory on the `steps` level of `noise`, or `None` when the
    /// problem has no closed form.
    fn exact(&self, noise: &PyNoise, steps: usize) -> PyResult<Option<Vec<Vec<f64>>>> {
        let level = noise.level(steps)?;
        Ok(self.inner.exact().map(|f| {
            let t = f(level, self.inner.u0());
            chunks(&t.states, t.d)
        }))
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem({:?}, d={}, m={})",
            self.inner.name(),
            self.inner.state_dim(),
            self.inner.noise_dim()
        )
    }
}

impl PyProblem {
    fn check_state(&self, u: &[f64]) -> PyResult<()> {
        if u.len() != self.inner.state_dim() {
            return Err(PyValueError::new_err(format!(
                "state has length {}, expected {}",
                u.len(),
                self.inner.state_dim()
            )));
        }
        Ok(())
    }
}

#[pyclass(name = "Scheme", module = "gbmei", frozen)]
struct PyScheme {
    inner: SchemeSpec,
}

#[pymethods]
impl PyScheme {
    /// `Scheme("EI0")`, or `Scheme("HomEI0", 0.5)` for the homotopy kinds.
    #[new]
    #[pyo3(signature = (kind, p = None))]
    fn new(kind: &str, p: Option<f64>) -> PyResult<Self> {
        let k: SchemeKind = kind.parse().map_err(py_err)?;
        let inner = match p {
            Some(p) => SchemeSpec::homotopy(k, p),
            None => SchemeSpec::new(k),
        }
        .map_err(py_err)?;
        Ok(PyScheme { inner })
    }

    /// Homotopy kinds take `p` from the problem's noise weights.
    #[staticmethod]
    fn for_problem(kind: &str, problem: &PyProblem) -> PyResult<Self> {
        let k: SchemeKind = kind.parse().map_err(py_err)?;
        Ok(PyScheme {
            inner: SchemeSpec::for_problem(k, &problem.inner).map_err(py_err)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn p(&self) -> Option<f64> {
        self.inner.p()
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label()
    }

    fn __repr__(&self) -> String {
        match self.inner.p() {
            Some(p) => format!("Scheme({:?}, {p})", self.inner.kind().name()),
            None => format!("Scheme({:?})", self.inner.kind().name()),
        }
    }
}

/// One Brownian sample path on several nested grids.
#[pyclass(name = "Noise", module = "gbmei", frozen)]
struct PyNoise {
    inner: NoiseBatch,
}

#[pymethods]
impl PyNoise {
    #[new]
    #[pyo3(signature = (seed, sample, noise_dim, t_final, levels, levy_terms = None))]
    fn new(
        seed: u64,
        sample: u64,
        noise_dim: usize,
        t_final: f64,
        levels: Vec<usize>,
        levy_terms: Option<usize>,
    ) -> PyResult<Self> {
        let grid = GridSpec::new(t_final, &levels).map_err(py_err)?;
        Ok(PyNoise {
            inner: NoiseBatch::generate(seed, sample, noise_dim, &grid, levy_terms).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyNoise {
            inner: NoiseBatch::read_from(data).map_err(py_err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    /// Step counts, finest first.
    #[getter]
    fn levels(&self) -> Vec<usize> {
        self.inner.levels().iter().map(|l| l.steps()).collect()
    }

    #[getter]
    fn noise_dim(&self) -> usize {
        self.inner.noise_dim()
    }

    fn dt(&self, steps: usize) -> PyResult<f64> {
        Ok(self.level(steps)?.dt())
    }

    fn increments(&self, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(chunks(self.level(steps)?.increments(), self.inner.noise_dim()))
    }

    /// `W(t_k)` for `k = 0..=steps`.
    fn path(&self, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(chunks(&self.level(steps)?.path(), self.inner.noise_dim()))
    }

    /// Iterated integral matrix `I[l][i]` of step `n`.
    fn iterated(&self, steps: usize, n: usize) -> PyResult<Vec<Vec<f64>>> {
        let level = self.level(steps)?;
        if n >= level.steps() {
            return Err(PyValueError::new_err(format!("step {n} out of range")));
        }
        let m = level.noise_dim();
        let mut out = vec![0.0; m * m];
        level.iterated_into(n, &mut out);
        Ok(chunks(&out, m))
    }
}

impl PyNoise {
    fn level(&self, steps: usize) -> PyResult<&gbmei_core::NoiseLevel> {
        self.inner
            .level(steps)
            .ok_or_else(|| PyValueError::new_err(format!("no level with {steps} steps")))
    }
}

/// One step of `scheme` from state `u`.
#[pyfunction]
#[pyo3(signature = (problem, scheme, dt, u, dw, iterated = None))]
fn step(
    problem: &PyProblem,
    scheme: &PyScheme,
    dt: f64,
    u: Vec<f64>,
    dw: Vec<f64>,
    iterated: Option<Vec<Vec<f64>>>,
) -> PyResult<Vec<f64>> {
    problem.check_state(&u)?;
    if dw.len() != problem.inner.noise_dim() {
        return Err(PyValueError::new_err("dw length differs from the noise dimension"));
    }
    let flat = iterated.map(|rows| rows.concat());
    schemes::step(&problem.inner, &scheme.inner, dt, &u, &dw, flat.as_deref()).map_err(py_err)
}

/// States on every grid point, plus the first step that tripped the
/// overflow guard.
#[pyfunction]
fn integrate(
    py: Python<'_>,
    problem: &PyProblem,
    scheme: &PyScheme,
    noise: &PyNoise,
    steps: usize,
) -> PyResult<(Vec<Vec<f64>>, Option<usize>)> {
    let level = noise.level(steps)?;
    let r = py
        .detach(|| schemes::integrate_path(&problem.inner, &scheme.inner, level))
        .map_err(py_err)?;
    Ok((chunks(&r.trajectory.states, r.trajectory.d), r.blowup_step))
}

#[pyclass(name = "ErrorTable", module = "gbmei", frozen, get_all)]
struct PyErrorTable {
    scheme: String,
    dt: Vec<f64>,
    steps: Vec<usize>,
    rms_error: Vec<f64>,
    stderr: Vec<f64>,
    wall_seconds: Vec<f64>,
    blowups: Vec<usize>,
    slope: Option<f64>,
    intercept: Option<f64>,
    r2: Option<f64>,
}

#[pymethods]
impl PyErrorTable {
    fn __repr__(&self) -> String {
        format!("ErrorTable({:?}, rows={}, slope={:?})", self.scheme, self.dt.len(), self.slope)
    }
}

/// RMS strong error at the final time for each scheme on each ladder level.
/// Without `reference_scheme` the problem's exact solution is the reference.
#[pyfunction]
#[pyo3(signature = (
    problem, schemes, ladder, reference_steps, reference_scheme = None,
    samples = 1000, seed = 42, t_final = 1.0, levy_terms = DEFAULT_LEVY_TERMS,
    workers = None, timed = false,
))]
#[allow(clippy::too_many_arguments)]
fn strong_error(
    py: Python<'_>,
    problem: &PyProblem,
    schemes: Vec<PyRef<'_, PyScheme>>,
    ladder: Vec<usize>,
    reference_steps: usize,
    reference_scheme: Option<PyRef<'_, PyScheme>>,
    samples: usize,
    seed: u64,
    t_final: f64,
    levy_terms: usize,
    workers: Option<usize>,
    timed: bool,
) -> PyResult<Vec<PyErrorTable>> {
    let reference = match reference_scheme {
        Some(s) => Reference::Scheme { spec: s.inner, steps: reference_steps },
        None => Reference::Exact { steps: reference_steps },
    };
    let specs = schemes.iter().map(|s| s.inner).collect();
    let mut cfg = ExperimentConfig::new(specs, ladder, reference);
    cfg.samples = samples;
    cfg.seed = seed;
    cfg.t_final = t_final;
    cfg.levy_terms = levy_terms;
    cfg.workers = workers;
    let report = py
        .detach(|| {
            if timed {
                harness::efficiency(&problem.inner, &cfg)
            } else {
                harness::strong_error(&problem.inner, &cfg)
            }
        })
        .map_err(py_err)?;
    Ok(report
        .tables
        .into_iter()
        .map(|t| PyErrorTable {
            dt: t.rows.iter().map(|r| r.dt).collect(),
            steps: t.rows.iter().map(|r| r.steps).collect(),
            rms_error: t.rows.iter().map(|r| r.rms_error).collect(),
            stderr: t.rows.iter().map(|r| r.stderr).collect(),
            wall_seconds: t.rows.iter().map(|r| r.wall_seconds).collect(),
            blowups: t.rows.iter().map(|r| r.blowups).collect(),
            slope: t.fit.map(|f| f.slope),
            intercept: t.fit.map(|f| f.intercept),
            r2: t.fit.map(|f| f.r2),
            scheme: t.scheme,
        })
        .collect())
}

#[pyclass(name = "Moments", module = "gbmei", frozen, get_all)]
struct PyMoments {
    times: Vec<f64>,
    mean: Vec<Vec<f64>>,
    mean_norm: Vec<f64>,
    blowups: usize,
    samples: usize,
    blowup_fraction: f64,
    max_mean_norm: f64,
}

/// Sample mean of the state on every grid point, over paths that stayed bounded.
#[pyfunction]
#[pyo3(signature = (problem, scheme, steps, t_final, samples = 1000, seed = 42, levy_terms = DEFAULT_LEVY_TERMS, workers = None))]
#[allow(clippy::too_many_arguments)]
fn moment_trajectory(
    py: Python<'_>,
    problem: &PyProblem,
    scheme: &PyScheme,
    steps: usize,
    t_final: f64,
    samples: usize,
    seed: u64,
    levy_terms: usize,
    workers: Option<usize>,
) -> PyResult<PyMoments> {
    let mc = MomentConfig { steps, t_final, samples, seed, levy_terms, workers };
    let m = py
        .detach(|| harness::moment_trajectory(&problem.inner, &scheme.inner, &mc))
        .map_err(py_err)?;
    Ok(PyMoments {
        blowup_fraction: m.blowup_fraction(),
        max_mean_norm: m.max_mean_norm(),
        times: m.times,
        mean: m.mean,
        mean_norm: m.mean_norm,
        blowups: m.blowups,
        samples: m.samples,
    })
}

/// Least-squares `(slope, intercept, r2)` of log2 error against log2 Δt.
#[pyfunction]
fn fit_order(rows: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = harness::fit_order(&rows).map_err(py_err)?;
    Ok((f.slope, f.intercept, f.r2))
}

#[pyfunction]
fn expm(m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(matexp::mat_exp(&to_mat(&m)?).map_err(py_err)?.to_rows())
}

#[pyfunction]
fn phi1(m: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(matexp::phi1(&to_mat(&m)?).map_err(py_err)?.to_rows())
}

#[pyfunction]
fn scheme_names() -> Vec<&'static str> {
    SchemeKind::ALL.iter().map(|k| k.name()).collect()
}

#[pyfunction]
fn problem_names() -> Vec<&'static str> {
    BUILTIN_PROBLEMS.to_vec()
}

#[pymodule]
fn gbmei(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PyScheme>()?;
    m.add_class::<PyNoise>()?;
    m.add_class::<PyErrorTable>()?;
    m.add_class::<PyMoments>()?;
    m.add_function(wrap_pyfunction!(step, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(strong_error, m)?)?;
    m.add_function(wrap_pyfunction!(moment_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(fit_order, m)?)?;
    m.add_function(wrap_pyfunction!(expm, m)?)?;
    m.add_function(wrap_pyfunction!(phi1, m)?)?;
    m.add_function(wrap_pyfunction!(scheme_names, m)?)?;
    m.add_function(wrap_pyfunction!(problem_names, m)?)?;
    Ok(())
}
