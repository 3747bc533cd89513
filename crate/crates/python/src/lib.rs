//! Python bindings. Vectors and matrices cross the boundary as (nested)
//! lists of floats; matrices are row-major lists of rows.

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pnp_mc::diagnostics::{self, Grid2D};
use pnp_mc::experiments;
use pnp_mc::likelihoods::GaussianLinearLikelihood;
use pnp_mc::samplers::{self, ChainConfig, Discretization};
use pnp_mc::{Covariance, RngStream, ScoreModel};

fn err(e: pnp_mc::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn covariance(obj: &Bound<'_, PyAny>) -> PyResult<Covariance> {
    if let Ok(v) = obj.extract::<f64>() {
        return Ok(Covariance::Isotropic(v));
    }
    if let Ok(d) = obj.extract::<Vec<f64>>() {
        return Ok(Covariance::Diagonal(d));
    }
    let m = matrix(obj.extract::<Vec<Vec<f64>>>()?)?;
    Covariance::full(m).map_err(err)
}

/// Gaussian mixture prior. Each covariance is a float (isotropic), a list
/// (diagonal) or a list of rows (full).
#[pyclass(module = "pnp_mc_py", from_py_object)]
#[derive(Clone)]
struct GaussianMixture {
    inner: pnp_mc::GaussianMixture,
}

#[pymethods]
impl GaussianMixture {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Bound<'_, PyAny>>) -> PyResult<Self> {
        let covs = covariances.iter().map(covariance).collect::<PyResult<_>>()?;
        let inner = pnp_mc::GaussianMixture::new(weights, means, covs).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("mixture serializes")
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_components(&self) -> usize {
        self.inner.n_components()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        self.inner.means().to_vec()
    }

    fn logpdf(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.logpdf(&x).map_err(err)
    }

    #[pyo3(signature = (x, sigma = 0.0))]
    fn score(&self, x: Vec<f64>, sigma: f64) -> PyResult<Vec<f64>> {
        self.inner.smoothed_score(&x, sigma).map_err(err)
    }

    fn denoise(&self, x: Vec<f64>, sigma: f64) -> PyResult<Vec<f64>> {
        pnp_mc::mmse_denoise(&self.inner, &x, sigma).map_err(err)
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(seed, 0);
        (0..n).map(|_| self.inner.sample(&mut rng)).collect()
    }

    fn __repr__(&self) -> String {
        format!("GaussianMixture(dim={}, n_components={})", self.inner.dim(), self.inner.n_components())
    }
}

/// `y = A x + β·noise` with a dense `A`.
#[pyclass(module = "pnp_mc_py", from_py_object)]
#[derive(Clone)]
struct LinearLikelihood {
    inner: GaussianLinearLikelihood,
}

#[pymethods]
impl LinearLikelihood {
    #[new]
    fn new(a: Vec<Vec<f64>>, y: Vec<f64>, beta: f64) -> PyResult<Self> {
        let inner = GaussianLinearLikelihood::new(matrix(a)?, y, beta).map_err(err)?;
        Ok(Self { inner })
    }

    fn value(&self, x: Vec<f64>) -> PyResult<f64> {
        use pnp_mc::likelihoods::Likelihood;
        self.inner.value(&x).map_err(err)
    }

    fn grad(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        use pnp_mc::likelihoods::Likelihood;
        self.inner.grad(&x).map_err(err)
    }

    /// Exact posterior for a mixture prior.
    fn posterior(&self, prior: &GaussianMixture) -> PyResult<GaussianMixture> {
        let inner = diagnostics::conjugate_posterior(&prior.inner, &self.inner).map_err(err)?;
        Ok(GaussianMixture { inner })
    }
}

/// Run a batch of chains on a linear problem. With `schedule =
/// (sigma0, xi, sigma_min, alpha0)` the chains are annealed. Returns the
/// final samples (one row per chain, NaN rows for diverged chains) and the
/// indices of diverged chains.
#[pyfunction]
#[pyo3(signature = (prior, likelihood, gamma, n_iters, batch, seed, discretization = "pnp", schedule = None, init_box = (-1.0, 1.0), eps_max = 0.0))]
#[allow(clippy::too_many_arguments)]
fn sample(
    py: Python<'_>,
    prior: &GaussianMixture,
    likelihood: &LinearLikelihood,
    gamma: f64,
    n_iters: usize,
    batch: usize,
    seed: u64,
    discretization: &str,
    schedule: Option<(f64, f64, f64, f64)>,
    init_box: (f64, f64),
    eps_max: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let disc = match discretization {
        "pnp" => Discretization::Pnp,
        "red" => Discretization::Red,
        other => return Err(PyValueError::new_err(format!("unknown discretization {other:?}"))),
    };
    let mut cfg = ChainConfig::stationary(gamma, n_iters, batch, seed, disc).with_init_box(init_box.0, init_box.1);
    if let Some((s0, xi, smin, a0)) = schedule {
        cfg = cfg.with_schedule(samplers::AnnealingSchedule::new(s0, xi, smin, a0).map_err(err)?);
    }
    let score = if eps_max > 0.0 {
        ScoreModel::noisy(prior.inner.clone(), eps_max).map_err(err)?
    } else {
        ScoreModel::exact(prior.inner.clone())
    };
    let lik = likelihood.inner.clone();
    let b = py
        .detach(|| samplers::run_batch(&cfg, &lik, &score))
        .map_err(err)?;
    Ok((rows(&b.samples), b.divergences.iter().map(|d| d.chain).collect()))
}

/// Grid-quadrature `(FI, KL)` of a 2D mixture `nu` against the posterior of
/// `prior` and `likelihood` on the square `[lo, hi]²`.
#[pyfunction]
#[pyo3(signature = (nu, prior, likelihood, lo = -50.0, hi = 50.0, cells = 1000))]
fn grid_divergences(
    nu: &GaussianMixture,
    prior: &GaussianMixture,
    likelihood: &LinearLikelihood,
    lo: f64,
    hi: f64,
    cells: usize,
) -> PyResult<(f64, f64)> {
    let post = diagnostics::GridPosterior::new(&likelihood.inner, &prior.inner, Grid2D::square(lo, hi, cells)).map_err(err)?;
    let m = diagnostics::grid_divergences(&nu.inner, &post).map_err(err)?;
    Ok((m.fi, m.kl))
}

/// Parse and validate a config file; returns its digest.
#[pyfunction]
fn validate_config(path: &str) -> PyResult<String> {
    Ok(experiments::load_config(path).map_err(err)?.digest())
}

/// Run a config file, write its artifacts and return `{metric: value}`
/// plus the output directory under `"output_dir"`.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = experiments::load_config(path).map_err(err)?;
    let s = py.detach(|| experiments::run_experiment(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    for r in &s.output.records {
        d.set_item(&r.metric, r.value)?;
    }
    d.set_item("output_dir", s.dir.to_string_lossy().into_owned())?;
    Ok(d)
}

#[pymodule]
pub fn pnp_mc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<GaussianMixture>()?;
    m.add_class::<LinearLikelihood>()?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(grid_divergences, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
