//! Gaussian mixtures with exact log-density, score and sampling.
//!
//! A mixture doubles as prior, fitted sample density and closed-form
//! posterior. Every density evaluation optionally inflates the component
//! covariances by `σ²I`, which is exactly the Gaussian-smoothed density
//! `p_σ = p * N(0, σ²I)`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::check_dim;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Component covariance. Isotropic and diagonal storage avoid dense algebra
/// for the high-dimensional image priors.
#[derive(Clone, Debug)]
pub enum Covariance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    Full(FullCovariance),
}

/// Dense SPD covariance with its Cholesky factor. The eigendecomposition is
/// only computed when a smoothed (`σ > 0`) evaluation first needs it.
#[derive(Clone, Debug)]
pub struct FullCovariance {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    eigen: OnceLock<SymmetricEigen<f64, Dyn>>,
}

impl FullCovariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::invalid("covariance must be square"));
        }
        let scale = matrix.amax().max(1.0);
        for i in 0..matrix.nrows() {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::invalid("covariance must be symmetric"));
                }
            }
        }
        let chol = Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorisation failed".into()))?;
        Ok(Self {
            matrix,
            chol,
            eigen: OnceLock::new(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    fn eigen(&self) -> &SymmetricEigen<f64, Dyn> {
        self.eigen
            .get_or_init(|| SymmetricEigen::new(self.matrix.clone()))
    }
}

impl Covariance {
    pub fn full(matrix: DMatrix<f64>) -> Result<Self> {
        FullCovariance::new(matrix).map(Covariance::Full)
    }

    /// Build from a dense matrix, picking the most compact exact storage.
    pub fn from_dense(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if !matrix.is_square() || n == 0 {
            return Err(Error::invalid("covariance must be a non-empty square matrix"));
        }
        let off_diag_zero = (0..n).all(|i| (0..n).all(|j| i == j || matrix[(i, j)] == 0.0));
        if off_diag_zero {
            let d: Vec<f64> = (0..n).map(|i| matrix[(i, i)]).collect();
            let cov = if d.iter().all(|&v| v == d[0]) {
                Covariance::Isotropic(d[0])
            } else {
                Covariance::Diagonal(d)
            };
            cov.validate(n)?;
            Ok(cov)
        } else {
            Covariance::full(matrix)
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            Covariance::Isotropic(v) => {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(Error::NotPositiveDefinite(format!("isotropic variance {v}")));
                }
            }
            Covariance::Diagonal(d) => {
                check_dim(n, d.len())?;
                if let Some(v) = d.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                    return Err(Error::NotPositiveDefinite(format!("diagonal variance {v}")));
                }
            }
            Covariance::Full(f) => check_dim(n, f.matrix.nrows())?,
        }
        Ok(())
    }

    /// `log det(Σ + s2·I)`.
    pub fn logdet_inflated(&self, n: usize, s2: f64) -> f64 {
        match self {
            Covariance::Isotropic(v) => n as f64 * (v + s2).ln(),
            Covariance::Diagonal(d) => d.iter().map(|v| (v + s2).ln()).sum(),
            Covariance::Full(f) if s2 == 0.0 => {
                2.0 * f.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
            }
            Covariance::Full(f) => f.eigen().eigenvalues.iter().map(|l| (l + s2).ln()).sum(),
        }
    }

    /// `out = (Σ + s2·I)⁻¹ d`.
    pub fn solve_inflated(&self, d: &[f64], s2: f64, out: &mut [f64]) {
        match self {
            Covariance::Isotropic(v) => {
                let inv = 1.0 / (v + s2);
                out.iter_mut().zip(d).for_each(|(o, di)| *o = di * inv);
            }
            Covariance::Diagonal(var) => {
                for ((o, di), v) in out.iter_mut().zip(d).zip(var) {
                    *o = di / (v + s2);
                }
            }
            Covariance::Full(f) if s2 == 0.0 => {
                let sol = f.chol.solve(&DVector::from_column_slice(d));
                out.copy_from_slice(sol.as_slice());
            }
            Covariance::Full(f) => {
                let e = f.eigen();
                let mut t = e.eigenvectors.tr_mul(&DVector::from_column_slice(d));
                t.iter_mut()
                    .zip(e.eigenvalues.iter())
                    .for_each(|(ti, l)| *ti /= l + s2);
                out.copy_from_slice((&e.eigenvectors * t).as_slice());
            }
        }
    }

    /// `out = Σ(Σ + s2·I)⁻¹ d`, the linear shrinkage of the MMSE denoiser.
    pub fn shrink(&self, d: &[f64], s2: f64, out: &mut [f64]) {
        match self {
            Covariance::Isotropic(v) => {
                let f = v / (v + s2);
                out.iter_mut().zip(d).for_each(|(o, di)| *o = di * f);
            }
            Covariance::Diagonal(var) => {
                for ((o, di), v) in out.iter_mut().zip(d).zip(var) {
                    *o = di * v / (v + s2);
                }
            }
            Covariance::Full(f) => {
                let e = f.eigen();
                let mut t = e.eigenvectors.tr_mul(&DVector::from_column_slice(d));
                t.iter_mut()
                    .zip(e.eigenvalues.iter())
                    .for_each(|(ti, l)| *ti *= l / (l + s2));
                out.copy_from_slice((&e.eigenvectors * t).as_slice());
            }
        }
    }

    /// `out = Σ^{1/2} z` with the Cholesky square root for dense covariances.
    pub fn sqrt_mul(&self, z: &[f64], out: &mut [f64]) {
        match self {
            Covariance::Isotropic(v) => {
                let s = v.sqrt();
                out.iter_mut().zip(z).for_each(|(o, zi)| *o = s * zi);
            }
            Covariance::Diagonal(var) => {
                for ((o, zi), v) in out.iter_mut().zip(z).zip(var) {
                    *o = v.sqrt() * zi;
                }
            }
            Covariance::Full(f) => {
                let l = f.chol.l();
                out.copy_from_slice((l * DVector::from_column_slice(z)).as_slice());
            }
        }
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        match self {
            Covariance::Isotropic(v) => DMatrix::from_diagonal_element(n, n, *v),
            Covariance::Diagonal(d) => DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            Covariance::Full(f) => f.matrix.clone(),
        }
    }

    /// Dense precision matrix `Σ⁻¹`.
    pub fn precision_dense(&self, n: usize) -> DMatrix<f64> {
        match self {
            Covariance::Isotropic(v) => DMatrix::from_diagonal_element(n, n, 1.0 / v),
            Covariance::Diagonal(d) => {
                DMatrix::from_diagonal(&DVector::from_iterator(n, d.iter().map(|v| 1.0 / v)))
            }
            Covariance::Full(f) => f.chol.inverse(),
        }
    }

    /// Per-coordinate variances.
    pub fn diagonal(&self, n: usize) -> Vec<f64> {
        match self {
            Covariance::Isotropic(v) => vec![*v; n],
            Covariance::Diagonal(d) => d.clone(),
            Covariance::Full(f) => f.matrix.diagonal().iter().copied().collect(),
        }
    }
}

/// Finite-weight Gaussian mixture `Σ_k w_k N(m_k, Σ_k)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GmmDocument", into = "GmmDocument")]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Covariance>,
}

impl GaussianMixture {
    /// Weights must be nonnegative and sum to one within `1e-12`.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Covariance>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if means.len() != k || covariances.len() != k {
            return Err(Error::invalid(format!(
                "mixture has {k} weights, {} means, {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        for m in &means {
            check_dim(dim, m.len())?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("mixture means must be finite"));
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        for c in &covariances {
            c.validate(dim)?;
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            dim,
            weights,
            log_weights,
            means,
            covariances,
        })
    }

    /// Like [`GaussianMixture::new`] but rescales the weights to sum to one.
    pub fn new_normalized(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Covariance>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::invalid("mixture weights must have a positive sum"));
        }
        let mut weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        // Push the rounding residue into the largest weight.
        let resid = 1.0 - weights.iter().sum::<f64>();
        if let Some(w) = weights.iter_mut().max_by(|a, b| a.total_cmp(b)) {
            *w += resid;
        }
        Self::new(weights, means, covariances)
    }

    /// Single Gaussian component.
    pub fn gaussian(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Covariance] {
        &self.covariances
    }

    /// Core evaluation of the `σ²`-inflated mixture. Returns the log-density
    /// and, when requested, writes the score into `score` and the component
    /// responsibilities into `resp`.
    pub(crate) fn evaluate(
        &self,
        x: &[f64],
        s2: f64,
        score: Option<&mut [f64]>,
        resp: Option<&mut [f64]>,
    ) -> f64 {
        let n = self.dim;
        let k = self.n_components();
        let mut d = vec![0.0; n];
        let mut p = vec![0.0; n * k];
        let mut logc = vec![0.0; k];
        let ln2pi = (2.0 * PI).ln();
        for c in 0..k {
            for ((di, xi), mi) in d.iter_mut().zip(x).zip(&self.means[c]) {
                *di = xi - mi;
            }
            let pc = &mut p[c * n..(c + 1) * n];
            self.covariances[c].solve_inflated(&d, s2, pc);
            let quad: f64 = d.iter().zip(pc.iter()).map(|(a, b)| a * b).sum();
            let logdet = self.covariances[c].logdet_inflated(n, s2);
            logc[c] = self.log_weights[c] - 0.5 * (n as f64 * ln2pi + logdet + quad);
        }
        let lse = log_sum_exp(&logc);
        let mut r = logc;
        r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        if let Some(out) = score {
            out.iter_mut().for_each(|o| *o = 0.0);
            for c in 0..k {
                if r[c] == 0.0 {
                    continue;
                }
                let pc = &p[c * n..(c + 1) * n];
                out.iter_mut().zip(pc).for_each(|(o, v)| *o -= r[c] * v);
            }
        }
        if let Some(out) = resp {
            out.copy_from_slice(&r);
        }
        lse
    }

    /// `log Σ_k w_k N(x; m_k, Σ_k)`.
    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.evaluate(x, 0.0, None, None))
    }

    /// `∇ log p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.smoothed_score(x, 0.0)
    }

    /// Log-density of the smoothed mixture `p_σ`.
    pub fn smoothed_logpdf(&self, x: &[f64], sigma: f64) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        check_sigma(sigma)?;
        Ok(self.evaluate(x, sigma * sigma, None, None))
    }

    /// `∇ log p_σ(x)`.
    pub fn smoothed_score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_sigma(sigma)?;
        let mut out = vec![0.0; self.dim];
        self.evaluate(x, sigma * sigma, Some(&mut out), None);
        Ok(out)
    }

    /// Log-density and score of `p_σ` in one pass.
    pub fn logpdf_and_score(&self, x: &[f64], sigma: f64) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim, x.len())?;
        check_sigma(sigma)?;
        let mut out = vec![0.0; self.dim];
        let lp = self.evaluate(x, sigma * sigma, Some(&mut out), None);
        Ok((lp, out))
    }

    /// Posterior component probabilities under `p_σ`.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_sigma(sigma)?;
        let mut r = vec![0.0; self.n_components()];
        self.evaluate(x, sigma * sigma, None, Some(&mut r));
        Ok(r)
    }

    /// Draw a component index by weight, then a Gaussian draw from it.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.sample_labeled(rng).1
    }

    pub fn sample_labeled(&self, rng: &mut RngStream) -> (usize, Vec<f64>) {
        let u = rng.uniform(0.0, 1.0);
        let mut acc = 0.0;
        let mut c = self.n_components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                c = i;
                break;
            }
        }
        let mut z = vec![0.0; self.dim];
        rng.fill_normal(&mut z);
        let mut x = vec![0.0; self.dim];
        self.covariances[c].sqrt_mul(&z, &mut x);
        x.iter_mut().zip(&self.means[c]).for_each(|(xi, mi)| *xi += mi);
        (c, x)
    }

    /// The smoothed mixture `p_σ` as an explicit mixture.
    pub fn inflated(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let s2 = sigma * sigma;
        let covs = self
            .covariances
            .iter()
            .map(|c| match c {
                Covariance::Isotropic(v) => Ok(Covariance::Isotropic(v + s2)),
                Covariance::Diagonal(d) => Ok(Covariance::Diagonal(d.iter().map(|v| v + s2).collect())),
                Covariance::Full(f) => {
                    let mut m = f.matrix.clone();
                    for i in 0..m.nrows() {
                        m[(i, i)] += s2;
                    }
                    Covariance::full(m)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.weights.clone(), self.means.clone(), covs)
    }

    /// Mixture mean `Σ_k w_k m_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            out.iter_mut().zip(m).for_each(|(o, mi)| *o += w * mi);
        }
        out
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("smoothing sigma must be nonnegative, got {sigma}")))
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// On-disk form: `{"weights":[...], "means":[[...]], "covariances":[[[...]]]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmDocument {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<GmmDocument> for GaussianMixture {
    type Error = Error;

    fn try_from(doc: GmmDocument) -> Result<Self> {
        let covs = doc
            .covariances
            .into_iter()
            .map(|rows| {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::invalid("covariance rows must form a square matrix"));
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                Covariance::from_dense(DMatrix::from_row_slice(n, n, &flat))
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(doc.weights, doc.means, covs)
    }
}

impl From<GaussianMixture> for GmmDocument {
    fn from(g: GaussianMixture) -> Self {
        let n = g.dim;
        let covariances = g
            .covariances
            .iter()
            .map(|c| {
                let m = c.to_dense(n);
                (0..n).map(|i| m.row(i).iter().copied().collect()).collect()
            })
            .collect();
        GmmDocument {
            weights: g.weights,
            means: g.means,
            covariances,
        }
    }
}
