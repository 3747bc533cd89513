use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_beta, check_clip, Likelihood};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::{check_dim, clip_norm};

/// Least-squares data fidelity `g(x) = ‖y − Ax‖² / (2β²)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "LinearDocument", into = "LinearDocument")]
pub struct GaussianLinearLikelihood {
    a: DMatrix<f64>,
    y: DVector<f64>,
    beta: f64,
    r_g: Option<f64>,
}

impl GaussianLinearLikelihood {
    pub fn new(a: DMatrix<f64>, y: Vec<f64>, beta: f64) -> Result<Self> {
        check_beta("beta", beta)?;
        check_dim(a.nrows(), y.len())?;
        if a.ncols() == 0 {
            return Err(Error::invalid("forward matrix has no columns"));
        }
        Ok(Self {
            a,
            y: DVector::from_vec(y),
            beta,
            r_g: None,
        })
    }

    /// Simulate `y = A x + β e` with `e ~ N(0, I)`.
    pub fn simulate(a: DMatrix<f64>, truth: &[f64], beta: f64, rng: &mut RngStream) -> Result<Self> {
        check_dim(a.ncols(), truth.len())?;
        let mut y = &a * DVector::from_column_slice(truth);
        y.iter_mut().for_each(|v| *v += beta * rng.normal());
        Self::new(a, y.as_slice().to_vec(), beta)
    }

    pub fn with_clip(mut self, r_g: f64) -> Result<Self> {
        check_clip(Some(r_g))?;
        self.r_g = Some(r_g);
        Ok(self)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn measurements(&self) -> &[f64] {
        self.y.as_slice()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn clip_radius(&self) -> Option<f64> {
        self.r_g
    }

    fn residual(&self, x: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(x) - &self.y
    }
}

impl Likelihood for GaussianLinearLikelihood {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.residual(x).norm_squared() / (2.0 * self.beta * self.beta))
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        let r = self.residual(x);
        let g = self.a.tr_mul(&r) / (self.beta * self.beta);
        out.copy_from_slice(g.as_slice());
        if let Some(rg) = self.r_g {
            clip_norm(out, rg);
        }
        Ok(())
    }

    fn grad_batch(&self, xs: &DMatrix<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        check_dim(self.dim(), xs.nrows())?;
        let mut r = &self.a * xs;
        for mut col in r.column_iter_mut() {
            col -= &self.y;
        }
        self.a.tr_mul_to(&r, out);
        *out /= self.beta * self.beta;
        if let Some(rg) = self.r_g {
            for c in out.as_mut_slice().chunks_exact_mut(xs.nrows()) {
                clip_norm(c, rg);
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LinearDocument {
    /// Row-major `m × n` forward matrix.
    a: Vec<Vec<f64>>,
    y: Vec<f64>,
    beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_g: Option<f64>,
}

impl TryFrom<LinearDocument> for GaussianLinearLikelihood {
    type Error = Error;

    fn try_from(d: LinearDocument) -> Result<Self> {
        let m = d.a.len();
        let n = d.a.first().map_or(0, Vec::len);
        if d.a.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("forward matrix rows have unequal lengths"));
        }
        let flat: Vec<f64> = d.a.into_iter().flatten().collect();
        let mut lik = Self::new(DMatrix::from_row_slice(m, n, &flat), d.y, d.beta)?;
        check_clip(d.r_g)?;
        lik.r_g = d.r_g;
        Ok(lik)
    }
}

impl From<GaussianLinearLikelihood> for LinearDocument {
    fn from(l: GaussianLinearLikelihood) -> Self {
        LinearDocument {
            a: l.a.row_iter().map(|r| r.iter().copied().collect()).collect(),
            y: l.y.as_slice().to_vec(),
            beta: l.beta,
            r_g: l.r_g,
        }
    }
}
