//! Midpoint-rule quadrature of the relative Fisher information and KL
//! divergence between a fitted 2D mixture `ν` and a posterior `π ∝ ℓ·p`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihoods::Likelihood;
use crate::mixture::{log_sum_exp, GaussianMixture};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub bounds: [[f64; 2]; 2],
    pub cells: [usize; 2],
}

impl Default for Grid2D {
    fn default() -> Self {
        Self {
            bounds: [[-50.0, 50.0], [-50.0, 50.0]],
            cells: [1000, 1000],
        }
    }
}

impl Grid2D {
    pub fn square(lo: f64, hi: f64, cells: usize) -> Self {
        Self {
            bounds: [[lo, hi], [lo, hi]],
            cells: [cells, cells],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..2 {
            let [lo, hi] = self.bounds[a];
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("grid axis {a} needs lo < hi, got [{lo}, {hi}]")));
            }
            if self.cells[a] < 2 {
                return Err(Error::invalid(format!("grid axis {a} needs at least 2 cells")));
            }
        }
        Ok(())
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.bounds[axis][1] - self.bounds[axis][0]) / self.cells[axis] as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.step(0) * self.step(1)
    }

    pub fn center(&self, axis: usize, i: usize) -> f64 {
        self.bounds[axis][0] + (i as f64 + 0.5) * self.step(axis)
    }

    fn n_cells(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    /// Same resolution count, bounds scaled by `factor` about the centre.
    fn widened(&self, factor: f64) -> Grid2D {
        let mut g = *self;
        for b in g.bounds.iter_mut() {
            let c = 0.5 * (b[0] + b[1]);
            let h = 0.5 * (b[1] - b[0]) * factor;
            *b = [c - h, c + h];
        }
        g
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.bounds[0][0] && x <= self.bounds[0][1] && y >= self.bounds[1][0] && y <= self.bounds[1][1]
    }
}

/// Unnormalized log posterior and its score at `x`.
fn log_post<L: Likelihood + ?Sized>(lik: &L, prior: &GaussianMixture, x: &[f64], score: &mut [f64]) -> Result<f64> {
    let mut g = [0.0; 2];
    lik.grad_into(x, &mut g)?;
    let lp = prior.evaluate(x, 0.0, Some(score), None) - lik.value(x)?;
    score[0] -= g[0];
    score[1] -= g[1];
    Ok(lp)
}

/// Posterior tabulated on a grid: normalized log density and score per cell
/// (index `j · cells[0] + i` for x-index `i`, y-index `j`).
#[derive(Clone, Debug)]
pub struct GridPosterior {
    grid: Grid2D,
    log_pi: Vec<f64>,
    score: Vec<[f64; 2]>,
    warnings: Vec<String>,
}

const MASS_TARGET: f64 = 0.999;

impl GridPosterior {
    pub fn new<L: Likelihood + ?Sized>(lik: &L, prior: &GaussianMixture, grid: Grid2D) -> Result<Self> {
        grid.validate()?;
        if lik.dim() != 2 || prior.dim() != 2 {
            return Err(Error::invalid("grid quadrature needs a 2D posterior"));
        }
        let (nx, ny) = (grid.cells[0], grid.cells[1]);
        let rows: Vec<Vec<(f64, [f64; 2])>> = (0..ny)
            .into_par_iter()
            .map(|j| {
                let y = grid.center(1, j);
                (0..nx)
                    .map(|i| {
                        let mut s = [0.0; 2];
                        let lp = log_post(lik, prior, &[grid.center(0, i), y], &mut s)?;
                        Ok((lp, s))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut log_pi = Vec::with_capacity(grid.n_cells());
        let mut score = Vec::with_capacity(grid.n_cells());
        for row in rows {
            for (lp, s) in row {
                log_pi.push(lp);
                score.push(s);
            }
        }
        let log_z = log_sum_exp(&log_pi) + grid.cell_area().ln();
        if !log_z.is_finite() {
            return Err(Error::invalid("posterior has no finite mass on the grid"));
        }
        log_pi.iter_mut().for_each(|v| *v -= log_z);

        let mut warnings = Vec::new();
        let inside = Self::mass_inside(lik, prior, &grid)?;
        if inside < MASS_TARGET {
            warnings.push(format!(
                "grid captures only {:.5} of the posterior mass found on a widened grid",
                inside
            ));
        }
        Ok(Self {
            grid,
            log_pi,
            score,
            warnings,
        })
    }

    /// Fraction of the posterior mass on a 3× wider grid that falls inside `grid`.
    fn mass_inside<L: Likelihood + ?Sized>(lik: &L, prior: &GaussianMixture, grid: &Grid2D) -> Result<f64> {
        let wide = grid.widened(3.0);
        let vals: Vec<(f64, bool)> = (0..wide.cells[1])
            .into_par_iter()
            .map(|j| {
                let y = wide.center(1, j);
                (0..wide.cells[0])
                    .map(|i| {
                        let x = wide.center(0, i);
                        let mut s = [0.0; 2];
                        Ok((log_post(lik, prior, &[x, y], &mut s)?, grid.contains(x, y)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let all: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let inner: Vec<f64> = vals.iter().filter(|v| v.1).map(|v| v.0).collect();
        Ok((log_sum_exp(&inner) - log_sum_exp(&all)).exp())
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Normalized `log π` at cell `(i, j)`.
    pub fn log_density(&self, i: usize, j: usize) -> f64 {
        self.log_pi[j * self.grid.cells[0] + i]
    }

    /// Posterior mass in each cell, row-major over `y` then `x`.
    pub fn cell_masses(&self) -> Vec<f64> {
        let a = self.grid.cell_area();
        self.log_pi.iter().map(|v| v.exp() * a).collect()
    }
}

/// FI and KL of `ν` against a tabulated posterior, with coverage warnings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMetrics {
    pub fi: f64,
    pub kl: f64,
    pub nu_mass: f64,
    pub warnings: Vec<String>,
}

/// Closed-form 2D mixture evaluation for the quadrature inner loop.
struct Mixture2 {
    comps: Vec<([f64; 2], [f64; 3], f64)>, // mean, precision (xx, xy, yy), log weight·normalizer
}

impl Mixture2 {
    fn new(nu: &GaussianMixture) -> Self {
        let comps = (0..nu.n_components())
            .map(|c| {
                let s = nu.covariances()[c].to_dense(2);
                let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
                let p = [s[(1, 1)] / det, -s[(0, 1)] / det, s[(0, 0)] / det];
                let m = &nu.means()[c];
                let ln = nu.weights()[c].ln() - (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
                ([m[0], m[1]], p, ln)
            })
            .collect();
        Self { comps }
    }

    /// Log-density, writing the score into `s`.
    fn eval(&self, x: f64, y: f64, s: &mut [f64; 2], scratch: &mut Vec<(f64, f64, f64)>) -> f64 {
        scratch.clear();
        let mut max = f64::NEG_INFINITY;
        for (m, p, ln) in &self.comps {
            let (dx, dy) = (x - m[0], y - m[1]);
            let (gx, gy) = (p[0] * dx + p[1] * dy, p[1] * dx + p[2] * dy);
            let l = ln - 0.5 * (dx * gx + dy * gy);
            max = max.max(l);
            scratch.push((l, gx, gy));
        }
        if max == f64::NEG_INFINITY {
            *s = [0.0; 2];
            return max;
        }
        let mut z = 0.0;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &(l, gx, gy) in scratch.iter() {
            let w = (l - max).exp();
            z += w;
            sx -= w * gx;
            sy -= w * gy;
        }
        *s = [sx / z, sy / z];
        max + z.ln()
    }
}

/// Components are only evaluated within this many standard deviations.
const PRUNE_SDS: f64 = 12.0;

/// Both divergences in one pass over the cells where `ν` is non-negligible.
pub fn grid_divergences(nu: &GaussianMixture, post: &GridPosterior) -> Result<GridMetrics> {
    if nu.dim() != 2 {
        return Err(Error::invalid("grid quadrature needs a 2D mixture"));
    }
    let g = post.grid;
    let (nx, ny) = (g.cells[0], g.cells[1]);
    let (hx, hy) = (g.step(0), g.step(1));
    // per-component bounding boxes in cell indices
    let boxes: Vec<[usize; 4]> = (0..nu.n_components())
        .map(|c| {
            let d = nu.covariances()[c].diagonal(2);
            let m = &nu.means()[c];
            let idx = |axis: usize, v: f64, h: f64, n: usize| {
                ((v - g.bounds[axis][0]) / h).floor().clamp(0.0, n as f64) as usize
            };
            let (rx, ry) = (PRUNE_SDS * d[0].sqrt(), PRUNE_SDS * d[1].sqrt());
            [
                idx(0, m[0] - rx, hx, nx),
                idx(0, m[0] + rx, hx, nx - 1) + 1,
                idx(1, m[1] - ry, hy, ny),
                idx(1, m[1] + ry, hy, ny - 1) + 1,
            ]
        })
        .collect();
    let area = g.cell_area();
    let fast = Mixture2::new(nu);
    let per_row: Vec<(f64, f64, f64)> = (0..ny)
        .into_par_iter()
        .map(|j| {
            let mut spans: Vec<(usize, usize)> = boxes
                .iter()
                .filter(|b| j >= b[2] && j < b[3])
                .map(|b| (b[0], b[1]))
                .collect();
            spans.sort_unstable();
            let mut merged: Vec<(usize, usize)> = Vec::new();
            for s in spans {
                match merged.last_mut() {
                    Some(last) if s.0 <= last.1 => last.1 = last.1.max(s.1),
                    _ => merged.push(s),
                }
            }
            let y = g.center(1, j);
            let (mut fi, mut kl, mut mass) = (0.0, 0.0, 0.0);
            let mut s = [0.0; 2];
            let mut scratch = Vec::with_capacity(boxes.len());
            for (a, b) in merged {
                for i in a..b {
                    let lnu = fast.eval(g.center(0, i), y, &mut s, &mut scratch);
                    let dens = lnu.exp();
                    if dens == 0.0 {
                        continue;
                    }
                    let cell = j * nx + i;
                    let sp = post.score[cell];
                    let (dx, dy) = (s[0] - sp[0], s[1] - sp[1]);
                    fi += dens * (dx * dx + dy * dy);
                    kl += dens * (lnu - post.log_pi[cell]);
                    mass += dens;
                }
            }
            (fi, kl, mass)
        })
        .collect();
    // fixed-order reduction keeps the result independent of thread scheduling
    let (fi, kl, mass) = per_row
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, r| (acc.0 + r.0, acc.1 + r.1, acc.2 + r.2));
    let nu_mass = mass * area;
    let mut warnings = post.warnings.clone();
    if nu_mass < MASS_TARGET {
        warnings.push(format!("grid captures only {nu_mass:.5} of the fitted mixture's mass"));
    }
    Ok(GridMetrics {
        fi: fi * area,
        kl: kl * area,
        nu_mass,
        warnings,
    })
}

/// A diagnostic value with any coverage warnings attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridValue {
    pub value: f64,
    pub warnings: Vec<String>,
}

/// `KL(ν‖π) = ∫ ν log(ν/π)` with `π ∝ ℓ(y|x)p(x)` normalized on `grid`.
pub fn grid_kl<L: Likelihood + ?Sized>(nu: &GaussianMixture, lik: &L, prior: &GaussianMixture, grid: Grid2D) -> Result<GridValue> {
    let m = grid_divergences(nu, &GridPosterior::new(lik, prior, grid)?)?;
    Ok(GridValue {
        value: m.kl,
        warnings: m.warnings,
    })
}

/// `FI(ν‖π) = ∫ ν ‖∇log ν − ∇log π‖²` with the analytic posterior score.
pub fn grid_fi<L: Likelihood + ?Sized>(nu: &GaussianMixture, lik: &L, prior: &GaussianMixture, grid: Grid2D) -> Result<GridValue> {
    let m = grid_divergences(nu, &GridPosterior::new(lik, prior, grid)?)?;
    Ok(GridValue {
        value: m.fi,
        warnings: m.warnings,
    })
}
