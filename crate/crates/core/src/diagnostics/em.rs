//! Maximum-likelihood Gaussian mixture fitting by EM.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::mixture::{log_sum_exp, Covariance, GaussianMixture};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop when the log-likelihood gain falls below `tol · |ll|`.
    pub tol: f64,
    /// Ridge added to every component's scatter matrix, relative to the mean
    /// per-coordinate sample variance. EM then maximizes the likelihood plus
    /// a `-(λ/2)·tr Σ⁻¹` penalty per component, which keeps covariances
    /// positive definite and the iterations monotone.
    pub reg: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 500,
            tol: 1e-10,
            reg: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    /// Penalized log-likelihood of the samples under `mixture`.
    pub objective: f64,
    /// Penalized log-likelihood after each iteration, one trace per restart.
    pub traces: Vec<Vec<f64>>,
}

impl EmFit {
    /// Whether every restart's trace is nondecreasing up to rounding.
    pub fn is_monotone(&self) -> bool {
        self.traces
            .iter()
            .all(|t| t.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0)))
    }
}

/// Mixture parameters; points and means are stored flat (row-major).
struct Params {
    weights: Vec<f64>,
    means: Vec<f64>,
    covs: Vec<DMatrix<f64>>,
}

/// Per-component inverse Cholesky factor and log normalizer, plus the
/// summed `tr Σ⁻¹` the ridge penalty needs.
struct Factored {
    log_norm: Vec<f64>,
    inv_l: Vec<DMatrix<f64>>,
    trace_inv: f64,
}

fn factor(p: &Params, d: usize) -> Option<Factored> {
    let mut inv_l = Vec::with_capacity(p.covs.len());
    let mut log_norm = Vec::with_capacity(p.covs.len());
    let mut trace_inv = 0.0;
    for (w, c) in p.weights.iter().zip(&p.covs) {
        let l = Cholesky::new((c + c.transpose()) * 0.5)?.unpack();
        let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        log_norm.push(w.ln() - 0.5 * (d as f64 * (2.0 * PI).ln() + logdet));
        let li = l.solve_lower_triangular(&DMatrix::identity(d, d))?;
        trace_inv += li.norm_squared();
        inv_l.push(li);
    }
    trace_inv.is_finite().then_some(Factored { log_norm, inv_l, trace_inv })
}

/// E-step: fills `resp` (row-major N × K) and returns the total log-likelihood.
fn e_step(x: &[f64], d: usize, p: &Params, f: &Factored, resp: &mut [f64]) -> f64 {
    let k = p.weights.len();
    let mut ll = 0.0;
    let mut lc = vec![0.0; k];
    let mut diff = vec![0.0; d];
    for (xi, ri) in x.chunks_exact(d).zip(resp.chunks_exact_mut(k)) {
        for c in 0..k {
            let mu = &p.means[c * d..(c + 1) * d];
            diff.iter_mut().zip(xi).zip(mu).for_each(|((o, a), b)| *o = a - b);
            let li = &f.inv_l[c];
            let mut q = 0.0;
            for r in 0..d {
                let mut z = 0.0;
                for j in 0..=r {
                    z += li[(r, j)] * diff[j];
                }
                q += z * z;
            }
            lc[c] = f.log_norm[c] - 0.5 * q;
        }
        let lse = log_sum_exp(&lc);
        ll += lse;
        ri.iter_mut().zip(&lc).for_each(|(r, l)| *r = (l - lse).exp());
    }
    ll
}

fn m_step(x: &[f64], d: usize, k: usize, resp: &[f64], ridge: f64) -> Option<Params> {
    let n = x.len() / d;
    let mut weights = vec![0.0; k];
    let mut means = vec![0.0; k * d];
    for (xi, ri) in x.chunks_exact(d).zip(resp.chunks_exact(k)) {
        for c in 0..k {
            weights[c] += ri[c];
            means[c * d..(c + 1) * d].iter_mut().zip(xi).for_each(|(m, v)| *m += ri[c] * v);
        }
    }
    for c in 0..k {
        if weights[c] <= 1e-10 * n as f64 {
            return None;
        }
        means[c * d..(c + 1) * d].iter_mut().for_each(|m| *m /= weights[c]);
    }
    let mut covs = vec![DMatrix::zeros(d, d); k];
    let mut diff = vec![0.0; d];
    for (xi, ri) in x.chunks_exact(d).zip(resp.chunks_exact(k)) {
        for c in 0..k {
            diff.iter_mut()
                .zip(xi)
                .zip(&means[c * d..(c + 1) * d])
                .for_each(|((o, a), b)| *o = a - b);
            let s = &mut covs[c];
            for a in 0..d {
                for b in 0..=a {
                    s[(a, b)] += ri[c] * diff[a] * diff[b];
                }
            }
        }
    }
    for c in 0..k {
        let s = &mut covs[c];
        for a in 0..d {
            s[(a, a)] += ridge;
            for b in 0..=a {
                let v = s[(a, b)] / weights[c];
                s[(a, b)] = v;
                s[(b, a)] = v;
            }
        }
        weights[c] /= n as f64;
    }
    Some(Params { weights, means, covs })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: means at the seeds, shared sample covariance, equal weights.
fn init(x: &[f64], d: usize, k: usize, rng: &mut RngStream) -> Params {
    let n = x.len() / d;
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let first = rng.index(n);
    let mut means = row(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.uniform(0.0, total);
            let mut pick = n - 1;
            for (i, v) in d2.iter().enumerate() {
                if u < *v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            rng.index(n)
        };
        means.extend_from_slice(row(next));
        for (i, di) in d2.iter_mut().enumerate() {
            *di = di.min(sq_dist(row(i), row(next)));
        }
    }
    let mut mean = vec![0.0; d];
    for xi in x.chunks_exact(d) {
        mean.iter_mut().zip(xi).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut cov = DMatrix::zeros(d, d);
    for xi in x.chunks_exact(d) {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (xi[a] - mean[a]) * (xi[b] - mean[b]) / n as f64;
            }
        }
    }
    Params {
        weights: vec![1.0 / k as f64; k],
        means,
        covs: vec![cov; k],
    }
}

fn run_once(
    x: &[f64],
    d: usize,
    k: usize,
    ridge: f64,
    opts: &EmOptions,
    rng: &mut RngStream,
) -> Option<(Params, f64, Vec<f64>)> {
    let mut resp = vec![0.0; x.len() / d * k];
    let mut params = init(x, d, k, rng);
    let fac = factor(&params, d)?;
    let mut ll = e_step(x, d, &params, &fac, &mut resp) - 0.5 * ridge * fac.trace_inv;
    let mut trace = vec![ll];
    for _ in 0..opts.max_iters {
        let next = m_step(x, d, k, &resp, ridge)?;
        let f = factor(&next, d)?;
        let new_ll = e_step(x, d, &next, &f, &mut resp) - 0.5 * ridge * f.trace_inv;
        if !new_ll.is_finite() {
            return None;
        }
        params = next;
        trace.push(new_ll);
        let gain = new_ll - ll;
        ll = new_ll;
        if gain.abs() <= opts.tol * ll.abs().max(1.0) {
            break;
        }
    }
    Some((params, ll, trace))
}

/// Fit a `k`-component full-covariance mixture to the rows of `samples`,
/// keeping the best of `opts.restarts` k-means++-seeded EM runs.
pub fn em_fit_gmm(samples: &DMatrix<f64>, k: usize, rng: &mut RngStream, opts: &EmOptions) -> Result<EmFit> {
    let (n, d) = samples.shape();
    if k == 0 || d == 0 {
        return Err(Error::Fit("need at least one component and one dimension".into()));
    }
    if n < k * (d + 1) {
        return Err(Error::Fit(format!("{n} samples are too few for {k} components in {d} dimensions")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("samples contain non-finite values".into()));
    }
    let x: Vec<f64> = samples.transpose().as_slice().to_vec();
    let spread = samples.column_iter().map(|c| c.variance()).sum::<f64>() / d as f64;
    if !(spread > 0.0) {
        return Err(Error::Fit("samples have no spread".into()));
    }
    let ridge = opts.reg * spread;
    let mut best: Option<(Params, f64)> = None;
    let mut traces = Vec::new();
    for _ in 0..opts.restarts.max(1) {
        if let Some((p, ll, trace)) = run_once(&x, d, k, ridge, opts, rng) {
            traces.push(trace);
            if best.as_ref().map_or(true, |(_, b)| ll > *b) {
                best = Some((p, ll));
            }
        }
    }
    let (p, ll) = best.ok_or_else(|| Error::Fit("every EM restart degenerated".into()))?;
    let covs = p
        .covs
        .into_iter()
        .map(Covariance::full)
        .collect::<Result<Vec<_>>>()?;
    let mixture = GaussianMixture::new_normalized(p.weights, p.means.chunks_exact(d).map(|m| m.to_vec()).collect(), covs)?;
    Ok(EmFit {
        mixture,
        objective: ll,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_is_population_mle() {
        let s = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let fit = em_fit_gmm(&s, 1, &mut RngStream::new(0, 0), &EmOptions::default()).unwrap();
        assert!(fit.mixture.means()[0][0].abs() < 1e-12);
        let var = fit.mixture.covariances()[0].to_dense(1)[(0, 0)];
        assert!((var - 1.0).abs() < 1e-8, "variance {var}");
    }

    fn two_mode() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![-4.0, 1.0], vec![3.0, -2.0]],
            vec![
                Covariance::full(DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8])).unwrap(),
                Covariance::Diagonal(vec![0.5, 1.5]),
            ],
        )
        .unwrap()
    }

    fn draws(g: &GaussianMixture, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = RngStream::new(seed, 0);
        let rows: Vec<f64> = (0..n).flat_map(|_| g.sample(&mut rng)).collect();
        DMatrix::from_row_slice(n, g.dim(), &rows)
    }

    #[test]
    fn recovers_separated_mixture() {
        let truth = two_mode();
        let s = draws(&truth, 5000, 1);
        let fit = em_fit_gmm(&s, 2, &mut RngStream::new(2, 0), &EmOptions::default()).unwrap();
        assert!(fit.is_monotone());
        let m = fit.mixture.means();
        // components come back in arbitrary order
        let order = if m[0][0] < m[1][0] { [0, 1] } else { [1, 0] };
        for (t, &c) in order.iter().enumerate() {
            for j in 0..2 {
                assert!((m[c][j] - truth.means()[t][j]).abs() < 0.1);
            }
            assert!((fit.mixture.weights()[c] - truth.weights()[t]).abs() < 0.05);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let s = draws(&two_mode(), 600, 3);
        let a = em_fit_gmm(&s, 2, &mut RngStream::new(4, 0), &EmOptions::default()).unwrap();
        let b = em_fit_gmm(&s, 2, &mut RngStream::new(4, 0), &EmOptions::default()).unwrap();
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.mixture.means(), b.mixture.means());
    }

    #[test]
    fn every_restart_is_monotone() {
        let s = draws(&two_mode(), 400, 5);
        for k in 1..4 {
            let fit = em_fit_gmm(&s, k, &mut RngStream::new(6, k as u64), &EmOptions::default()).unwrap();
            assert_eq!(fit.traces.len(), 5);
            assert!(fit.is_monotone());
        }
    }

    #[test]
    fn degenerate_inputs_fail() {
        let mut rng = RngStream::new(0, 0);
        let o = EmOptions::default();
        assert!(em_fit_gmm(&DMatrix::zeros(0, 2), 1, &mut rng, &o).is_err());
        assert!(em_fit_gmm(&DMatrix::zeros(5, 2), 2, &mut rng, &o).is_err());
        let mut bad = DMatrix::from_element(10, 1, 1.0);
        bad[(3, 0)] = f64::NAN;
        assert!(em_fit_gmm(&bad, 1, &mut rng, &o).is_err());
    }

    #[test]
    fn identical_points_fail() {
        let s = DMatrix::from_element(10, 2, 1.5);
        assert!(em_fit_gmm(&s, 1, &mut RngStream::new(0, 0), &EmOptions::default()).is_err());
    }

    #[test]
    fn singular_component_stays_monotone() {
        // two far outliers attract a component whose scatter is rank one
        let mut s = draws(&GaussianMixture::gaussian(vec![0.0, 0.0], Covariance::Isotropic(1.0)).unwrap(), 998, 7);
        s = s.insert_rows(998, 2, 0.0);
        s.set_row(998, &nalgebra::RowDVector::from_row_slice(&[300.0, 100.0]));
        s.set_row(999, &nalgebra::RowDVector::from_row_slice(&[330.0, 110.0]));
        for seed in 0..10 {
            let fit = em_fit_gmm(&s, 2, &mut RngStream::new(seed, 0), &EmOptions::default()).unwrap();
            assert!(fit.is_monotone(), "seed {seed}");
            assert!(fit.mixture.covariances().iter().all(|c| c.to_dense(2).determinant() > 0.0));
        }
    }
}
