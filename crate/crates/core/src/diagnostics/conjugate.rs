use nalgebra::{Cholesky, DVector};

use crate::error::{Error, Result};
use crate::likelihoods::GaussianLinearLikelihood;
use crate::mixture::{log_sum_exp, Covariance, GaussianMixture};

/// Closed-form posterior of a Gaussian-mixture prior under a linear
/// Gaussian likelihood `y = Ax + N(0, β²I)`.
///
/// Component `k` becomes `N(m'_k, Σ'_k)` with `Σ'_k = (Σ_k⁻¹ + AᵀA/β²)⁻¹`,
/// `m'_k = Σ'_k(Σ_k⁻¹m_k + Aᵀy/β²)`, and its weight is rescaled by the
/// evidence `N(y; Am_k, AΣ_kAᵀ + β²I)`.
pub fn conjugate_posterior(prior: &GaussianMixture, lik: &GaussianLinearLikelihood) -> Result<GaussianMixture> {
    let n = prior.dim();
    crate::check_dim(n, lik.matrix().ncols())?;
    let a = lik.matrix();
    let b2 = lik.beta() * lik.beta();
    let y = DVector::from_column_slice(lik.measurements());
    let ata = a.tr_mul(a) / b2;
    let aty = a.tr_mul(&y) / b2;
    let m = a.nrows();

    let mut log_w = Vec::with_capacity(prior.n_components());
    let mut means = Vec::with_capacity(prior.n_components());
    let mut covs = Vec::with_capacity(prior.n_components());
    for (k, (w, cov)) in prior.weights().iter().zip(prior.covariances()).enumerate() {
        let mk = DVector::from_column_slice(&prior.means()[k]);
        let prec_prior = cov.precision_dense(n);
        let prec = &prec_prior + &ata;
        let chol = Cholesky::new(prec)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("posterior precision of component {k}")))?;
        let mean = chol.solve(&(&prec_prior * &mk + &aty));
        let post_cov = chol.inverse();
        let post_cov = (&post_cov + post_cov.transpose()) * 0.5;

        // evidence N(y; A m_k, A Σ_k Aᵀ + β² I)
        let mut s = a * cov.to_dense(n) * a.transpose();
        for i in 0..m {
            s[(i, i)] += b2;
        }
        let sc = Cholesky::new(s)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("evidence covariance of component {k}")))?;
        let r = &y - a * &mk;
        let z = sc.l_dirty().solve_lower_triangular(&r).expect("triangular solve");
        let logdet: f64 = 2.0 * sc.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        log_w.push(w.ln() - 0.5 * (m as f64 * ln2pi + logdet + z.norm_squared()));

        means.push(mean.as_slice().to_vec());
        covs.push(Covariance::from_dense(post_cov)?);
    }
    let lse = log_sum_exp(&log_w);
    let weights = log_w.iter().map(|v| (v - lse).exp()).collect();
    GaussianMixture::new_normalized(weights, means, covs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{Grid2D, GridPosterior};
    use crate::rng::RngStream;
    use nalgebra::DMatrix;

    #[test]
    fn scalar_conjugate_update() {
        let prior = GaussianMixture::gaussian(vec![0.0], Covariance::Isotropic(1.0)).unwrap();
        let lik = GaussianLinearLikelihood::new(DMatrix::from_element(1, 1, 1.0), vec![2.0], 1.0).unwrap();
        let post = conjugate_posterior(&prior, &lik).unwrap();
        assert!((post.means()[0][0] - 1.0).abs() < 1e-12);
        assert!((post.covariances()[0].to_dense(1)[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evidence_selects_the_generating_mode() {
        let prior = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-2.0, -2.0], vec![2.0, 2.0]],
            vec![Covariance::Isotropic(0.5); 2],
        )
        .unwrap();
        let lik = GaussianLinearLikelihood::new(DMatrix::identity(2, 2), vec![-2.0, -2.1], 1e-3).unwrap();
        let post = conjugate_posterior(&prior, &lik).unwrap();
        assert!(post.weights()[0] > 1.0 - 1e-9);
    }

    #[test]
    fn matches_brute_force_grid_normalization() {
        let prior = GaussianMixture::new(
            vec![0.35, 0.65],
            vec![vec![-1.5, 1.0], vec![2.0, -0.5]],
            vec![
                Covariance::full(DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.6])).unwrap(),
                Covariance::Diagonal(vec![0.8, 1.5]),
            ],
        )
        .unwrap();
        let mut rng = RngStream::new(3, 0);
        let a = DMatrix::from_fn(1, 2, |_, _| rng.normal());
        let lik = GaussianLinearLikelihood::simulate(a, &[0.5, 0.5], 0.7, &mut rng).unwrap();
        let post = conjugate_posterior(&prior, &lik).unwrap();

        let grid = Grid2D::square(-10.0, 10.0, 500);
        let brute = GridPosterior::new(&lik, &prior, grid).unwrap().cell_masses();
        let area = grid.cell_area();
        let mut tv = 0.0;
        for j in 0..500 {
            for i in 0..500 {
                let x = [grid.center(0, i), grid.center(1, j)];
                tv += (post.logpdf(&x).unwrap().exp() * area - brute[j * 500 + i]).abs();
            }
        }
        assert!(0.5 * tv < 1e-4, "total variation {}", 0.5 * tv);
    }

    #[test]
    fn dimension_mismatch() {
        let prior = GaussianMixture::gaussian(vec![0.0; 3], Covariance::Isotropic(1.0)).unwrap();
        let lik = GaussianLinearLikelihood::new(DMatrix::identity(2, 2), vec![0.0, 0.0], 1.0).unwrap();
        assert!(conjugate_posterior(&prior, &lik).is_err());
    }
}
