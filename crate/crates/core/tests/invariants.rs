use nalgebra::DMatrix;
use pnp_mc::diagnostics::{conjugate_posterior, grid_divergences, Grid2D, GridPosterior};
use pnp_mc::likelihoods::{ClosureSystem, GaussianLinearLikelihood, Likelihood, TelescopeArray};
use pnp_mc::samplers::{run_batch, AnnealingSchedule, ChainConfig, Discretization};
use pnp_mc::{mmse_denoise, Covariance, GaussianMixture, RngStream, Score, ScoreModel};
use proptest::prelude::*;

fn random_mixture(rng: &mut RngStream, dim: usize, k: usize) -> GaussianMixture {
    let weights: Vec<f64> = (0..k).map(|_| rng.uniform(0.2, 1.0)).collect();
    let means = (0..k).map(|_| (0..dim).map(|_| rng.uniform(-3.0, 3.0)).collect()).collect();
    let covs = (0..k)
        .map(|c| match c % 3 {
            0 => Covariance::Isotropic(rng.uniform(0.3, 2.0)),
            1 => Covariance::Diagonal((0..dim).map(|_| rng.uniform(0.3, 2.0)).collect()),
            _ => {
                let b = DMatrix::from_fn(dim, dim, |_, _| rng.normal());
                Covariance::full(&b * b.transpose() + DMatrix::identity(dim, dim) * 0.5).unwrap()
            }
        })
        .collect();
    GaussianMixture::new_normalized(weights, means, covs).unwrap()
}

fn wrap(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    a - t * ((a + std::f64::consts::PI) / t).floor()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tweedie_holds_for_random_mixtures(seed in 0u64..1_000_000, sigma in 0.05f64..3.0) {
        let mut rng = RngStream::new(seed, 0);
        let g = random_mixture(&mut rng, 3, 3);
        let x: Vec<f64> = (0..3).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let d = mmse_denoise(&g, &x, sigma).unwrap();
        let s = g.smoothed_score(&x, sigma).unwrap();
        for i in 0..3 {
            let t = (d[i] - x[i]) / (sigma * sigma);
            prop_assert!((t - s[i]).abs() <= 1e-8 * (1.0 + s[i].abs()), "{t} vs {}", s[i]);
        }
    }

    #[test]
    fn clipped_noisy_score_is_bounded(seed in 0u64..1_000_000, r in 0.01f64..5.0, eps in 0.0f64..4.0) {
        let mut rng = RngStream::new(seed, 1);
        let g = random_mixture(&mut rng, 2, 2);
        let s = ScoreModel::noisy(g, eps).unwrap().with_clip(r).unwrap();
        let x = [rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0)];
        let mut out = [0.0; 2];
        s.score_into(&x, rng.uniform(0.0, 2.0), &mut rng, &mut out);
        prop_assert!((out[0] * out[0] + out[1] * out[1]).sqrt() <= r * (1.0 + 1e-12));
    }

    #[test]
    fn clipped_likelihood_gradient_is_bounded(seed in 0u64..1_000_000, r in 0.01f64..3.0) {
        let mut rng = RngStream::new(seed, 2);
        let a = DMatrix::from_fn(4, 3, |_, _| rng.normal());
        let lik = GaussianLinearLikelihood::new(a, vec![1.0, -2.0, 0.5, 3.0], 0.3).unwrap().with_clip(r).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.uniform(-10.0, 10.0)).collect();
        let g = lik.grad(&x).unwrap();
        prop_assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= r * (1.0 + 1e-12));
    }

    #[test]
    fn closures_ignore_station_gains(seed in 0u64..1_000_000) {
        let mut rng = RngStream::new(seed, 3);
        let arr = TelescopeArray::synthetic(6, 3.0, 2, 0.3, &mut rng);
        let sys = ClosureSystem::from_array(&arr, (6, 6), 0.1, 0.1, 0.5).unwrap();
        let x: Vec<f64> = (0..36).map(|_| rng.uniform(0.0, 1.0)).collect();
        let clean = sys.visibilities(&x).unwrap();
        let mut dirty = clean.clone();
        let m = 6;
        let nb = m * (m - 1) / 2;
        for t in 0..2 {
            let gains: Vec<f64> = (0..m).map(|_| rng.uniform(0.3, 3.0)).collect();
            let phases: Vec<f64> = (0..m).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let mut i = t * nb;
            for a in 0..m {
                for b in a + 1..m {
                    dirty[i] *= nalgebra::Complex::from_polar(gains[a] * gains[b], phases[a] - phases[b]);
                    i += 1;
                }
            }
        }
        let (c0, a0) = sys.closures(&clean).unwrap();
        let (c1, a1) = sys.closures(&dirty).unwrap();
        for (p, q) in c0.iter().zip(&c1) {
            prop_assert!(wrap(p - q).abs() < 1e-10, "{p} {q}");
            prop_assert!(*p > -std::f64::consts::PI && *p <= std::f64::consts::PI);
        }
        for (p, q) in a0.iter().zip(&a1) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn unit_weight_annealing_matches_stationary(seed in 0u64..1_000, sigma in 0.0f64..1.0, red in any::<bool>()) {
        let g = GaussianMixture::new(
            vec![0.4, 0.6],
            vec![vec![-1.0, 0.0], vec![2.0, 1.0]],
            vec![Covariance::Isotropic(0.5); 2],
        )
        .unwrap();
        let lik = GaussianLinearLikelihood::new(DMatrix::identity(2, 2), vec![0.5, 0.5], 1.0).unwrap();
        let score = ScoreModel::noisy(g, 0.3).unwrap();
        let disc = if red { Discretization::Red } else { Discretization::Pnp };
        let mut stat = ChainConfig::stationary(0.05, 40, 8, seed, disc);
        // α₀ = 1/σ² keeps α at one; σ_min = σ₀ holds σ fixed
        let s0 = sigma.max(1e-3);
        stat.sigma_static = s0;
        let ann = stat.clone().with_schedule(AnnealingSchedule::new(s0, 0.9, s0, 1.0 / (s0 * s0)).unwrap());
        let a = run_batch(&stat, &lik, &score).unwrap();
        let b = run_batch(&ann, &lik, &score).unwrap();
        prop_assert_eq!(a.samples, b.samples);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn divergences_vanish_at_the_posterior(seed in 0u64..1_000_000) {
        let mut rng = RngStream::new(seed, 4);
        let prior = random_mixture(&mut rng, 2, 2);
        let a = DMatrix::from_fn(1, 2, |_, _| rng.normal());
        let lik = GaussianLinearLikelihood::new(a, vec![rng.uniform(-1.0, 1.0)], 1.0).unwrap();
        let post = conjugate_posterior(&prior, &lik).unwrap();
        let grid = GridPosterior::new(&lik, &prior, Grid2D::square(-15.0, 15.0, 300)).unwrap();
        let m = grid_divergences(&post, &grid).unwrap();
        prop_assert!(m.fi.abs() < 1e-6, "fi {}", m.fi);
        prop_assert!(m.kl.abs() < 1e-6, "kl {}", m.kl);
    }
}
