use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::check_dim;

/// Per-coordinate summary of a sample batch against a reference.
///
/// Standard deviations use the population (`1/batch`) convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub coverage3sd: f64,
    pub nll: f64,
    pub mse: f64,
    pub psnr_db: f64,
}

/// Column means and population standard deviations of `samples` (rows).
pub fn mean_sd(samples: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let b = samples.nrows() as f64;
    let mean: Vec<f64> = samples.column_iter().map(|c| c.sum() / b).collect();
    let sd = samples
        .column_iter()
        .zip(&mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / b).sqrt())
        .collect();
    (mean, sd)
}

/// Per-pixel Gaussian negative log-likelihood of `truth`, averaged over
/// pixels. A zero SD with nonzero error gives `+∞`; a zero SD with zero
/// error gives `−∞`.
pub fn gaussian_nll(mean: &[f64], sd: &[f64], truth: &[f64]) -> f64 {
    let mut err_term = 0.0;
    let mut log_term = 0.0;
    for ((m, s), t) in mean.iter().zip(sd).zip(truth) {
        let e2 = (m - t) * (m - t);
        let v = s * s;
        if v == 0.0 {
            if e2 > 0.0 {
                return f64::INFINITY;
            }
            log_term = f64::NEG_INFINITY;
            continue;
        }
        err_term += e2 / (2.0 * v);
        log_term += 0.5 * (2.0 * PI * v).ln();
    }
    (err_term + log_term) / mean.len() as f64
}

pub fn psnr_db(max_ref: f64, mse: f64) -> f64 {
    10.0 * (max_ref * max_ref / mse).log10()
}

pub fn sample_stats(samples: &DMatrix<f64>, truth: &[f64], max_ref: f64) -> Result<PixelStats> {
    if samples.nrows() < 2 {
        return Err(Error::invalid("pixel statistics need at least two samples"));
    }
    check_dim(samples.ncols(), truth.len())?;
    if !(max_ref.is_finite() && max_ref > 0.0) {
        return Err(Error::invalid(format!("max_ref must be positive, got {max_ref}")));
    }
    let (mean, sd) = mean_sd(samples);
    let n = truth.len() as f64;
    let mse = mean.iter().zip(truth).map(|(m, t)| (m - t) * (m - t)).sum::<f64>() / n;
    let covered = mean
        .iter()
        .zip(&sd)
        .zip(truth)
        .filter(|((m, s), t)| (*m - *t).abs() <= 3.0 * *s)
        .count();
    Ok(PixelStats {
        nll: gaussian_nll(&mean, &sd, truth),
        psnr_db: psnr_db(max_ref, mse),
        coverage3sd: covered as f64 / n,
        mean,
        sd,
        mse,
    })
}

/// Samples assigned to the nearest reference mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAssignment {
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    /// Per-mode mean and population SD; `None` for modes with no samples.
    pub modes: Vec<Option<ModeSummary>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ModeAssignment {
    /// Rows of `samples` assigned to `mode`.
    pub fn members(&self, samples: &DMatrix<f64>, mode: usize) -> DMatrix<f64> {
        let rows: Vec<usize> = (0..samples.nrows()).filter(|&i| self.labels[i] == mode).collect();
        DMatrix::from_fn(rows.len(), samples.ncols(), |i, j| samples[(rows[i], j)])
    }

    pub fn fractions(&self) -> Vec<f64> {
        let total = self.labels.len().max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

// distances this close (relative) count as ties
const TIE_TOL: f64 = 1e-12;

/// Nearest-mode classification by Euclidean distance; ties go to the larger
/// cosine similarity, then to the lower index.
pub fn classify_modes(samples: &DMatrix<f64>, mode_means: &[Vec<f64>]) -> Result<ModeAssignment> {
    if mode_means.is_empty() {
        return Err(Error::invalid("need at least one reference mode"));
    }
    for m in mode_means {
        check_dim(samples.ncols(), m.len())?;
    }
    let norms: Vec<f64> = mode_means.iter().map(|m| crate::norm(m)).collect();
    let mut labels = Vec::with_capacity(samples.nrows());
    for row in samples.row_iter() {
        let x: Vec<f64> = row.iter().copied().collect();
        let xn = crate::norm(&x);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        let mut best_cos = f64::NEG_INFINITY;
        for (k, m) in mode_means.iter().enumerate() {
            let d = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let dot: f64 = x.iter().zip(m).map(|(a, b)| a * b).sum();
            let cos = if xn > 0.0 && norms[k] > 0.0 { dot / (xn * norms[k]) } else { 0.0 };
            let tie = (d - best_d).abs() <= TIE_TOL * d.max(best_d).max(1.0);
            if (!tie && d < best_d) || (tie && cos > best_cos) {
                best = k;
                best_d = d;
                best_cos = cos;
            }
        }
        labels.push(best);
    }
    let mut counts = vec![0; mode_means.len()];
    labels.iter().for_each(|&l| counts[l] += 1);
    let mut out = ModeAssignment {
        labels,
        counts,
        modes: Vec::new(),
    };
    out.modes = (0..mode_means.len())
        .map(|k| {
            if out.counts[k] == 0 {
                None
            } else {
                let (mean, sd) = mean_sd(&out.members(samples, k));
                Some(ModeSummary { mean, sd })
            }
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_mean_unit_sd() {
        let s = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let st = sample_stats(&s, &[0.0, 1.0, 2.0], 1.0).unwrap();
        assert_eq!(st.sd, vec![1.0, 1.0, 1.0]);
        assert!((st.nll - 0.918_938_533_204_672_7).abs() < 1e-12);
        assert_eq!(st.coverage3sd, 1.0);
        assert_eq!(st.mse, 0.0);
        assert_eq!(st.psnr_db, f64::INFINITY);
    }

    #[test]
    fn psnr_formula() {
        assert!((psnr_db(1.0, 0.01) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sd_flags() {
        let s = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        assert_eq!(sample_stats(&s, &[0.0], 1.0).unwrap().nll, f64::INFINITY);
        assert_eq!(sample_stats(&s, &[1.0], 1.0).unwrap().nll, f64::NEG_INFINITY);
    }

    #[test]
    fn rejects_single_sample() {
        assert!(sample_stats(&DMatrix::zeros(1, 2), &[0.0, 0.0], 1.0).is_err());
        assert!(sample_stats(&DMatrix::zeros(3, 2), &[0.0], 1.0).is_err());
    }

    #[test]
    fn coverage_counts_pixels_inside_three_sd() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, -1.0]);
        let st = sample_stats(&s, &[2.9, 3.1], 1.0).unwrap();
        assert_eq!(st.coverage3sd, 0.5);
    }

    #[test]
    fn nearest_mode_then_lower_index() {
        let modes = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.5, 0.5, 3.0, 0.2]);
        let a = classify_modes(&s, &modes).unwrap();
        assert_eq!(a.labels, vec![1, 0, 0]);
        assert_eq!(a.counts, vec![2, 1]);
        assert_eq!(a.modes[1].as_ref().unwrap().mean, vec![0.0, 1.0]);
    }

    #[test]
    fn cosine_breaks_distance_ties() {
        // both modes at distance √2 from x = (1, 1); mode 1 points the same way as x
        let modes = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
        let s = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let a = classify_modes(&s, &modes).unwrap();
        assert_eq!(a.labels, vec![1]);
        assert_eq!(a.counts, vec![0, 1]);
        assert!(a.modes[0].is_none());
    }

    proptest! {
        #[test]
        fn nll_decomposes(
            v in proptest::collection::vec((-3.0f64..3.0, 0.05f64..2.0, -3.0f64..3.0), 1..40)
        ) {
            let mean: Vec<f64> = v.iter().map(|t| t.0).collect();
            let sd: Vec<f64> = v.iter().map(|t| t.1).collect();
            let truth: Vec<f64> = v.iter().map(|t| t.2).collect();
            let n = v.len() as f64;
            let err: f64 = v.iter().map(|(m, s, t)| (m - t).powi(2) / (2.0 * s * s)).sum();
            let logs: f64 = v.iter().map(|(_, s, _)| 0.5 * (2.0 * PI * s * s).ln()).sum();
            let nll = gaussian_nll(&mean, &sd, &truth);
            prop_assert!((nll - (err + logs) / n).abs() < 1e-10 * (1.0 + nll.abs()));
        }

        #[test]
        fn nll_grows_with_error(e in 0.0f64..5.0, de in 0.01f64..1.0, s in 0.1f64..2.0) {
            let a = gaussian_nll(&[e], &[s], &[0.0]);
            let b = gaussian_nll(&[e + de], &[s], &[0.0]);
            prop_assert!(b > a);
        }
    }
}
