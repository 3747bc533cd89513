use std::f64::consts::PI;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use super::{check_beta, check_clip, Likelihood};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::{check_dim, clip_norm};

type C64 = Complex<f64>;

/// Orthonormal 2-D DFT on an `h × w` row-major image, stored as the two
/// dense 1-D transform matrices.
#[derive(Clone, Debug)]
pub struct MaskedFourierOperator {
    h: usize,
    w: usize,
    fh: Vec<C64>,
    fw: Vec<C64>,
}

fn dft_matrix(n: usize) -> Vec<C64> {
    let s = 1.0 / (n as f64).sqrt();
    let mut m = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            // reduce jk mod n first so large grids keep full phase accuracy
            let t = -2.0 * PI * ((j * k) % n) as f64 / n as f64;
            m.push(C64::new(t.cos() * s, t.sin() * s));
        }
    }
    m
}

impl MaskedFourierOperator {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::invalid("Fourier grid must be non-empty"));
        }
        Ok(Self {
            h,
            w,
            fh: dft_matrix(h),
            fw: dft_matrix(w),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// `F_h X F_w` for a real image `X`.
    pub fn forward(&self, x: &[f64]) -> Vec<C64> {
        let (h, w) = (self.h, self.w);
        let mut t = vec![C64::new(0.0, 0.0); h * w];
        for r in 0..h {
            let row = &mut t[r * w..(r + 1) * w];
            for c in 0..w {
                let v = x[r * w + c];
                if v == 0.0 {
                    continue;
                }
                let f = &self.fw[c * w..(c + 1) * w];
                row.iter_mut().zip(f).for_each(|(o, fi)| *o += fi * v);
            }
        }
        let mut y = vec![C64::new(0.0, 0.0); h * w];
        for j in 0..h {
            let out = &mut y[j * w..(j + 1) * w];
            for r in 0..h {
                let f = self.fh[j * h + r];
                let trow = &t[r * w..(r + 1) * w];
                out.iter_mut().zip(trow).for_each(|(o, ti)| *o += f * ti);
            }
        }
        y
    }

    /// Adjoint of the real-linear map `x ↦ (Re, Im)(F x)`: `Re(F̄_h R F̄_w)`.
    pub fn adjoint(&self, r: &[C64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let mut t = vec![C64::new(0.0, 0.0); h * w];
        for j in 0..h {
            let row = &mut t[j * w..(j + 1) * w];
            for k in 0..h {
                let f = self.fh[k * h + j].conj();
                let rrow = &r[k * w..(k + 1) * w];
                if rrow.iter().all(|v| v.re == 0.0 && v.im == 0.0) {
                    continue;
                }
                row.iter_mut().zip(rrow).for_each(|(o, ri)| *o += f * ri);
            }
        }
        for j in 0..h {
            let trow = &t[j * w..(j + 1) * w];
            for c in 0..w {
                let f = &self.fw[c * w..(c + 1) * w];
                out[j * w + c] = trow.iter().zip(f).map(|(ti, fi)| (ti * fi.conj()).re).sum();
            }
        }
    }

    /// Radial sampling pattern: spokes through the zero frequency are added
    /// until at least `fraction` of the frequencies are kept.
    pub fn radial_mask(h: usize, w: usize, fraction: f64) -> Vec<bool> {
        let total = h * w;
        let target = ((fraction.clamp(0.0, 1.0)) * total as f64).ceil() as usize;
        let mut spokes = 1usize;
        loop {
            let mut mask = vec![false; total];
            mask[0] = true;
            let radius = (h.max(w) as f64) / 2.0 + 1.0;
            for s in 0..spokes {
                let theta = PI * s as f64 / spokes as f64;
                let (sn, cs) = theta.sin_cos();
                let steps = (4.0 * radius) as i64;
                for t in -steps..=steps {
                    let rho = t as f64 * 0.25;
                    let fy = (rho * sn).round() as i64;
                    let fx = (rho * cs).round() as i64;
                    if fy.abs() > h as i64 / 2 || fx.abs() > w as i64 / 2 {
                        continue;
                    }
                    let j = fy.rem_euclid(h as i64) as usize;
                    let k = fx.rem_euclid(w as i64) as usize;
                    mask[j * w + k] = true;
                }
            }
            let kept = mask.iter().filter(|m| **m).count();
            if kept >= target || spokes > 4 * total {
                return mask;
            }
            spokes += 1;
        }
    }
}

/// `g(x) = ‖M∘F(x) − y‖² / (2β²)` with `F` the orthonormal 2-D DFT and the
/// complex data treated as stacked real and imaginary parts.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "FourierDocument", into = "FourierDocument")]
pub struct MaskedFourierLikelihood {
    op: MaskedFourierOperator,
    mask: Vec<bool>,
    kept: Vec<usize>,
    /// Interleaved `(re, im)` at the kept frequencies, row-major order.
    y: Vec<f64>,
    beta: f64,
    r_g: Option<f64>,
}

impl MaskedFourierLikelihood {
    pub fn new(grid_shape: (usize, usize), mask: Vec<bool>, y: Vec<f64>, beta: f64) -> Result<Self> {
        let (h, w) = grid_shape;
        check_beta("beta", beta)?;
        check_dim(h * w, mask.len())?;
        let kept: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        check_dim(2 * kept.len(), y.len())?;
        Ok(Self {
            op: MaskedFourierOperator::new(h, w)?,
            mask,
            kept,
            y,
            beta,
            r_g: None,
        })
    }

    pub fn simulate(
        grid_shape: (usize, usize),
        mask: Vec<bool>,
        truth: &[f64],
        beta: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let op = MaskedFourierOperator::new(grid_shape.0, grid_shape.1)?;
        check_dim(grid_shape.0 * grid_shape.1, truth.len())?;
        check_dim(truth.len(), mask.len())?;
        let full = op.forward(truth);
        let mut y = Vec::new();
        for (i, v) in full.iter().enumerate() {
            if mask[i] {
                y.push(v.re + beta * rng.normal());
                y.push(v.im + beta * rng.normal());
            }
        }
        Self::new(grid_shape, mask, y, beta)
    }

    pub fn with_clip(mut self, r_g: f64) -> Result<Self> {
        check_clip(Some(r_g))?;
        self.r_g = Some(r_g);
        Ok(self)
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.op.shape()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn measurements(&self) -> &[f64] {
        &self.y
    }

    fn masked_residual(&self, x: &[f64]) -> Vec<C64> {
        let mut f = self.op.forward(x);
        let mut r = vec![C64::new(0.0, 0.0); f.len()];
        for (q, &i) in self.kept.iter().enumerate() {
            r[i] = f[i] - C64::new(self.y[2 * q], self.y[2 * q + 1]);
        }
        f.clear();
        r
    }
}

impl Likelihood for MaskedFourierLikelihood {
    fn dim(&self) -> usize {
        self.mask.len()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let r = self.masked_residual(x);
        Ok(r.iter().map(|v| v.norm_sqr()).sum::<f64>() / (2.0 * self.beta * self.beta))
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        let r = self.masked_residual(x);
        self.op.adjoint(&r, out);
        let s = 1.0 / (self.beta * self.beta);
        out.iter_mut().for_each(|o| *o *= s);
        if let Some(rg) = self.r_g {
            clip_norm(out, rg);
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FourierDocument {
    grid_shape: (usize, usize),
    mask: Vec<bool>,
    y: Vec<f64>,
    beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_g: Option<f64>,
}

impl TryFrom<FourierDocument> for MaskedFourierLikelihood {
    type Error = Error;

    fn try_from(d: FourierDocument) -> Result<Self> {
        check_clip(d.r_g)?;
        let mut l = Self::new(d.grid_shape, d.mask, d.y, d.beta)?;
        l.r_g = d.r_g;
        Ok(l)
    }
}

impl From<MaskedFourierLikelihood> for FourierDocument {
    fn from(l: MaskedFourierLikelihood) -> Self {
        FourierDocument {
            grid_shape: l.op.shape(),
            mask: l.mask,
            y: l.y,
            beta: l.beta,
            r_g: l.r_g,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihoods::testutil::fd_rel_error;
    use crate::norm;

    fn random_image(n: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn orthonormal_transform_preserves_energy() {
        let op = MaskedFourierOperator::new(6, 10).unwrap();
        let mut rng = RngStream::new(1, 0);
        let x = random_image(60, &mut rng);
        let y = op.forward(&x);
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ey: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        assert!((ex - ey).abs() < 1e-10 * ex);
        // DC term equals the scaled pixel sum
        assert!((y[0].re - x.iter().sum::<f64>() / 60f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn adjoint_identity() {
        let op = MaskedFourierOperator::new(8, 5).unwrap();
        let mut rng = RngStream::new(2, 0);
        let x = random_image(40, &mut rng);
        let r: Vec<C64> = (0..40).map(|_| C64::new(rng.normal(), rng.normal())).collect();
        let fx = op.forward(&x);
        let lhs: f64 = fx.iter().zip(&r).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        let mut at = vec![0.0; 40];
        op.adjoint(&r, &mut at);
        let rhs: f64 = x.iter().zip(&at).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let mut rng = RngStream::new(3, 0);
        let x0 = random_image(64, &mut rng);
        let mask = vec![true; 64];
        let op = MaskedFourierOperator::new(8, 8).unwrap();
        let y: Vec<f64> = op.forward(&x0).iter().flat_map(|v| [v.re, v.im]).collect();
        let lik = MaskedFourierLikelihood::new((8, 8), mask, y, 0.3).unwrap();
        assert!(norm(&lik.grad(&x0).unwrap()) < 1e-10);
    }

    #[test]
    fn empty_mask_has_zero_gradient() {
        let lik = MaskedFourierLikelihood::new((4, 4), vec![false; 16], vec![], 1.0).unwrap();
        let mut rng = RngStream::new(4, 0);
        for _ in 0..5 {
            let x = random_image(16, &mut rng);
            assert_eq!(lik.grad(&x).unwrap(), vec![0.0; 16]);
        }
    }

    #[test]
    fn radial_mask_gradient_matches_finite_differences() {
        let mask = MaskedFourierOperator::radial_mask(8, 8, 0.25);
        let kept = mask.iter().filter(|m| **m).count();
        assert!(kept >= 16 && kept < 40, "kept {kept}");
        let mut rng = RngStream::new(5, 0);
        let truth = random_image(64, &mut rng);
        let lik = MaskedFourierLikelihood::simulate((8, 8), mask, &truth, 0.2, &mut rng).unwrap();
        for _ in 0..20 {
            let x = random_image(64, &mut rng);
            let err = fd_rel_error(&lik, &x);
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(MaskedFourierLikelihood::new((4, 4), vec![true; 15], vec![0.0; 30], 1.0).is_err());
        let lik = MaskedFourierLikelihood::new((2, 2), vec![true, false, false, false], vec![0.0, 0.0], 1.0).unwrap();
        assert!(lik.grad(&[0.0; 5]).is_err());
    }
}
