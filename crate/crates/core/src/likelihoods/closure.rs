//! Interferometric closure-quantity likelihood.
//!
//! Visibilities are the nonuniform DFT of the image at the baseline
//! spatial frequencies. Closure phases (bispectrum angles over telescope
//! triangles) cancel per-telescope phase errors and log closure amplitudes
//! (over quadrangles) cancel per-telescope gains. The likelihood combines
//! both χ² terms with a total-flux constraint.
//!
//! Image convention: row-major `h × w`, pixel `(r, c)` sits at direction
//! cosines `l = (c − (w−1)/2)/w`, `m = ((h−1)/2 − r)/h`, i.e. in units of the
//! field of view, so `(u, v)` are measured in cycles per field of view.

use std::f64::consts::PI;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use super::{check_beta, check_clip, Likelihood};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::{check_dim, clip_norm};

type C64 = Complex<f64>;

/// Map an angle to the principal interval `(−π, π]`.
pub(crate) fn wrap_phase(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Telescope positions (cycles per field of view) with a simple rotating
/// projection standing in for Earth rotation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TelescopeArray {
    pub positions: Vec<[f64; 2]>,
    pub n_times: usize,
    /// Rotation of the projected baselines between consecutive time steps (radians).
    pub rotation_step: f64,
}

impl TelescopeArray {
    /// `n` telescopes placed uniformly in a disk of radius `radius`.
    pub fn synthetic(n: usize, radius: f64, n_times: usize, rotation_step: f64, rng: &mut RngStream) -> Self {
        let positions = (0..n)
            .map(|_| {
                let r = radius * rng.uniform(0.0, 1.0).sqrt();
                let t = rng.uniform(0.0, 2.0 * PI);
                [r * t.cos(), r * t.sin()]
            })
            .collect();
        Self {
            positions,
            n_times,
            rotation_step,
        }
    }

    /// Baseline `(u, v)` per time step, canonical pair order `(a, b)`, `a < b`.
    pub fn uv(&self) -> Vec<Vec<[f64; 2]>> {
        let m = self.positions.len();
        (0..self.n_times)
            .map(|t| {
                let (s, c) = (t as f64 * self.rotation_step).sin_cos();
                let mut row = Vec::with_capacity(m * (m - 1) / 2);
                for a in 0..m {
                    for b in a + 1..m {
                        let du = self.positions[a][0] - self.positions[b][0];
                        let dv = self.positions[a][1] - self.positions[b][1];
                        row.push([c * du - s * dv, s * du + c * dv]);
                    }
                }
                row
            })
            .collect()
    }
}

/// Greedy selection of linearly independent rows from candidate closure
/// design vectors over the baselines.
fn greedy_independent<T: Copy>(candidates: &[(T, Vec<f64>)], want: usize) -> Vec<T> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut picked = Vec::new();
    for (item, row) in candidates {
        let mut v = row.clone();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
            picked.push(*item);
            if picked.len() == want {
                break;
            }
        }
    }
    picked
}

fn pair_index(m: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    a * m - a * (a + 1) / 2 + (b - a - 1)
}

/// `(M−1)(M−2)/2` independent triangles (`V_ab V_bc conj(V_ac)`).
pub fn independent_triangles(m: usize) -> Vec<[usize; 3]> {
    let nb = m * (m.saturating_sub(1)) / 2;
    let mut cands = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            for c in b + 1..m {
                let mut row = vec![0.0; nb];
                row[pair_index(m, a, b)] += 1.0;
                row[pair_index(m, b, c)] += 1.0;
                row[pair_index(m, a, c)] -= 1.0;
                cands.push(([a, b, c], row));
            }
        }
    }
    greedy_independent(&cands, (m.saturating_sub(1)) * (m.saturating_sub(2)) / 2)
}

/// `M(M−3)/2` independent quadrangles (`|V_ab||V_cd| / (|V_ac||V_bd|)`).
pub fn independent_quads(m: usize) -> Vec<[usize; 4]> {
    if m < 4 {
        return Vec::new();
    }
    let nb = m * (m - 1) / 2;
    let mut cands = Vec::new();
    for p in 0..m {
        for q in p + 1..m {
            for r in q + 1..m {
                for s in r + 1..m {
                    for quad in [[p, q, r, s], [p, q, s, r]] {
                        let [a, b, c, d] = quad;
                        let mut row = vec![0.0; nb];
                        row[pair_index(m, a, b)] += 1.0;
                        row[pair_index(m, c, d)] += 1.0;
                        row[pair_index(m, a, c)] -= 1.0;
                        row[pair_index(m, b, d)] -= 1.0;
                        cands.push((quad, row));
                    }
                }
            }
        }
    }
    greedy_independent(&cands, m * (m - 3) / 2)
}

/// Observation geometry and noise model: everything but the data.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SystemDocument", into = "SystemDocument")]
pub struct ClosureSystem {
    n_telescopes: usize,
    grid_shape: (usize, usize),
    uv: Vec<Vec<[f64; 2]>>,
    triangles: Vec<[usize; 3]>,
    quads: Vec<[usize; 4]>,
    beta_cph: f64,
    beta_camp: f64,
    rho: f64,
    // nonuniform DFT, row per visibility (time-major), split into re/im
    dft_re: Vec<f64>,
    dft_im: Vec<f64>,
}

impl ClosureSystem {
    pub fn new(
        n_telescopes: usize,
        grid_shape: (usize, usize),
        uv: Vec<Vec<[f64; 2]>>,
        triangles: Vec<[usize; 3]>,
        quads: Vec<[usize; 4]>,
        beta_cph: f64,
        beta_camp: f64,
        rho: f64,
    ) -> Result<Self> {
        let m = n_telescopes;
        if m < 3 {
            return Err(Error::invalid("closure phases need at least 3 telescopes"));
        }
        check_beta("beta_cph", beta_cph)?;
        check_beta("beta_camp", beta_camp)?;
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::invalid(format!("flux weight rho must be nonnegative, got {rho}")));
        }
        let (h, w) = grid_shape;
        if h == 0 || w == 0 {
            return Err(Error::invalid("image grid must be non-empty"));
        }
        if uv.is_empty() {
            return Err(Error::invalid("need at least one time step"));
        }
        let nb = m * (m - 1) / 2;
        for row in &uv {
            check_dim(nb, row.len())?;
        }
        if triangles.len() != (m - 1) * (m - 2) / 2 {
            return Err(Error::invalid(format!(
                "{m} telescopes need {} closure triangles, got {}",
                (m - 1) * (m - 2) / 2,
                triangles.len()
            )));
        }
        let want_quads = if m >= 3 { m * (m - 3) / 2 } else { 0 };
        if quads.len() != want_quads {
            return Err(Error::invalid(format!(
                "{m} telescopes need {want_quads} closure quadrangles, got {}",
                quads.len()
            )));
        }
        let distinct = |ix: &[usize]| {
            ix.iter().all(|&i| i < m) && (0..ix.len()).all(|i| (i + 1..ix.len()).all(|j| ix[i] != ix[j]))
        };
        if !triangles.iter().all(|t| distinct(t)) || !quads.iter().all(|q| distinct(q)) {
            return Err(Error::invalid("closure index sets must use distinct valid telescopes"));
        }

        let n_pix = h * w;
        let n_vis = uv.len() * nb;
        let mut dft_re = Vec::with_capacity(n_vis * n_pix);
        let mut dft_im = Vec::with_capacity(n_vis * n_pix);
        for row in &uv {
            for &[u, v] in row {
                for r in 0..h {
                    let mm = ((h as f64 - 1.0) / 2.0 - r as f64) / h as f64;
                    for c in 0..w {
                        let l = (c as f64 - (w as f64 - 1.0) / 2.0) / w as f64;
                        let ph = -2.0 * PI * (u * l + v * mm);
                        dft_re.push(ph.cos());
                        dft_im.push(ph.sin());
                    }
                }
            }
        }
        Ok(Self {
            n_telescopes,
            grid_shape,
            uv,
            triangles,
            quads,
            beta_cph,
            beta_camp,
            rho,
            dft_re,
            dft_im,
        })
    }

    /// System with the standard independent closure sets for `array`.
    pub fn from_array(
        array: &TelescopeArray,
        grid_shape: (usize, usize),
        beta_cph: f64,
        beta_camp: f64,
        rho: f64,
    ) -> Result<Self> {
        let m = array.positions.len();
        Self::new(
            m,
            grid_shape,
            array.uv(),
            independent_triangles(m),
            independent_quads(m),
            beta_cph,
            beta_camp,
            rho,
        )
    }

    pub fn with_noise(mut self, beta_cph: f64, beta_camp: f64) -> Result<Self> {
        check_beta("beta_cph", beta_cph)?;
        check_beta("beta_camp", beta_camp)?;
        self.beta_cph = beta_cph;
        self.beta_camp = beta_camp;
        Ok(self)
    }

    pub fn n_telescopes(&self) -> usize {
        self.n_telescopes
    }
    pub fn n_times(&self) -> usize {
        self.uv.len()
    }
    pub fn n_baselines(&self) -> usize {
        self.n_telescopes * (self.n_telescopes - 1) / 2
    }
    pub fn grid_shape(&self) -> (usize, usize) {
        self.grid_shape
    }
    pub fn dim(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
    pub fn quads(&self) -> &[[usize; 4]] {
        &self.quads
    }
    pub fn uv(&self) -> &[Vec<[f64; 2]>] {
        &self.uv
    }
    pub fn beta_cph(&self) -> f64 {
        self.beta_cph
    }
    pub fn beta_camp(&self) -> f64 {
        self.beta_camp
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }

    fn n_vis(&self) -> usize {
        self.uv.len() * self.n_baselines()
    }

    /// Ideal visibilities, time-major then canonical baseline order.
    pub fn visibilities(&self, x: &[f64]) -> Result<Vec<C64>> {
        check_dim(self.dim(), x.len())?;
        let n = self.dim();
        Ok((0..self.n_vis())
            .map(|v| {
                let re = &self.dft_re[v * n..(v + 1) * n];
                let im = &self.dft_im[v * n..(v + 1) * n];
                let a: f64 = re.iter().zip(x).map(|(f, xi)| f * xi).sum();
                let b: f64 = im.iter().zip(x).map(|(f, xi)| f * xi).sum();
                C64::new(a, b)
            })
            .collect())
    }

    /// Visibility index for oriented pair `(a, b)` at time `t`, and whether
    /// the stored (canonical) value must be conjugated.
    fn oriented(&self, t: usize, a: usize, b: usize) -> (usize, bool) {
        (t * self.n_baselines() + pair_index(self.n_telescopes, a, b), a > b)
    }

    fn vis_at(&self, vis: &[C64], t: usize, a: usize, b: usize) -> C64 {
        let (i, flip) = self.oriented(t, a, b);
        if flip {
            vis[i].conj()
        } else {
            vis[i]
        }
    }

    /// Closure phases and log closure amplitudes of a visibility set.
    pub fn closures(&self, vis: &[C64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.n_vis(), vis.len())?;
        let mut cph = Vec::with_capacity(self.n_times() * self.triangles.len());
        let mut camp = Vec::with_capacity(self.n_times() * self.quads.len());
        for t in 0..self.n_times() {
            for &[a, b, c] in &self.triangles {
                let vab = self.vis_at(vis, t, a, b);
                let vbc = self.vis_at(vis, t, b, c);
                let vac = self.vis_at(vis, t, a, c);
                if [vab, vbc, vac].iter().any(|v| v.norm_sqr() == 0.0) {
                    return Err(Error::DegenerateMeasurement(format!(
                        "zero visibility in triangle ({a},{b},{c}) at time {t}"
                    )));
                }
                cph.push((vab * vbc * vac.conj()).arg());
            }
            for &[a, b, c, d] in &self.quads {
                let amps = [
                    self.vis_at(vis, t, a, b).norm(),
                    self.vis_at(vis, t, c, d).norm(),
                    self.vis_at(vis, t, a, c).norm(),
                    self.vis_at(vis, t, b, d).norm(),
                ];
                if amps.iter().any(|v| *v == 0.0) {
                    return Err(Error::DegenerateMeasurement(format!(
                        "zero visibility amplitude in quadrangle ({a},{b},{c},{d}) at time {t}"
                    )));
                }
                camp.push(amps[0].ln() + amps[1].ln() - amps[2].ln() - amps[3].ln());
            }
        }
        Ok((cph, camp))
    }

    /// Closure phases, log closure amplitudes and total flux of an image.
    pub fn forward(&self, x: &[f64]) -> Result<ClosureForward> {
        let vis = self.visibilities(x)?;
        let (cph, camp) = self.closures(&vis)?;
        Ok(ClosureForward {
            cph,
            camp,
            flux: x.iter().sum(),
        })
    }
}

/// Output of the closure forward model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureForward {
    pub cph: Vec<f64>,
    pub camp: Vec<f64>,
    pub flux: f64,
}

/// Observed closure data, time-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosureData {
    pub y_cph: Vec<f64>,
    pub y_camp: Vec<f64>,
    pub y_flux: f64,
}

/// `χ²_cph + χ²_camp + ρ(Σx − y_flux)²/2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ClosureDocument", into = "ClosureDocument")]
pub struct ClosureLikelihood {
    system: ClosureSystem,
    data: ClosureData,
    r_g: Option<f64>,
}

struct Residuals {
    vis: Vec<C64>,
    cph: Vec<f64>,
    camp: Vec<f64>,
    flux: f64,
}

impl ClosureLikelihood {
    pub fn new(system: ClosureSystem, mut data: ClosureData) -> Result<Self> {
        check_dim(system.n_times() * system.triangles.len(), data.y_cph.len())?;
        check_dim(system.n_times() * system.quads.len(), data.y_camp.len())?;
        if data.y_cph.iter().chain(&data.y_camp).any(|v| !v.is_finite()) || !data.y_flux.is_finite() {
            return Err(Error::invalid("closure data must be finite"));
        }
        data.y_cph.iter_mut().for_each(|p| *p = wrap_phase(*p));
        Ok(Self {
            system,
            data,
            r_g: None,
        })
    }

    pub fn with_clip(mut self, r_g: f64) -> Result<Self> {
        check_clip(Some(r_g))?;
        self.r_g = Some(r_g);
        Ok(self)
    }

    pub fn with_rho(mut self, rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(Error::invalid(format!("flux weight rho must be nonnegative, got {rho}")));
        }
        self.system.rho = rho;
        Ok(self)
    }

    pub fn system(&self) -> &ClosureSystem {
        &self.system
    }

    pub fn data(&self) -> &ClosureData {
        &self.data
    }

    pub fn forward(&self, x: &[f64]) -> Result<ClosureForward> {
        self.system.forward(x)
    }

    fn residuals(&self, x: &[f64]) -> Result<Residuals> {
        let vis = self.system.visibilities(x)?;
        let (cph, camp) = self.system.closures(&vis)?;
        let cph = cph
            .iter()
            .zip(&self.data.y_cph)
            .map(|(a, y)| wrap_phase(a - y))
            .collect();
        let camp = camp.iter().zip(&self.data.y_camp).map(|(a, y)| a - y).collect();
        Ok(Residuals {
            vis,
            cph,
            camp,
            flux: x.iter().sum::<f64>() - self.data.y_flux,
        })
    }

    /// Reduced chi-squares `(mean (r/β_cph)², mean (r/β_camp)²)`; a value
    /// near one means data and prior are balanced.
    pub fn reduced_chi2(&self, x: &[f64]) -> Result<(f64, f64)> {
        let r = self.residuals(x)?;
        let red = |v: &[f64], b: f64| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().map(|e| (e / b) * (e / b)).sum::<f64>() / v.len() as f64
            }
        };
        Ok((red(&r.cph, self.system.beta_cph), red(&r.camp, self.system.beta_camp)))
    }
}

impl Likelihood for ClosureLikelihood {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        let r = self.residuals(x)?;
        let s = &self.system;
        let cph: f64 = r.cph.iter().map(|e| e * e).sum::<f64>() / (2.0 * s.beta_cph * s.beta_cph);
        let camp: f64 = r.camp.iter().map(|e| e * e).sum::<f64>() / (2.0 * s.beta_camp * s.beta_camp);
        Ok(cph + camp + 0.5 * s.rho * r.flux * r.flux)
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let r = self.residuals(x)?;
        let s = &self.system;
        let nv = r.vis.len();
        // d/d log|V| and d/d arg V for each canonical visibility
        let mut d_logamp = vec![0.0; nv];
        let mut d_arg = vec![0.0; nv];
        let (ntri, nquad) = (s.triangles.len(), s.quads.len());
        let wc = 1.0 / (s.beta_cph * s.beta_cph);
        let wa = 1.0 / (s.beta_camp * s.beta_camp);
        for t in 0..s.n_times() {
            for (i, &[a, b, c]) in s.triangles.iter().enumerate() {
                let e = r.cph[t * ntri + i] * wc;
                for (p, q, sign) in [(a, b, 1.0), (b, c, 1.0), (a, c, -1.0)] {
                    let (idx, flip) = s.oriented(t, p, q);
                    d_arg[idx] += if flip { -sign * e } else { sign * e };
                }
            }
            for (j, &[a, b, c, d]) in s.quads.iter().enumerate() {
                let e = r.camp[t * nquad + j] * wa;
                for (p, q, sign) in [(a, b, 1.0), (c, d, 1.0), (a, c, -1.0), (b, d, -1.0)] {
                    d_logamp[s.oriented(t, p, q).0] += sign * e;
                }
            }
        }
        // ∂/∂x_p = Re Σ_v z_v F_vp,  z_v = (α_v − iβ_v) conj(V_v)/|V_v|²
        let n = s.dim();
        out.iter_mut().for_each(|o| *o = s.rho * r.flux);
        for v in 0..nv {
            if d_logamp[v] == 0.0 && d_arg[v] == 0.0 {
                continue;
            }
            let vis = r.vis[v];
            let z = C64::new(d_logamp[v], -d_arg[v]) * vis.conj() / vis.norm_sqr();
            let re = &s.dft_re[v * n..(v + 1) * n];
            let im = &s.dft_im[v * n..(v + 1) * n];
            for ((o, fr), fi) in out.iter_mut().zip(re).zip(im) {
                *o += z.re * fr - z.im * fi;
            }
        }
        if let Some(rg) = self.r_g {
            clip_norm(out, rg);
        }
        Ok(())
    }
}

/// Corrupt the ideal visibilities of `truth` with per-telescope gains and
/// phases (per time step) and thermal noise, then form closure data.
pub fn simulate_measurements(
    truth: &[f64],
    system: &ClosureSystem,
    gain_std: f64,
    phase_std: f64,
    thermal_std: f64,
    rng: &mut RngStream,
) -> Result<ClosureLikelihood> {
    for (name, v) in [("gain_std", gain_std), ("phase_std", phase_std), ("thermal_std", thermal_std)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(format!("{name} must be nonnegative, got {v}")));
        }
    }
    let mut vis = system.visibilities(truth)?;
    let m = system.n_telescopes;
    let nb = system.n_baselines();
    for t in 0..system.n_times() {
        let gains: Vec<f64> = (0..m).map(|_| (gain_std * rng.normal()).exp()).collect();
        let phases: Vec<f64> = (0..m).map(|_| phase_std * rng.normal()).collect();
        for a in 0..m {
            for b in a + 1..m {
                let i = t * nb + pair_index(m, a, b);
                let corrupt = C64::from_polar(gains[a] * gains[b], -(phases[a] - phases[b]));
                let eta = C64::new(thermal_std * rng.normal(), thermal_std * rng.normal());
                vis[i] = corrupt * vis[i] + eta;
            }
        }
    }
    let (y_cph, y_camp) = system.closures(&vis)?;
    ClosureLikelihood::new(
        system.clone(),
        ClosureData {
            y_cph,
            y_camp,
            y_flux: truth.iter().sum(),
        },
    )
}

/// First-order RMS closure noise `(β_cph, β_camp)` produced by complex
/// thermal noise of per-component std `thermal_std` on the visibilities of
/// `truth`.
pub fn closure_noise_levels(system: &ClosureSystem, truth: &[f64], thermal_std: f64) -> Result<(f64, f64)> {
    let vis = system.visibilities(truth)?;
    let inv2 = |t: usize, a: usize, b: usize| 1.0 / system.vis_at(&vis, t, a, b).norm_sqr();
    let (mut vc, mut va) = (0.0, 0.0);
    for t in 0..system.n_times() {
        for &[a, b, c] in &system.triangles {
            vc += inv2(t, a, b) + inv2(t, b, c) + inv2(t, a, c);
        }
        for &[a, b, c, d] in &system.quads {
            va += inv2(t, a, b) + inv2(t, c, d) + inv2(t, a, c) + inv2(t, b, d);
        }
    }
    let nc = (system.n_times() * system.triangles.len()).max(1) as f64;
    let na = (system.n_times() * system.quads.len()).max(1) as f64;
    let s2 = thermal_std * thermal_std;
    Ok(((s2 * vc / nc).sqrt(), (s2 * va / na).sqrt()))
}

#[derive(Serialize, Deserialize)]
struct SystemDocument {
    n_telescopes: usize,
    grid_shape: (usize, usize),
    /// Explicit `(u, v)` per time step per canonical baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uv: Option<Vec<Vec<[f64; 2]>>>,
    /// Alternative to `uv`: telescope positions and rotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    array: Option<TelescopeArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    triangles: Option<Vec<[usize; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quads: Option<Vec<[usize; 4]>>,
    beta_cph: f64,
    beta_camp: f64,
    #[serde(default)]
    rho: f64,
}

impl TryFrom<SystemDocument> for ClosureSystem {
    type Error = Error;

    fn try_from(d: SystemDocument) -> Result<Self> {
        let uv = match (d.uv, d.array) {
            (Some(uv), _) => uv,
            (None, Some(arr)) => {
                check_dim(d.n_telescopes, arr.positions.len())?;
                arr.uv()
            }
            (None, None) => return Err(Error::invalid("closure system needs `uv` or `array`")),
        };
        ClosureSystem::new(
            d.n_telescopes,
            d.grid_shape,
            uv,
            d.triangles.unwrap_or_else(|| independent_triangles(d.n_telescopes)),
            d.quads.unwrap_or_else(|| independent_quads(d.n_telescopes)),
            d.beta_cph,
            d.beta_camp,
            d.rho,
        )
    }
}

impl From<ClosureSystem> for SystemDocument {
    fn from(s: ClosureSystem) -> Self {
        SystemDocument {
            n_telescopes: s.n_telescopes,
            grid_shape: s.grid_shape,
            uv: Some(s.uv),
            array: None,
            triangles: Some(s.triangles),
            quads: Some(s.quads),
            beta_cph: s.beta_cph,
            beta_camp: s.beta_camp,
            rho: s.rho,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ClosureDocument {
    #[serde(flatten)]
    system: ClosureSystem,
    #[serde(flatten)]
    data: ClosureData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_g: Option<f64>,
}

impl TryFrom<ClosureDocument> for ClosureLikelihood {
    type Error = Error;

    fn try_from(d: ClosureDocument) -> Result<Self> {
        check_clip(d.r_g)?;
        let mut l = ClosureLikelihood::new(d.system, d.data)?;
        l.r_g = d.r_g;
        Ok(l)
    }
}

impl From<ClosureLikelihood> for ClosureDocument {
    fn from(l: ClosureLikelihood) -> Self {
        ClosureDocument {
            system: l.system,
            data: l.data,
            r_g: l.r_g,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihoods::testutil::fd_rel_error;
    use crate::norm;

    fn system(m: usize, side: usize, times: usize, seed: u64) -> ClosureSystem {
        let mut rng = RngStream::new(seed, 0);
        let arr = TelescopeArray::synthetic(m, side as f64 / 4.0, times, PI / 12.0, &mut rng);
        ClosureSystem::from_array(&arr, (side, side), 0.05, 0.05, 0.0).unwrap()
    }

    fn positive_image(n: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(0.1, 1.0)).collect()
    }

    #[test]
    fn wrap_maps_to_principal_interval() {
        assert_eq!(wrap_phase(PI), PI);
        assert!((wrap_phase(-PI) - PI).abs() < 1e-15);
        assert!((wrap_phase(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_phase(0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn nine_telescopes_give_28_and_27() {
        assert_eq!(independent_triangles(9).len(), 28);
        assert_eq!(independent_quads(9).len(), 27);
        let s = system(9, 8, 1, 1);
        let mut rng = RngStream::new(2, 0);
        let f = s.forward(&positive_image(64, &mut rng)).unwrap();
        assert_eq!((f.cph.len(), f.camp.len()), (28, 27));
    }

    #[test]
    fn point_source_has_trivial_closures() {
        // odd grid so the centre pixel sits at l = m = 0
        let s = system(6, 9, 2, 3);
        let mut x = vec![0.0; 81];
        x[40] = 2.5;
        let f = s.forward(&x).unwrap();
        assert!(f.cph.iter().all(|v| v.abs() < 1e-12));
        assert!(f.camp.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(f.flux, 2.5);
    }

    #[test]
    fn corruption_invariance() {
        let s = system(9, 8, 3, 4);
        let mut rng = RngStream::new(5, 0);
        let truth = positive_image(64, &mut rng);
        let clean = s.forward(&truth).unwrap();
        let lik = simulate_measurements(&truth, &s, 0.3, 1.0, 0.0, &mut rng).unwrap();
        for (a, b) in lik.data().y_cph.iter().zip(&clean.cph) {
            assert!(wrap_phase(a - b).abs() < 1e-10);
        }
        for (a, b) in lik.data().y_camp.iter().zip(&clean.camp) {
            assert!((a - b).abs() < 1e-10);
        }
        let exact = simulate_measurements(&truth, &s, 0.0, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(exact.data().y_camp, clean.camp);
        assert_eq!(exact.data().y_cph, clean.cph.iter().map(|p| wrap_phase(*p)).collect::<Vec<_>>());
    }

    #[test]
    fn simulation_is_reproducible() {
        let s = system(5, 6, 2, 6);
        let truth = vec![0.5; 36];
        let a = simulate_measurements(&truth, &s, 0.1, 0.5, 0.01, &mut RngStream::new(9, 1)).unwrap();
        let b = simulate_measurements(&truth, &s, 0.1, 0.5, 0.01, &mut RngStream::new(9, 1)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn truth_is_stationary_without_noise() {
        let s = system(9, 8, 2, 7);
        let mut rng = RngStream::new(8, 0);
        let truth = positive_image(64, &mut rng);
        let lik = simulate_measurements(&truth, &s, 0.2, 0.7, 0.0, &mut rng).unwrap();
        assert!(norm(&lik.grad(&truth).unwrap()) < 1e-8);
    }

    #[test]
    fn satisfied_flux_contributes_nothing() {
        let s = system(5, 6, 1, 10);
        let truth = vec![0.4; 36];
        let lik = simulate_measurements(&truth, &s, 0.0, 0.0, 0.0, &mut RngStream::new(1, 1))
            .unwrap()
            .with_rho(0.5)
            .unwrap();
        // a uniform image with the right flux is also a point-symmetric
        // fit of the closures, so the whole gradient vanishes
        assert!(norm(&lik.grad(&truth).unwrap()) < 1e-8);
        let no_rho = lik.clone().with_rho(0.0).unwrap();
        let x = vec![0.3; 36]; // wrong flux, same closures
        let g1 = lik.grad(&x).unwrap();
        let g0 = no_rho.grad(&x).unwrap();
        let flux_term = 0.5 * (0.3 * 36.0 - 0.4 * 36.0);
        assert!(g1.iter().zip(&g0).all(|(a, b)| (a - b - flux_term).abs() < 1e-9));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = system(9, 16, 4, 11);
        let mut rng = RngStream::new(12, 0);
        let truth = positive_image(256, &mut rng);
        let lik = simulate_measurements(&truth, &s, 0.1, 0.5, 0.5, &mut rng)
            .unwrap()
            .with_rho(0.5)
            .unwrap();
        for _ in 0..5 {
            let x = positive_image(256, &mut rng);
            let err = fd_rel_error(&lik, &x);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn degenerate_amplitude_is_an_error() {
        let s = system(5, 6, 1, 13);
        assert!(matches!(s.forward(&vec![0.0; 36]), Err(Error::DegenerateMeasurement(_))));
    }

    #[test]
    fn rejects_wrong_closure_counts() {
        let arr = TelescopeArray::synthetic(6, 2.0, 1, 0.0, &mut RngStream::new(1, 0));
        let r = ClosureSystem::new(6, (4, 4), arr.uv(), independent_triangles(6)[..5].to_vec(), independent_quads(6), 0.1, 0.1, 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn document_round_trip() {
        let s = system(5, 6, 2, 14);
        let truth = vec![0.5; 36];
        let lik = simulate_measurements(&truth, &s, 0.1, 0.2, 0.01, &mut RngStream::new(3, 3)).unwrap();
        let text = serde_json::to_string(&lik).unwrap();
        let back: ClosureLikelihood = serde_json::from_str(&text).unwrap();
        let x = vec![0.45; 36];
        assert_eq!(back.value(&x).unwrap(), lik.value(&x).unwrap());

        let from_array = r#"{"n_telescopes":4,"grid_shape":[4,4],
            "array":{"positions":[[0,0],[1,0],[0,1],[1,1.5]],"n_times":2,"rotation_step":0.3},
            "beta_cph":0.1,"beta_camp":0.1}"#;
        let sys: ClosureSystem = serde_json::from_str(from_array).unwrap();
        assert_eq!((sys.triangles().len(), sys.quads().len(), sys.n_times()), (3, 2, 2));
    }
}
