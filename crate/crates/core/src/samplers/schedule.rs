use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponential annealing of the smoothing level and prior weight:
/// `σ_k = max(σ₀ξ^k, σ_min)` and `α_k = max(α₀σ_k², 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleDocument", into = "ScheduleDocument")]
pub struct AnnealingSchedule {
    sigma0: f64,
    xi: f64,
    sigma_min: f64,
    alpha0: f64,
}

// α₀σ_min² is allowed this far above 1 so that α₀ = 1/σ_min² survives
// floating-point rounding.
const FLOOR_TOL: f64 = 1e-12;

impl AnnealingSchedule {
    pub fn new(sigma0: f64, xi: f64, sigma_min: f64, alpha0: f64) -> Result<Self> {
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(Error::invalid(format!("sigma0 must be positive, got {sigma0}")));
        }
        if !(xi > 0.0 && xi < 1.0) {
            return Err(Error::invalid(format!("xi must lie in (0, 1), got {xi}")));
        }
        if !(sigma_min.is_finite() && sigma_min >= 0.0) {
            return Err(Error::invalid(format!("sigma_min must be nonnegative, got {sigma_min}")));
        }
        if !(alpha0.is_finite() && alpha0 > 0.0) {
            return Err(Error::invalid(format!("alpha0 must be positive, got {alpha0}")));
        }
        if sigma_min > 0.0 && alpha0 * sigma_min * sigma_min > 1.0 + FLOOR_TOL {
            return Err(Error::invalid(format!(
                "alpha0 = {alpha0} exceeds 1/sigma_min^2 = {}",
                1.0 / (sigma_min * sigma_min)
            )));
        }
        Ok(Self {
            sigma0,
            xi,
            sigma_min,
            alpha0,
        })
    }

    /// `(σ_k, α_k)` at iteration `k`.
    pub fn at(&self, k: usize) -> (f64, f64) {
        let sigma = (self.sigma0 * self.xi.powf(k as f64)).max(self.sigma_min);
        let a = self.alpha0 * sigma * sigma;
        (sigma, if a <= 1.0 + FLOOR_TOL { 1.0 } else { a })
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }
    pub fn xi(&self) -> f64 {
        self.xi
    }
    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }
    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }
}

#[derive(Serialize, Deserialize)]
struct ScheduleDocument {
    sigma0: f64,
    xi: f64,
    sigma_min: f64,
    alpha0: f64,
}

impl TryFrom<ScheduleDocument> for AnnealingSchedule {
    type Error = Error;
    fn try_from(d: ScheduleDocument) -> Result<Self> {
        Self::new(d.sigma0, d.xi, d.sigma_min, d.alpha0)
    }
}

impl From<AnnealingSchedule> for ScheduleDocument {
    fn from(s: AnnealingSchedule) -> Self {
        ScheduleDocument {
            sigma0: s.sigma0,
            xi: s.xi,
            sigma_min: s.sigma_min,
            alpha0: s.alpha0,
        }
    }
}
