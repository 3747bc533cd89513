//! Turning sample batches into numbers: mixture fits, grid divergences,
//! the conjugate oracle and per-pixel statistics.

mod conjugate;
mod em;
mod grid;
mod stats;

pub use conjugate::conjugate_posterior;
pub use em::{em_fit_gmm, EmFit, EmOptions};
pub use grid::{grid_divergences, grid_fi, grid_kl, Grid2D, GridMetrics, GridPosterior, GridValue};
pub use stats::{classify_modes, gaussian_nll, mean_sd, psnr_db, sample_stats, ModeAssignment, ModeSummary, PixelStats};
