//! Message-passing recovery loops: the scalar loop for 0/1 signals, the
//! matrix loop for categorical signals, and the column-wise reduction of
//! the latter to the former. All three estimate their own effective-noise
//! parameters from the iterates by default, and can replay the
//! deterministic recursion's parameters instead for debugging.

mod pooled;
mod qgt;

pub use pooled::{run_columnwise_sc_amp, run_matrix_sc_amp, ColumnwiseAmpRun, MatrixAmpRun, MatrixAmpState};
pub use qgt::{run_sc_amp_qgt, AmpRun, AmpState};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::denoise::DenoiseError;
use crate::state_evolution::SeError;

#[derive(Debug, Error)]
pub enum AmpError {
    #[error("observation length {got} does not match the design's test count {want}")]
    LengthMismatch { want: usize, got: usize },
    #[error(
        "observation has {got} columns but the prior has {want} categories"
    )]
    WidthMismatch { want: usize, got: usize },
    #[error("iterate became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("estimated test-side covariance at row block {r} is not positive definite")]
    BlockNotPositiveDefinite { r: usize },
    #[error("the matrix loop estimates its parameters online; precomputed parameters are only available for the scalar loop")]
    PrecomputedUnsupported,
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    StateEvolution(#[from] SeError),
}

/// Where the loop takes its per-iteration noise parameters from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeParamSource {
    /// Estimate per-row-block mean squares from the current residual.
    #[default]
    Online,
    /// Replay the deterministic recursion's trajectory (computed internally
    /// from the run's noise variance); scalar loop only.
    Precomputed,
}

#[derive(Debug, Clone, Copy)]
pub struct AmpConfig {
    pub max_iters: usize,
    /// Stop when the estimate moves less than this in root mean square.
    pub tol: f64,
    pub se_params: SeParamSource,
    /// Fraction of each new estimate blended in; 1.0 (the default, and the
    /// only value used by the acceptance runs) disables damping.
    pub damping: f64,
    /// Accepted for configuration completeness; every reduction in this
    /// implementation is fixed-order, so runs are deterministic regardless.
    pub deterministic: bool,
    /// Record a per-iteration trace row (parameters plus optional quality
    /// measures against a supplied truth).
    pub record_trace: bool,
}

impl Default for AmpConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-9,
            se_params: SeParamSource::Online,
            damping: 1.0,
            deterministic: true,
            record_trace: true,
        }
    }
}

impl AmpConfig {
    pub(crate) fn validate(&self) {
        assert!(self.max_iters >= 1, "at least one iteration");
        assert!(self.tol > 0.0, "tolerance must be positive");
        assert!(
            self.damping > 0.0 && self.damping <= 1.0,
            "damping must lie in (0, 1]"
        );
    }
}

/// One recorded iteration: the per-column-block parameter summary (signal
/// strength for the scalar loop, channel-covariance trace for the matrix
/// loop) plus quality measures when the truth was supplied.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub k: usize,
    pub per_block: Vec<f64>,
    pub mse: Option<f64>,
    pub correlation: Option<f64>,
}

/// Outcome of one column of the column-wise loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnOutcome {
    Converged { iterations: usize },
    ReachedMaxIters,
    Diverged { iteration: usize },
}

/// Hard 0/1 decision: 1 exactly when the estimate exceeds one half
/// (strictly, so 0.5 itself maps to 0).
pub fn quantize_threshold_half(estimate: &[f64]) -> Vec<f64> {
    estimate.iter().map(|&x| if x > 0.5 { 1.0 } else { 0.0 }).collect()
}

/// Decided category per row: the index of the row maximum, ties broken
/// toward the lowest index.
pub fn argmax_categories(estimate: &DMatrix<f64>) -> Vec<usize> {
    (0..estimate.nrows())
        .map(|i| {
            let mut best = 0;
            for j in 1..estimate.ncols() {
                if estimate[(i, j)] > estimate[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One-hot matrix with a single 1 at each row's decided category.
pub fn quantize_row_argmax(estimate: &DMatrix<f64>) -> DMatrix<f64> {
    let cats = argmax_categories(estimate);
    let mut out = DMatrix::zeros(estimate.nrows(), estimate.ncols());
    for (i, c) in cats.into_iter().enumerate() {
        out[(i, c)] = 1.0;
    }
    out
}
