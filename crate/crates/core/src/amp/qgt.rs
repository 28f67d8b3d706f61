//! The scalar recovery loop for 0/1 signals on rescaled observations.

use super::{AmpConfig, AmpError, SeParamSource, TraceRow};
use crate::denoise::BernoulliDenoiser;
use crate::design::DesignPair;
use crate::metrics;
use crate::state_evolution::{iterate_scalar_se, ScalarSeConfig};

// Keeps the per-block weights finite when a residual block underflows to
// exactly zero at convergence on noiseless instances.
const MEAN_SQUARE_FLOOR: f64 = 1e-300;

/// Iterate snapshot. The per-block parameters are stored one value per
/// block (they are constant within blocks by construction); expand with
/// the design's block maps when per-entry vectors are needed.
#[derive(Debug, Clone)]
pub struct AmpState {
    pub k: usize,
    /// Posterior-mean estimate, in `[0,1]^p`.
    pub beta_hat: Vec<f64>,
    /// Effective observation the final denoiser call saw.
    pub beta_eff: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub prev_theta_tilde: Vec<f64>,
    /// Per-column-block signal strength, length `C`.
    pub chi_hat: Vec<f64>,
    /// Per-row-block residual weights, length `R`.
    pub q_rows: Vec<f64>,
    /// Per-row-block memory coefficients, length `R`.
    pub b_rows: Vec<f64>,
    /// Per-column-block estimate coefficients (negated strengths), length `C`.
    pub c_cols: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AmpRun {
    pub state: AmpState,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    /// Soft diagnostic: iterations past the fifth where some block's
    /// residual mean square grew.
    pub residual_increases: usize,
}

struct ParamSchedule {
    phi: Vec<Vec<f64>>,
    chi2: Vec<Vec<f64>>,
}

/// Runs the loop on a rescaled observation vector. `sigma2` (the rescaled
/// noise variance) is consulted only when the configuration replays the
/// deterministic recursion; the online mode estimates everything from the
/// iterates.
pub fn run_sc_amp_qgt(
    design: &DesignPair,
    yt: &[f64],
    pi: f64,
    sigma2: f64,
    config: &AmpConfig,
    truth: Option<&[f64]>,
) -> Result<AmpRun, AmpError> {
    config.validate();
    let (n, p) = (design.n(), design.p());
    if yt.len() != n {
        return Err(AmpError::LengthMismatch { want: n, got: yt.len() });
    }
    if let Some(t) = truth {
        assert_eq!(t.len(), p, "truth length must match the item count");
    }
    let den = BernoulliDenoiser::new(pi)?;
    let base = design.base();
    let (r_blocks, c_blocks) = (base.rows(), base.cols());
    let rows_per = design.rows_per_block();
    let cols_per = design.cols_per_block();
    let delta_in = design.delta_inner();

    let schedule = match config.se_params {
        SeParamSource::Online => None,
        SeParamSource::Precomputed => {
            let se_config = ScalarSeConfig { k_max: config.max_iters, tol: 1e-12 };
            let run = iterate_scalar_se(base, design.delta(), pi, sigma2, &se_config)?;
            let mut phi = vec![run.init_phi.clone()];
            phi.extend(run.states.iter().map(|s| s.phi.clone()));
            let chi2 = run.states.iter().map(|s| s.chi2.clone()).collect();
            Some(ParamSchedule { phi, chi2 })
        }
    };

    let mut beta_hat = vec![pi; p];
    let mut theta: Vec<f64> = {
        let xb = design.xt_times(&beta_hat);
        yt.iter().zip(&xb).map(|(y, v)| y - v).collect()
    };
    let mut prev_theta = vec![0.0; n];
    let mut q_rows = vec![0.0; r_blocks];
    let mut chi_hat = vec![0.0; c_blocks];
    let mut b_rows = vec![0.0; r_blocks];
    let mut deriv_avg = vec![0.0; c_blocks];
    let mut beta_eff = vec![0.0; p];
    let mut msq = vec![0.0; r_blocks];
    let mut prev_msq = vec![f64::INFINITY; r_blocks];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut residual_increases = 0;

    for k in 0..config.max_iters {
        if k > 0 {
            // Memory term folds the previous denoiser derivatives into the
            // residual; q_rows still holds the previous iteration's weights
            // here.
            for (r, b) in base.profile_fold_cols(&deriv_avg).into_iter().enumerate() {
                b_rows[r] = b / delta_in;
            }
            let xb = design.xt_times(&beta_hat);
            for i in 0..n {
                let r = i / rows_per;
                let memory = b_rows[r] * q_rows[r] * theta[i];
                prev_theta[i] = theta[i];
                theta[i] = yt[i] - xb[i] + memory;
            }
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(AmpError::Diverged { iteration: k });
        }
        if k >= 5 {
            if msq.iter().zip(&prev_msq).any(|(a, b)| a > b) {
                residual_increases += 1;
            }
            prev_msq.copy_from_slice(&msq);
        }

        match &schedule {
            None => {
                for r in 0..r_blocks {
                    let block = &theta[r * rows_per..(r + 1) * rows_per];
                    let sum_sq: f64 = block.iter().map(|x| x * x).sum();
                    msq[r] = (sum_sq * r_blocks as f64 / n as f64).max(MEAN_SQUARE_FLOOR);
                    q_rows[r] = 1.0 / msq[r];
                }
                let inv: Vec<f64> = msq.iter().map(|&m| 1.0 / m).collect();
                chi_hat = base.profile_fold_rows(&inv);
            }
            Some(s) => {
                let idx = k.min(s.phi.len() - 1);
                for r in 0..r_blocks {
                    msq[r] = s.phi[idx][r].max(MEAN_SQUARE_FLOOR);
                    q_rows[r] = 1.0 / msq[r];
                }
                let cidx = k.min(s.chi2.len() - 1);
                chi_hat = s.chi2[cidx].clone();
            }
        }

        let weighted: Vec<f64> =
            theta.iter().enumerate().map(|(i, t)| t * q_rows[i / rows_per]).collect();
        let back = design.xt_transpose_times(&weighted);
        for j in 0..p {
            beta_eff[j] = back[j] + chi_hat[j / cols_per] * beta_hat[j];
        }
        if beta_eff.iter().any(|x| !x.is_finite()) {
            return Err(AmpError::Diverged { iteration: k });
        }

        deriv_avg.iter_mut().for_each(|d| *d = 0.0);
        let mut change_sq = 0.0;
        for j in 0..p {
            let c = j / cols_per;
            let (mean, deriv) = den.mean_and_deriv(beta_eff[j], chi_hat[c]);
            deriv_avg[c] += deriv;
            let new = if config.damping < 1.0 {
                config.damping * mean + (1.0 - config.damping) * beta_hat[j]
            } else {
                mean
            };
            let d = new - beta_hat[j];
            change_sq += d * d;
            beta_hat[j] = new;
        }
        deriv_avg.iter_mut().for_each(|d| *d /= cols_per as f64);
        iterations = k + 1;

        if config.record_trace {
            trace.push(TraceRow {
                k: iterations,
                per_block: chi_hat.clone(),
                mse: truth.map(|t| metrics::mse(t, &beta_hat)),
                correlation: truth.map(|t| metrics::normalized_sq_correlation(t, &beta_hat)),
            });
        }
        if (change_sq / p as f64).sqrt() < config.tol {
            converged = true;
            break;
        }
    }

    let c_cols: Vec<f64> = chi_hat.iter().map(|&x| -x).collect();
    Ok(AmpRun {
        state: AmpState {
            k: iterations,
            beta_hat,
            beta_eff,
            theta_tilde: theta,
            prev_theta_tilde: prev_theta,
            chi_hat,
            q_rows,
            b_rows,
            c_cols,
        },
        converged,
        iterations,
        trace,
        residual_increases,
    })
}
