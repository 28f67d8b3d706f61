//! Matrix recovery loop for categorical signals, plus the column-wise
//! reduction that runs the scalar loop once per category.

use nalgebra::DMatrix;

use super::{run_sc_amp_qgt, AmpConfig, AmpError, ColumnOutcome, SeParamSource, TraceRow};
use crate::denoise::{CategoricalDenoiser, COVARIANCE_RIDGE};
use crate::design::DesignPair;

/// Relative eigenvalue threshold below which a direction of an estimated
/// covariance counts as unmeasured.
///
/// Noiseless categorical runs have residual rows that sum to zero exactly,
/// so the per-block covariance estimates are singular along the all-ones
/// direction. Keeping such a direction in play through a plain ridge gives
/// it an inverse weight near `1/ridge`; the rounding noise that amplifies
/// feeds back through the memory term with enough gain to destabilize the
/// loop within a few iterations. Directions this far below the top
/// eigenvalue are instead dropped from the whitening (zero weight) and
/// neutralized in the channel covariance handed to the denoiser, which is
/// exactly the limit of the algorithm as the true variance in such a
/// direction goes to zero: the information they carry does not discriminate
/// between categories. Genuine noise levels sit many orders of magnitude
/// above this threshold.
pub const UNMEASURED_DIRECTION_REL: f64 = 1e-10;


/// Eigendecomposition of a symmetric PSD estimate with the near-null
/// subspace flagged.
struct SpectralSplit {
    vectors: DMatrix<f64>,
    values: Vec<f64>,
    measured: Vec<bool>,
}

impl SpectralSplit {
    fn of(mat: &DMatrix<f64>, label: usize) -> Result<Self, AmpError> {
        let l = mat.nrows();
        let sym = DMatrix::from_fn(l, l, |a, t| 0.5 * (mat[(a, t)] + mat[(t, a)]));
        if sym.iter().any(|x| !x.is_finite()) {
            return Err(AmpError::BlockNotPositiveDefinite { r: label });
        }
        let eigen = sym.symmetric_eigen();
        let top = eigen.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x));
        let cut = top * UNMEASURED_DIRECTION_REL;
        if eigen.eigenvalues.iter().any(|&x| x < -cut - COVARIANCE_RIDGE) {
            return Err(AmpError::BlockNotPositiveDefinite { r: label });
        }
        let values: Vec<f64> = eigen.eigenvalues.iter().copied().collect();
        let measured = values.iter().map(|&x| x > cut && x > 0.0).collect();
        Ok(SpectralSplit { vectors: eigen.eigenvectors, values, measured })
    }

    fn rebuild(&self, weight: impl Fn(usize) -> f64) -> DMatrix<f64> {
        let l = self.values.len();
        let mut out = DMatrix::zeros(l, l);
        for i in 0..l {
            let w = weight(i);
            if w == 0.0 {
                continue;
            }
            let v = self.vectors.column(i);
            for a in 0..l {
                for t in 0..l {
                    out[(a, t)] += w * v[a] * v[t];
                }
            }
        }
        out
    }

    /// Inverse over the measured subspace, zero on unmeasured directions.
    fn pseudo_inverse(&self) -> DMatrix<f64> {
        self.rebuild(|i| if self.measured[i] { 1.0 / self.values[i] } else { 0.0 })
    }

    /// Inverse with unmeasured directions padded to the largest measured
    /// variance (or unit when nothing is measured). Estimates and targets
    /// both have unit row sums, so the effective observation has no
    /// component along a dropped direction and the padding only adds a
    /// category-independent constant to the posterior log-weights; its
    /// value is free, and matching the measured scale keeps the
    /// factorization inside the denoiser well conditioned.
    fn padded_inverse(&self) -> DMatrix<f64> {
        let mut pad = (0..self.values.len())
            .filter(|&i| self.measured[i])
            .map(|i| 1.0 / self.values[i])
            .fold(0.0f64, f64::max);
        if pad == 0.0 {
            pad = 1.0;
        }
        self.rebuild(|i| if self.measured[i] { 1.0 / self.values[i] } else { pad })
    }
}

/// Iterate snapshot of the matrix loop. Per-block matrices are stored once
/// per block; `q_blocks[r]` is aligned with `band_cols_of_row(r)`.
#[derive(Debug, Clone)]
pub struct MatrixAmpState {
    pub k: usize,
    /// Posterior-mean estimate, rows on the probability simplex.
    pub b_hat: DMatrix<f64>,
    /// Effective observation rows the final denoiser call saw.
    pub b_eff: DMatrix<f64>,
    pub theta_tilde: DMatrix<f64>,
    pub prev_theta_tilde: DMatrix<f64>,
    /// Per-row-block residual covariance estimates, length `R`.
    pub phi_hat: Vec<DMatrix<f64>>,
    /// Per-column-block channel covariances over the measured subspace,
    /// length `C`; directions the residuals do not excite appear with zero
    /// variance.
    pub tau: Vec<DMatrix<f64>>,
    /// Per-(row, band column) weight matrices.
    pub q_blocks: Vec<Vec<DMatrix<f64>>>,
    /// Block-averaged denoiser Jacobians, length `C`.
    pub avg_jac: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct MatrixAmpRun {
    pub state: MatrixAmpState,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

/// Runs the matrix loop on rescaled observation rows. `noise_cov` is
/// accepted for interface symmetry with the scalar loop's variance
/// argument; the online estimator works entirely from the iterates and
/// does not consult it.
pub fn run_matrix_sc_amp(
    design: &DesignPair,
    yt: &DMatrix<f64>,
    pi: &[f64],
    noise_cov: &DMatrix<f64>,
    config: &AmpConfig,
    truth: Option<&[usize]>,
) -> Result<MatrixAmpRun, AmpError> {
    config.validate();
    if config.se_params == SeParamSource::Precomputed {
        return Err(AmpError::PrecomputedUnsupported);
    }
    let (n, p) = (design.n(), design.p());
    let l = pi.len();
    if yt.nrows() != n {
        return Err(AmpError::LengthMismatch { want: n, got: yt.nrows() });
    }
    if yt.ncols() != l || noise_cov.nrows() != l || noise_cov.ncols() != l {
        return Err(AmpError::WidthMismatch { want: l, got: yt.ncols() });
    }
    if let Some(t) = truth {
        assert_eq!(t.len(), p, "truth length must match the item count");
        assert!(t.iter().all(|&c| c < l), "category out of range");
    }
    let den = CategoricalDenoiser::new(pi.to_vec())?;
    let base = design.base();
    let (r_blocks, c_blocks) = (base.rows(), base.cols());
    let rows_per = design.rows_per_block();
    let cols_per = design.cols_per_block();
    let delta_in = design.delta_inner();
    let profile = base.profile_value();

    // Flat row-major working copies.
    let ytf: Vec<f64> = (0..n).flat_map(|i| (0..l).map(move |t| yt[(i, t)])).collect();
    let mut b_hat: Vec<f64> = (0..p).flat_map(|_| pi.iter().copied()).collect();
    let mut theta: Vec<f64> = {
        let xb = design.xt_times_mat(&b_hat, l);
        ytf.iter().zip(&xb).map(|(y, v)| y - v).collect()
    };
    let mut prev_theta = vec![0.0; n * l];
    let mut b_eff = vec![0.0; p * l];
    let mut phi_hat: Vec<DMatrix<f64>> = vec![DMatrix::zeros(l, l); r_blocks];
    let mut inv_phi: Vec<DMatrix<f64>> = vec![DMatrix::zeros(l, l); r_blocks];
    let mut tau: Vec<DMatrix<f64>> = vec![DMatrix::zeros(l, l); c_blocks];
    let mut tau_channel: Vec<DMatrix<f64>> = vec![DMatrix::zeros(l, l); c_blocks];
    let mut q_blocks: Vec<Vec<DMatrix<f64>>> = (0..r_blocks)
        .map(|r| base.band_cols_of_row(r).map(|_| DMatrix::zeros(l, l)).collect())
        .collect();
    let mut avg_jac: Vec<DMatrix<f64>> = vec![DMatrix::zeros(l, l); c_blocks];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let scale = r_blocks as f64 / n as f64;

    for k in 0..config.max_iters {
        if k > 0 {
            // Memory matrices fold the freshly recorded Jacobians with the
            // previous weights; theta still holds the previous residual.
            let memory: Vec<DMatrix<f64>> = (0..r_blocks)
                .map(|r| {
                    let mut m = DMatrix::zeros(l, l);
                    for (idx, c) in base.band_cols_of_row(r).enumerate() {
                        m += &q_blocks[r][idx] * avg_jac[c].transpose();
                    }
                    m * (profile / delta_in)
                })
                .collect();
            let xb = design.xt_times_mat(&b_hat, l);
            for i in 0..n {
                let r = i / rows_per;
                let row = i * l..(i + 1) * l;
                let mut u = vec![0.0; l];
                for a in 0..l {
                    let mut acc = 0.0;
                    for t in 0..l {
                        acc += memory[r][(a, t)] * theta[i * l + t];
                    }
                    u[a] = acc;
                }
                for (t, idx) in row.enumerate() {
                    prev_theta[idx] = theta[idx];
                    theta[idx] = ytf[idx] - xb[idx] + u[t];
                }
            }
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(AmpError::Diverged { iteration: k });
        }

        for r in 0..r_blocks {
            let mut acc = DMatrix::zeros(l, l);
            for i in (r * rows_per)..((r + 1) * rows_per) {
                let row = &theta[i * l..(i + 1) * l];
                for a in 0..l {
                    for t in 0..l {
                        acc[(a, t)] += row[a] * row[t];
                    }
                }
            }
            phi_hat[r] = acc * scale;
            inv_phi[r] = SpectralSplit::of(&phi_hat[r], r)?.pseudo_inverse();
        }
        for c in 0..c_blocks {
            let mut acc = DMatrix::zeros(l, l);
            for r in base.band_rows_of_col(c) {
                acc += &inv_phi[r];
            }
            acc *= profile;
            let split = SpectralSplit::of(&acc, c)?;
            tau[c] = split.pseudo_inverse();
            tau_channel[c] = split.padded_inverse();
        }
        for r in 0..r_blocks {
            for (idx, c) in base.band_cols_of_row(r).enumerate() {
                q_blocks[r][idx] = &inv_phi[r] * &tau[c];
            }
        }

        // Effective observation: per-row whitened residuals pushed back
        // through the design, then scaled by the block channel covariance.
        let mut z = vec![0.0; n * l];
        for i in 0..n {
            let r = i / rows_per;
            for a in 0..l {
                let mut acc = 0.0;
                for t in 0..l {
                    acc += inv_phi[r][(a, t)] * theta[i * l + t];
                }
                z[i * l + a] = acc;
            }
        }
        let mut w = vec![0.0; p * l];
        let mut col = vec![0.0; n];
        for t in 0..l {
            for i in 0..n {
                col[i] = z[i * l + t];
            }
            for (j, v) in design.xt_transpose_times(&col).into_iter().enumerate() {
                w[j * l + t] = v;
            }
        }
        for j in 0..p {
            let c = j / cols_per;
            for a in 0..l {
                let mut acc = 0.0;
                for t in 0..l {
                    acc += tau[c][(a, t)] * w[j * l + t];
                }
                b_eff[j * l + a] = acc + b_hat[j * l + a];
            }
        }
        if b_eff.iter().any(|x| !x.is_finite()) {
            return Err(AmpError::Diverged { iteration: k });
        }

        let mut change_sq = 0.0;
        let mut s_row = vec![0.0; l];
        for c in 0..c_blocks {
            let channel = den.channel(&tau_channel[c])?;
            let mut jac_sum = DMatrix::zeros(l, l);
            for j in (c * cols_per)..((c + 1) * cols_per) {
                s_row.copy_from_slice(&b_eff[j * l..(j + 1) * l]);
                let (mean, jac) = channel.mean_and_jacobian(&s_row);
                jac_sum += jac;
                for a in 0..l {
                    let new = if config.damping < 1.0 {
                        config.damping * mean[a] + (1.0 - config.damping) * b_hat[j * l + a]
                    } else {
                        mean[a]
                    };
                    let d = new - b_hat[j * l + a];
                    change_sq += d * d;
                    b_hat[j * l + a] = new;
                }
            }
            avg_jac[c] = jac_sum / cols_per as f64;
        }
        iterations = k + 1;

        if config.record_trace {
            let per_block: Vec<f64> = tau.iter().map(|t| t.trace()).collect();
            let (mse, correlation) = match truth {
                Some(cats) => {
                    let mut sq = 0.0;
                    let mut overlap = 0.0;
                    for (j, &cat) in cats.iter().enumerate() {
                        for a in 0..l {
                            let t = (a == cat) as u8 as f64;
                            let d = b_hat[j * l + a] - t;
                            sq += d * d;
                        }
                        overlap += b_hat[j * l + cat];
                    }
                    (Some(sq / p as f64), Some(overlap / p as f64))
                }
                None => (None, None),
            };
            trace.push(TraceRow { k: iterations, per_block, mse, correlation });
        }
        if (change_sq / p as f64).sqrt() < config.tol {
            converged = true;
            break;
        }
    }

    let state = MatrixAmpState {
        k: iterations,
        b_hat: DMatrix::from_row_slice(p, l, &b_hat),
        b_eff: DMatrix::from_row_slice(p, l, &b_eff),
        theta_tilde: DMatrix::from_row_slice(n, l, &theta),
        prev_theta_tilde: DMatrix::from_row_slice(n, l, &prev_theta),
        phi_hat,
        tau,
        q_blocks,
        avg_jac,
    };
    Ok(MatrixAmpRun { state, converged, iterations, trace })
}

#[derive(Debug, Clone)]
pub struct ColumnwiseAmpRun {
    /// Stacked per-column estimates; a diverged column is left at its
    /// initialization.
    pub estimate: DMatrix<f64>,
    pub outcomes: Vec<ColumnOutcome>,
}

/// Runs the scalar loop once per category, column `t` with inclusion
/// probability `pi[t]`, and stacks the estimates. Per-column divergence is
/// reported in the outcome list rather than aborting the other columns.
pub fn run_columnwise_sc_amp(
    design: &DesignPair,
    yt: &DMatrix<f64>,
    pi: &[f64],
    sigma2_per_col: &[f64],
    config: &AmpConfig,
) -> Result<ColumnwiseAmpRun, AmpError> {
    config.validate();
    let (n, p) = (design.n(), design.p());
    let l = pi.len();
    if yt.nrows() != n {
        return Err(AmpError::LengthMismatch { want: n, got: yt.nrows() });
    }
    if yt.ncols() != l || sigma2_per_col.len() != l {
        return Err(AmpError::WidthMismatch { want: l, got: yt.ncols() });
    }
    let mut estimate = DMatrix::zeros(p, l);
    let mut outcomes = Vec::with_capacity(l);
    for t in 0..l {
        let col: Vec<f64> = yt.column(t).iter().copied().collect();
        match run_sc_amp_qgt(design, &col, pi[t], sigma2_per_col[t], config, None) {
            Ok(run) => {
                for j in 0..p {
                    estimate[(j, t)] = run.state.beta_hat[j];
                }
                outcomes.push(if run.converged {
                    ColumnOutcome::Converged { iterations: run.iterations }
                } else {
                    ColumnOutcome::ReachedMaxIters
                });
            }
            Err(AmpError::Diverged { iteration }) => {
                for j in 0..p {
                    estimate[(j, t)] = pi[t];
                }
                outcomes.push(ColumnOutcome::Diverged { iteration });
            }
            Err(other) => return Err(other),
        }
    }
    Ok(ColumnwiseAmpRun { estimate, outcomes })
}
