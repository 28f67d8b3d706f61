//! Convex baselines for count-based recovery: a linear program for
//! noiseless observations and a box-constrained quadratic relaxation of the
//! MAP objective for noisy ones. Both operate on the raw binary design and
//! raw counts, not on the rescaled pair the message-passing loop consumes.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use thiserror::Error;

use crate::design::DesignPair;

/// Convergence threshold on the projected-gradient norm of the box
/// quadratic program.
const PROJECTED_GRADIENT_TOL: f64 = 1e-8;

/// Iteration cap for the accelerated projected-gradient loop.
const CVX_MAX_ITERS: usize = 100_000;

/// Interior-point tolerance requested from the linear-program solver; one
/// order tighter than the gap the estimate promises.
const LP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("observation length {got} does not match the {want} design rows")]
    LengthMismatch { want: usize, got: usize },
    #[error("column index {col} outside the {p} items")]
    ColumnOutOfRange { col: usize, p: usize },
    #[error("no vector in the box satisfies the count equations; the system is noisy or inconsistent")]
    Infeasible,
    #[error("linear-program solver stopped without an optimality certificate: {status}")]
    SolverFailed { status: String },
    #[error("noise variance must be positive, got {0}")]
    BadNoiseVariance(f64),
    #[error("prior fraction must lie strictly inside (0,1), got {0}")]
    BadPrior(f64),
}

/// Row-wise sparse view of a binary test matrix: `rows[i]` lists the items
/// pooled by test `i`, strictly below `p`.
pub type BinaryRows = Vec<Vec<u32>>;

/// Extracts the raw binary matrix of a sampled design in the row-wise form
/// the baseline estimators consume.
pub fn design_rows(design: &DesignPair) -> BinaryRows {
    (0..design.n()).map(|i| design.row_ones(i).to_vec()).collect()
}

fn validate_rows(rows: &BinaryRows, p: usize, y: &[f64]) -> Result<(), BaselineError> {
    if y.len() != rows.len() {
        return Err(BaselineError::LengthMismatch { want: rows.len(), got: y.len() });
    }
    for row in rows {
        if let Some(&j) = row.iter().find(|&&j| j as usize >= p) {
            return Err(BaselineError::ColumnOutOfRange { col: j as usize, p });
        }
    }
    Ok(())
}

fn rows_times(rows: &BinaryRows, v: &[f64]) -> Vec<f64> {
    rows.iter()
        .map(|row| row.iter().map(|&j| v[j as usize]).sum())
        .collect()
}

fn rows_transpose_times(rows: &BinaryRows, p: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p];
    for (row, &ui) in rows.iter().zip(u) {
        for &j in row {
            out[j as usize] += ui;
        }
    }
    out
}

/// Minimizes the total defective mass subject to the exact count equations
/// and the unit box: min Σ_j β_j with `X β = y`, `0 ≤ β ≤ 1`. Returns the
/// minimizer clamped onto the box; an inconsistent system (any noise on
/// the counts) reports [`BaselineError::Infeasible`], in which case the
/// quadratic relaxation [`cvx_estimate`] is the right tool.
pub fn lp_estimate(rows: &BinaryRows, p: usize, y: &[f64]) -> Result<Vec<f64>, BaselineError> {
    validate_rows(rows, p, y)?;
    let n = rows.len();

    // Stack the equality system over the two box half-spaces; the solver
    // wants A β + s = b with s in a zero cone for the first n rows and the
    // nonnegative cone for the 2p box rows.
    let nnz: usize = rows.iter().map(|r| r.len()).sum();
    let mut ti = Vec::with_capacity(nnz + 2 * p);
    let mut tj = Vec::with_capacity(nnz + 2 * p);
    let mut tv = Vec::with_capacity(nnz + 2 * p);
    for (i, row) in rows.iter().enumerate() {
        for &j in row {
            ti.push(i);
            tj.push(j as usize);
            tv.push(1.0);
        }
    }
    for j in 0..p {
        ti.push(n + j);
        tj.push(j);
        tv.push(1.0);
        ti.push(n + p + j);
        tj.push(j);
        tv.push(-1.0);
    }
    let a = CscMatrix::new_from_triplets(n + 2 * p, p, ti, tj, tv);
    let mut b = Vec::with_capacity(n + 2 * p);
    b.extend_from_slice(y);
    b.extend(std::iter::repeat(1.0).take(p));
    b.extend(std::iter::repeat(0.0).take(p));
    let objective = vec![1.0; p];
    let quadratic = CscMatrix::zeros((p, p));
    let cones = [SupportedConeT::ZeroConeT(n), SupportedConeT::NonnegativeConeT(2 * p)];
    let settings = DefaultSettings {
        verbose: false,
        tol_gap_abs: LP_TOL,
        tol_gap_rel: LP_TOL,
        tol_feas: LP_TOL,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&quadratic, &objective, &a, &b, &cones, settings)
        .map_err(|e| BaselineError::SolverFailed { status: format!("{e:?}") })?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(BaselineError::Infeasible)
        }
        other => return Err(BaselineError::SolverFailed { status: format!("{other:?}") }),
    }
    Ok(solver.solution.x.iter().map(|x| x.clamp(0.0, 1.0)).collect())
}

/// Result of the box-constrained quadratic relaxation.
#[derive(Debug, Clone)]
pub struct CvxRun {
    /// Final iterate, inside the unit box.
    pub beta: Vec<f64>,
    /// Gradient steps taken.
    pub iterations: usize,
    /// Whether the projected-gradient norm reached the tolerance before
    /// the iteration cap; when false, `beta` is the best iterate found.
    pub converged: bool,
    /// Objective value at the final iterate.
    pub objective: f64,
    /// Objective after every step; nonincreasing by construction.
    pub trace: Vec<f64>,
}

/// Minimizes `‖y − Xβ‖² / (2 noise_var) + ln((1−π)/π) Σ_j β_j` over the
/// unit box by accelerated projected gradient with a fixed `1/L` step,
/// restarting the momentum whenever it would increase the objective. The
/// penalty weight is the prior log-odds against a defective, so π = 1/2
/// reduces the estimate to box-constrained least squares.
pub fn cvx_estimate(
    rows: &BinaryRows,
    p: usize,
    y: &[f64],
    noise_var: f64,
    pi: f64,
) -> Result<CvxRun, BaselineError> {
    validate_rows(rows, p, y)?;
    if !(noise_var > 0.0) || !noise_var.is_finite() {
        return Err(BaselineError::BadNoiseVariance(noise_var));
    }
    if !(pi > 0.0 && pi < 1.0) {
        return Err(BaselineError::BadPrior(pi));
    }
    let penalty = ((1.0 - pi) / pi).ln();
    let objective = |beta: &[f64]| -> f64 {
        let xb = rows_times(rows, beta);
        let fit: f64 = xb.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        fit / (2.0 * noise_var) + penalty * beta.iter().sum::<f64>()
    };
    let gradient = |beta: &[f64]| -> Vec<f64> {
        let xb = rows_times(rows, beta);
        let resid: Vec<f64> = xb.iter().zip(y).map(|(a, b)| a - b).collect();
        let mut g = rows_transpose_times(rows, p, &resid);
        for gj in &mut g {
            *gj = *gj / noise_var + penalty;
        }
        g
    };

    // Largest Gram eigenvalue by power iteration; the all-ones start has
    // positive overlap with the leading eigenvector of a nonnegative
    // matrix, so the iteration cannot stall on an orthogonal component.
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut lmax = 0.0f64;
    for _ in 0..200 {
        let w = rows_transpose_times(rows, p, &rows_times(rows, &v));
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            lmax = 0.0;
            break;
        }
        let next = norm;
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lmax).abs() <= 1e-12 * next {
            lmax = next;
            break;
        }
        lmax = next;
    }
    if lmax == 0.0 {
        // An empty design measures nothing; the penalty alone decides.
        let beta = vec![if penalty > 0.0 { 0.0 } else { 1.0 }; p];
        let obj = objective(&beta);
        return Ok(CvxRun { beta, iterations: 0, converged: true, objective: obj, trace: vec![] });
    }
    let step = noise_var / (lmax * 1.02);

    let project = |b: f64| b.clamp(0.0, 1.0);
    let mut beta = vec![pi; p];
    let mut z = beta.clone();
    let mut t = 1.0f64;
    let mut f_beta = objective(&beta);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for k in 0..CVX_MAX_ITERS {
        let g = gradient(&z);
        let mut cand: Vec<f64> =
            z.iter().zip(&g).map(|(zi, gi)| project(zi - step * gi)).collect();
        let mut f_cand = objective(&cand);
        if f_cand > f_beta {
            // Momentum overshot; fall back to a plain descent step from
            // the last accepted iterate, which cannot increase.
            let g = gradient(&beta);
            cand = beta.iter().zip(&g).map(|(bi, gi)| project(bi - step * gi)).collect();
            f_cand = objective(&cand);
            t = 1.0;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        z = cand.iter().zip(&beta).map(|(c, b)| c + momentum * (c - b)).collect();
        beta = cand;
        f_beta = f_cand;
        t = t_next;
        trace.push(f_beta);
        iterations = k + 1;

        let g = gradient(&beta);
        let pg_norm = beta
            .iter()
            .zip(&g)
            .map(|(bi, gi)| {
                let moved = project(bi - step * gi);
                (bi - moved) * (bi - moved)
            })
            .sum::<f64>()
            .sqrt();
        if pg_norm <= PROJECTED_GRADIENT_TOL {
            converged = true;
            break;
        }
    }
    Ok(CvxRun { beta, iterations, converged, objective: f_beta, trace })
}
