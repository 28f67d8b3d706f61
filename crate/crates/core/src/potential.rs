//! Scalar potential whose stationary points characterize the fixed points
//! of the uncoupled recursion, and whose global minimizer the coupled
//! recursion tracks.
//!
//! Everything here is computed from the mixture entropy by direct
//! quadrature and finite differences. In particular the stationary points
//! are located without ever evaluating the minimum-error function used by
//! the recursion itself, so agreement between the two modules is a real
//! consistency check rather than a tautology.

use std::f64::consts::PI;

use thiserror::Error;

use crate::quad::{GaussLegendre, KahanSum};

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("aspect ratio delta must be positive and finite, got {0}")]
    BadDelta(f64),
    #[error("inclusion probability must lie in [0, 1], got {0}")]
    BadPrior(f64),
    #[error("noise variance must be positive and finite, got {0}")]
    BadNoise(f64),
}

fn rule() -> GaussLegendre {
    GaussLegendre::new(20)
}

/// Mutual information (nats) between a `{0,1}` variable with inclusion
/// probability `pi` and its observation through `sqrt(snr) * truth + G`.
///
/// Computed as the mixture entropy minus the Gaussian entropy, integrating
/// `-p ln p` over half-unit panels covering both mixture components. The
/// far component is integrated in shifted coordinates so huge separations
/// lose no precision.
pub fn mutual_info_bernoulli(pi: f64, snr: f64) -> f64 {
    assert!((0.0..=1.0).contains(&pi), "inclusion probability {pi}");
    assert!(snr >= 0.0, "signal-to-noise ratio {snr}");
    if pi == 0.0 || pi == 1.0 || snr == 0.0 {
        return 0.0;
    }
    let mu = snr.sqrt();
    const T: f64 = 15.0;
    let ln_on = pi.ln();
    let ln_off = (1.0 - pi).ln();
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    // -p(y) ln p(y), with `shift` the offset of the integration variable
    // from zero, so y = u + shift is never formed explicitly.
    let neg_p_ln_p = move |u: f64, shift: f64| -> f64 {
        // (u + shift)^2 expanded to avoid cancellation when shift is huge.
        let y_sq = u * u + 2.0 * u * shift + shift * shift;
        let d = u + (shift - mu);
        let d_sq = if shift == 0.0 {
            (u - mu) * (u - mu)
        } else {
            // shift = mu: distance to the far component is just u.
            d * d
        };
        let a_off = ln_off - 0.5 * y_sq;
        let a_on = ln_on - 0.5 * d_sq;
        let m = a_off.max(a_on);
        if m == f64::NEG_INFINITY {
            return 0.0;
        }
        let ln_p = m + ((a_off - m).exp() + (a_on - m).exp()).ln() - half_ln_2pi;
        -ln_p.exp() * ln_p
    };
    let gl = rule();
    let entropy = if mu < 2.0 * T {
        let len = mu + 2.0 * T;
        gl.integrate_panels(-T, mu + T, (2.0 * len).ceil() as usize, |y| neg_p_ln_p(y, 0.0))
    } else {
        let near =
            gl.integrate_panels(-T, T, (4.0 * T).ceil() as usize, |y| neg_p_ln_p(y, 0.0));
        let far =
            gl.integrate_panels(-T, T, (4.0 * T).ceil() as usize, |u| neg_p_ln_p(u, mu));
        near + far
    };
    let gaussian_entropy = half_ln_2pi + 0.5;
    (entropy - gaussian_entropy).max(0.0)
}

fn validate(delta: f64, pi: f64, sigma2: f64) -> Result<(), PotentialError> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(PotentialError::BadDelta(delta));
    }
    if !(0.0..=1.0).contains(&pi) {
        return Err(PotentialError::BadPrior(pi));
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(PotentialError::BadNoise(sigma2));
    }
    Ok(())
}

/// The potential at candidate error level `b` (in `[0, Var]`).
///
/// Strictly positive noise is required; pass a tiny variance (e.g. 1e-60)
/// to study the noiseless limit.
pub fn potential(delta: f64, pi: f64, sigma2: f64, b: f64) -> Result<f64, PotentialError> {
    validate(delta, pi, sigma2)?;
    assert!(b >= 0.0, "error level {b}");
    let t = b / delta + sigma2;
    let snr = 1.0 / t;
    Ok(-delta * (1.0 - sigma2 / t)
        + delta * (b / (delta * sigma2)).ln_1p()
        + 2.0 * mutual_info_bernoulli(pi, snr))
}

/// Result of a full sweep of the potential over `[0, Var]`.
#[derive(Debug, Clone)]
pub struct PotentialScan {
    pub delta: f64,
    pub pi: f64,
    pub sigma2: f64,
    /// Global minimizer over `[0, Var]`; exact 0.0 when the left edge wins.
    pub argmin: f64,
    pub min_value: f64,
    /// Interior stationary points, ascending.
    pub stationary: Vec<f64>,
}

impl PotentialScan {
    pub fn largest_stationary(&self) -> Option<f64> {
        self.stationary.last().copied()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScanConfig {
    /// Linear grid resolution over `[0, Var]`.
    pub grid_points: usize,
    /// Geometric points per decade appended below the linear resolution,
    /// down to `Var * 1e-13`; resolves structure that noiseless-limit
    /// potentials develop near zero.
    pub log_points_per_decade: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self { grid_points: 500, log_points_per_decade: 40 }
    }
}

/// Sweeps the potential, locating the global minimizer (golden-section
/// refined) and all interior stationary points (finite-difference sign
/// changes sharpened by bisection).
pub fn scan_potential(
    delta: f64,
    pi: f64,
    sigma2: f64,
    config: &ScanConfig,
) -> Result<PotentialScan, PotentialError> {
    validate(delta, pi, sigma2)?;
    let var = pi * (1.0 - pi);
    let u = |b: f64| potential(delta, pi, sigma2, b).expect("validated");
    if var == 0.0 {
        return Ok(PotentialScan {
            delta,
            pi,
            sigma2,
            argmin: 0.0,
            min_value: u(0.0),
            stationary: Vec::new(),
        });
    }

    let mut grid: Vec<f64> = (0..=config.grid_points)
        .map(|i| var * i as f64 / config.grid_points as f64)
        .collect();
    let decades = 13 * config.log_points_per_decade;
    grid.extend((0..decades).map(|i| var * 10f64.powf(-13.0 + i as f64 / config.log_points_per_decade as f64)));
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() < var * 1e-15);

    let values: Vec<f64> = grid.iter().map(|&b| u(b)).collect();

    // Global minimum on the grid; near-ties resolve toward the larger
    // error level so machine-precision plateaus report their right edge.
    let mut best = 0usize;
    for i in 1..grid.len() {
        if values[i] <= values[best] + 1e-12 {
            best = i;
        }
    }
    let lo = if best == 0 { grid[0] } else { grid[best - 1] };
    let hi = if best + 1 == grid.len() { grid[best] } else { grid[best + 1] };
    let refined = golden_section(&u, lo, hi, 1e-10 * var.max(1e-3));
    // The bracket edges stay candidates: the section search cannot land on
    // a boundary minimum exactly.
    let mut argmin = refined;
    let mut min_value = u(refined);
    for cand in [lo, hi, grid[best]] {
        let v = u(cand);
        if v < min_value - 1e-12 || (v <= min_value + 1e-12 && cand > argmin) {
            argmin = cand;
            min_value = v;
        }
    }

    // Central finite-difference derivative with a step that never crosses
    // zero; evaluation noise stays far below the derivative scale wherever
    // stationary points occur.
    let step = |b: f64| (1e-6 * var).min(0.5 * b);
    let deriv = |b: f64| {
        let h = step(b);
        (u(b + h) - u(b - h)) / (2.0 * h)
    };
    let mut stationary = Vec::new();
    let interior: Vec<f64> = grid
        .iter()
        .copied()
        .filter(|&b| b > 0.0 && b < var)
        .collect();
    let derivs: Vec<f64> = interior.iter().map(|&b| deriv(b)).collect();
    for i in 0..interior.len().saturating_sub(1) {
        if derivs[i] == 0.0 {
            stationary.push(interior[i]);
            continue;
        }
        if derivs[i].signum() * derivs[i + 1].signum() < 0.0 {
            let (mut a, mut b) = (interior[i], interior[i + 1]);
            let mut da = derivs[i];
            for _ in 0..80 {
                if b - a < 1e-12 * var.max(1e-3) {
                    break;
                }
                let mid = 0.5 * (a + b);
                let dm = deriv(mid);
                if dm == 0.0 {
                    a = mid;
                    b = mid;
                    break;
                }
                if da.signum() * dm.signum() < 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    da = dm;
                }
            }
            stationary.push(0.5 * (a + b));
        }
    }
    stationary.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * var);

    Ok(PotentialScan { delta, pi, sigma2, argmin, min_value, stationary })
}

fn golden_section(u: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = u(x1);
    let mut f2 = u(x2);
    while hi - lo > tol {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = u(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = u(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Average of the potential minimum over a uniform grid of error levels; a
/// smoke helper for plotting sweeps from the driver.
pub fn potential_profile(
    delta: f64,
    pi: f64,
    sigma2: f64,
    points: usize,
) -> Result<Vec<(f64, f64)>, PotentialError> {
    validate(delta, pi, sigma2)?;
    let var = pi * (1.0 - pi);
    let mut out = Vec::with_capacity(points + 1);
    let mut total = KahanSum::new();
    for i in 0..=points {
        let b = var * i as f64 / points.max(1) as f64;
        let v = potential(delta, pi, sigma2, b)?;
        total.add(v);
        out.push((b, v));
    }
    let _ = total;
    Ok(out)
}
