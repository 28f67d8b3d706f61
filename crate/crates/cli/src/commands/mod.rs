//! The five driver commands. Each resolves its configuration, fans the
//! sweep out over a worker pool, and commits CSV outputs with a sidecar.

pub mod baseline;
pub mod design;
pub mod potential;
pub mod se;
pub mod simulate;

use anyhow::Error;

use crate::output::{blank, num};

/// Failure classes mapped to exit codes: configuration problems exit 2,
/// anything that breaks mid-computation exits 3.
pub enum CliError {
    Config(Error),
    Numeric(Error),
}

pub fn config_err(e: impl Into<Error>) -> CliError {
    CliError::Config(e.into())
}

pub fn numeric_err(e: impl Into<Error>) -> CliError {
    CliError::Numeric(e.into())
}

/// Per-run quality measures; error rates carry one `(fpr, fnr)` pair per
/// configured threshold and stay empty for tasks without a 0/1 decision.
pub struct RunMetrics {
    pub correlation: f64,
    pub mse: f64,
    pub hamming: f64,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub rates: Vec<(f64, f64)>,
}

/// Mean and sample standard deviation (zero for a single run).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Threshold error rates of a soft estimate against a 0/1 truth, one pair
/// per threshold.
pub fn threshold_rates(truth: &[f64], estimate: &[f64], zetas: &[f64]) -> Vec<(f64, f64)> {
    zetas
        .iter()
        .map(|&z| {
            let flagged: Vec<bool> = estimate.iter().map(|&e| e > z).collect();
            scamp::metrics::fpr_fnr(truth, &flagged)
        })
        .collect()
}

/// Columns every sweep table shares, from `zeta` onward. The caller emits
/// one row per threshold (or a single thresholdless row) per sweep point.
pub const METRIC_COLUMNS: [&str; 13] = [
    "zeta",
    "corr_mean",
    "corr_std",
    "mse_mean",
    "mse_std",
    "hamming_mean",
    "hamming_std",
    "fpr_mean",
    "fpr_std",
    "fnr_mean",
    "fnr_std",
    "iters_mean",
    "converged_runs",
];

/// Aggregates one sweep point over its seeds into metric-column rows.
pub fn metric_rows(runs: &[RunMetrics], zetas: &[f64]) -> Vec<Vec<String>> {
    assert!(!runs.is_empty());
    let collect = |f: &dyn Fn(&RunMetrics) -> f64| -> Vec<f64> { runs.iter().map(f).collect() };
    let (corr_mean, corr_std) = mean_std(&collect(&|r| r.correlation));
    let (mse_mean, mse_std) = mean_std(&collect(&|r| r.mse));
    let (ham_mean, ham_std) = mean_std(&collect(&|r| r.hamming));
    let iters_mean = runs
        .iter()
        .filter_map(|r| r.iterations)
        .map(|i| i as f64)
        .sum::<f64>()
        / runs.len().max(1) as f64;
    let iters_cell = if runs.iter().any(|r| r.iterations.is_some()) {
        num(iters_mean)
    } else {
        blank()
    };
    let converged_cell = if runs.iter().any(|r| r.converged.is_some()) {
        num(runs.iter().filter(|r| r.converged == Some(true)).count() as f64)
    } else {
        blank()
    };

    let shared = vec![
        num(corr_mean),
        num(corr_std),
        num(mse_mean),
        num(mse_std),
        num(ham_mean),
        num(ham_std),
    ];
    let tail = vec![iters_cell, converged_cell];

    let rated = !zetas.is_empty() && runs.iter().all(|r| r.rates.len() == zetas.len());
    if !rated {
        let mut row = vec![blank()];
        row.extend(shared);
        row.extend([blank(), blank(), blank(), blank()]);
        row.extend(tail);
        return vec![row];
    }
    zetas
        .iter()
        .enumerate()
        .map(|(zi, &zeta)| {
            let (fpr_mean, fpr_std) = mean_std(&collect(&|r| r.rates[zi].0));
            let (fnr_mean, fnr_std) = mean_std(&collect(&|r| r.rates[zi].1));
            let mut row = vec![num(zeta)];
            row.extend(shared.clone());
            row.extend([num(fpr_mean), num(fpr_std), num(fnr_mean), num(fnr_std)]);
            row.extend(tail.clone());
            row
        })
        .collect()
}
