//! Convex baselines on the raw counts: the box-constrained linear program
//! and the penalized least-squares solver. Superlinear cost keeps these at
//! a reduced item count, enforced here with a warning.

use anyhow::anyhow;
use rayon::prelude::*;

use scamp::amp::quantize_threshold_half;
use scamp::baselines::{cvx_estimate, design_rows, lp_estimate};
use scamp::design::{DesignKind, DesignPair};
use scamp::metrics;
use scamp::model::{observe_qgt, sample_qgt_signal, NoiseScaling};

use crate::commands::{config_err, metric_rows, numeric_err, threshold_rates, CliError, RunMetrics, METRIC_COLUMNS};
use crate::config::{self, Algorithm, Overrides, Resolved, Task};
use crate::output::{num, Bundle, PointRecord};

pub fn run(overrides: &Overrides) -> Result<(), CliError> {
    let config = config::load(overrides).map_err(config_err)?;
    let mut resolved = config::resolve(config, overrides, "baseline").map_err(config_err)?;
    validate(&resolved).map_err(config_err)?;
    let capped = enforce_cap(&mut resolved);
    let rows = sweep(&resolved).map_err(numeric_err)?;
    write(&resolved, rows, capped).map_err(numeric_err)
}

fn validate(resolved: &Resolved) -> anyhow::Result<()> {
    let config = &resolved.config;
    if config.task != Task::Qgt {
        return Err(anyhow!("baselines solve the count problem; pooled runs are not supported"));
    }
    if !config.algorithm.is_baseline() {
        return Err(anyhow!(
            "algorithm {} runs under the simulate command",
            config.algorithm.label()
        ));
    }
    let pi = config.pi.scalar()?;
    if config.algorithm == Algorithm::Cvx {
        if !(config.sigma2 > 0.0) {
            return Err(anyhow!(
                "the penalized least-squares baseline needs a positive noise variance"
            ));
        }
        if !(pi > 0.0 && pi < 1.0) {
            return Err(anyhow!("inclusion probability {pi} must lie strictly inside (0, 1)"));
        }
    }
    Ok(())
}

/// Shrinks the run to the configured item cap, returning a warning note
/// when it fired.
fn enforce_cap(resolved: &mut Resolved) -> Option<String> {
    if resolved.p <= resolved.config.baseline_p_cap {
        return None;
    }
    let c_blocks = resolved.base.cols();
    let blocks = (resolved.config.baseline_p_cap / c_blocks).max(1);
    let capped = blocks * c_blocks;
    let note = format!(
        "item count {} exceeds the baseline cap {}; running at p={capped}",
        resolved.p, resolved.config.baseline_p_cap
    );
    eprintln!("warning: {note}");
    resolved.p = capped;
    Some(note)
}

struct PointResult {
    delta: f64,
    n: usize,
    runs: Vec<RunMetrics>,
}

fn sweep(resolved: &Resolved) -> anyhow::Result<Vec<PointResult>> {
    let config = &resolved.config;
    let points: Vec<(f64, usize)> =
        config.delta_grid.iter().map(|&d| (d, resolved.tests_for(d))).collect();
    points
        .into_par_iter()
        .map(|(delta, n)| {
            let runs = config
                .seeds
                .par_iter()
                .map(|&seed| run_one(resolved, n, seed))
                .collect::<anyhow::Result<Vec<RunMetrics>>>()?;
            Ok(PointResult { delta, n, runs })
        })
        .collect()
}

fn run_one(resolved: &Resolved, n: usize, seed: u64) -> anyhow::Result<RunMetrics> {
    let config = &resolved.config;
    let pi = config.pi.scalar().expect("validated");
    let design = DesignPair::sample(&resolved.base, n, resolved.p, seed, DesignKind::Coupled)?;
    let beta = sample_qgt_signal(resolved.p, pi, seed)?;
    let instance = observe_qgt(
        &design,
        pi,
        beta.clone(),
        config.sigma2,
        NoiseScaling::RescaledVariance,
        seed,
    )?;
    let rows = design_rows(&design);
    let (estimate, iterations, converged) = match config.algorithm {
        Algorithm::Lp => (lp_estimate(&rows, resolved.p, &instance.y)?, None, None),
        Algorithm::Cvx => {
            let run = cvx_estimate(&rows, resolved.p, &instance.y, instance.raw_noise_var, pi)?;
            (run.beta, Some(run.iterations), Some(run.converged))
        }
        _ => unreachable!("validated"),
    };
    Ok(RunMetrics {
        correlation: metrics::normalized_sq_correlation(&beta, &estimate),
        mse: metrics::mse(&beta, &estimate),
        hamming: metrics::hamming_rate(&beta, &quantize_threshold_half(&estimate)),
        iterations,
        converged,
        rates: threshold_rates(&beta, &estimate, &config.zeta_grid),
    })
}

fn write(
    resolved: &Resolved,
    points: Vec<PointResult>,
    capped: Option<String>,
) -> anyhow::Result<()> {
    let config = &resolved.config;
    let mut bundle = Bundle::new("baseline", &resolved.stem, config);
    if let Some(note) = capped {
        bundle.note(note);
    }
    let mut header = vec!["task", "algorithm", "delta", "delta_actual", "n", "p", "runs"];
    header.extend(METRIC_COLUMNS);
    let algorithm = config.algorithm.label();
    {
        let table = bundle.table(&header);
        for point in &points {
            let delta_actual = point.n as f64 / resolved.p as f64;
            for metric_row in metric_rows(&point.runs, &config.zeta_grid) {
                let mut row = vec![
                    "qgt".to_string(),
                    algorithm.to_string(),
                    num(point.delta),
                    num(delta_actual),
                    point.n.to_string(),
                    resolved.p.to_string(),
                    point.runs.len().to_string(),
                ];
                row.extend(metric_row);
                table.push(row);
            }
        }
    }
    for point in &points {
        bundle.record_point(PointRecord {
            delta: point.delta,
            delta_actual: point.n as f64 / resolved.p as f64,
            n: point.n,
            p: resolved.p,
        });
    }
    for path in bundle.commit()? {
        println!("{}", path.display());
    }
    Ok(())
}
