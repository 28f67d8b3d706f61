//! Recovery sweeps: sample an instance per (delta, seed), run the chosen
//! message-passing loop, and tabulate per-point metric summaries.

use anyhow::anyhow;
use nalgebra::DMatrix;
use rayon::prelude::*;

use scamp::amp::{
    argmax_categories, quantize_threshold_half, run_columnwise_sc_amp, run_matrix_sc_amp,
    run_sc_amp_qgt, AmpConfig,
};
use scamp::design::{DesignKind, DesignPair};
use scamp::metrics;
use scamp::model::{
    observe_pooled, observe_qgt, rescale_pooled, rescale_qgt, sample_pooled_signal,
    sample_qgt_signal, BlockSumMode, NoiseScaling,
};

use crate::commands::{config_err, metric_rows, numeric_err, threshold_rates, CliError, RunMetrics, METRIC_COLUMNS};
use crate::config::{self, Algorithm, Overrides, Resolved, Task};
use crate::output::{num, Bundle, PointRecord};

pub fn run(overrides: &Overrides) -> Result<(), CliError> {
    let config = config::load(overrides).map_err(config_err)?;
    let resolved = config::resolve(config, overrides, "simulate").map_err(config_err)?;
    validate_pairing(&resolved).map_err(config_err)?;
    let rows = sweep(&resolved).map_err(numeric_err)?;
    write(&resolved, rows).map_err(numeric_err)
}

fn validate_pairing(resolved: &Resolved) -> anyhow::Result<()> {
    let config = &resolved.config;
    match (config.task, config.algorithm) {
        (Task::Qgt, Algorithm::ScAmp | Algorithm::IidAmp) => {
            config.pi.scalar()?;
        }
        (Task::Pooled, Algorithm::MatScAmp | Algorithm::ColScAmp) => {
            config.pi.vector()?;
        }
        (_, Algorithm::Lp | Algorithm::Cvx) => {
            return Err(anyhow!(
                "the {} solver runs under the baseline command",
                config.algorithm.label()
            ));
        }
        (task, algorithm) => {
            return Err(anyhow!(
                "algorithm {} does not apply to the {task:?} task",
                algorithm.label()
            ));
        }
    }
    Ok(())
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
    let amp_config = AmpConfig { max_iters: config.max_iters, ..Default::default() };
    let kind = match config.algorithm {
        Algorithm::IidAmp => DesignKind::Uncoupled,
        _ => DesignKind::Coupled,
    };
    let design = DesignPair::sample(&resolved.base, n, resolved.p, seed, kind)?;
    match config.task {
        Task::Qgt => {
            let pi = config.pi.scalar().expect("validated");
            let beta = sample_qgt_signal(resolved.p, pi, seed)?;
            let instance = observe_qgt(
                &design,
                pi,
                beta.clone(),
                config.sigma2,
                NoiseScaling::RescaledVariance,
                seed,
            )?;
            let yt = rescale_qgt(&design, &instance, BlockSumMode::TrueCounts);
            let run =
                run_sc_amp_qgt(&design, &yt, pi, config.sigma2, &amp_config, Some(&beta))?;
            let estimate = &run.state.beta_hat;
            Ok(RunMetrics {
                correlation: metrics::normalized_sq_correlation(&beta, estimate),
                mse: metrics::mse(&beta, estimate),
                hamming: metrics::hamming_rate(&beta, &quantize_threshold_half(estimate)),
                iterations: Some(run.iterations),
                converged: Some(run.converged),
                rates: threshold_rates(&beta, estimate, &config.zeta_grid),
            })
        }
        Task::Pooled => {
            let pi = config.pi.vector().expect("validated");
            let l = pi.len();
            let b = sample_pooled_signal(resolved.p, &pi, seed)?;
            let instance = observe_pooled(
                &design,
                pi.clone(),
                b.clone(),
                config.sigma2,
                NoiseScaling::RescaledVariance,
                seed,
            )?;
            let yt_flat = rescale_pooled(&design, &instance, BlockSumMode::TrueCounts);
            let yt = DMatrix::from_row_slice(n, l, &yt_flat);
            let categories: Vec<usize> = b
                .chunks_exact(l)
                .map(|row| row.iter().position(|&v| v == 1.0).expect("one-hot rows"))
                .collect();
            let (estimate, iterations, converged) = match config.algorithm {
                Algorithm::MatScAmp => {
                    let noise_cov = DMatrix::from_diagonal_element(l, l, config.sigma2);
                    let run = run_matrix_sc_amp(
                        &design,
                        &yt,
                        &pi,
                        &noise_cov,
                        &amp_config,
                        Some(&categories),
                    )?;
                    (run.state.b_hat, Some(run.iterations), Some(run.converged))
                }
                Algorithm::ColScAmp => {
                    let sigma2_per_col = vec![config.sigma2; l];
                    let run =
                        run_columnwise_sc_amp(&design, &yt, &pi, &sigma2_per_col, &amp_config)?;
                    (run.estimate, None, None)
                }
                _ => unreachable!("validated"),
            };
            let mut sq = 0.0;
            for i in 0..resolved.p {
                for t in 0..l {
                    let d = estimate[(i, t)] - b[i * l + t];
                    sq += d * d;
                }
            }
            Ok(RunMetrics {
                correlation: metrics::pooled_mean_correlation(&categories, &estimate),
                mse: sq / resolved.p as f64,
                hamming: metrics::categorical_error_rate(
                    &categories,
                    &argmax_categories(&estimate),
                ),
                iterations,
                converged,
                rates: Vec::new(),
            })
        }
    }
}

fn write(resolved: &Resolved, points: Vec<PointResult>) -> anyhow::Result<()> {
    let config = &resolved.config;
    let mut bundle = Bundle::new("simulate", &resolved.stem, config);
    let mut header = vec!["task", "algorithm", "delta", "delta_actual", "n", "p", "runs"];
    header.extend(METRIC_COLUMNS);
    let task = format!("{:?}", config.task).to_lowercase();
    let algorithm = config.algorithm.label();
    let zetas = match config.task {
        Task::Qgt => config.zeta_grid.clone(),
        Task::Pooled => Vec::new(),
    };
    {
        let table = bundle.table(&header);
        for point in &points {
            let delta_actual = point.n as f64 / resolved.p as f64;
            for metric_row in metric_rows(&point.runs, &zetas) {
                let mut row = vec![
                    task.clone(),
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
