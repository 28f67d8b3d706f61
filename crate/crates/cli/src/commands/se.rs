//! Deterministic recursion sweeps: no sampling, one fixed point per
//! sampling ratio, with the information-theoretic tests-per-item reference
//! carried alongside.

use anyhow::anyhow;
use nalgebra::DMatrix;
use rayon::prelude::*;

use scamp::state_evolution::{
    iterate_cov_se, iterate_scalar_se, reference_test_limit, se_predict_metrics, CovSeConfig,
    ScalarSeConfig,
};

use crate::commands::{config_err, numeric_err, CliError};
use crate::config::{self, Algorithm, Overrides, Resolved, Task};
use crate::output::{blank, num, Bundle};

pub fn run(overrides: &Overrides) -> Result<(), CliError> {
    let config = config::load(overrides).map_err(config_err)?;
    let resolved = config::resolve(config, overrides, "se").map_err(config_err)?;
    validate(&resolved).map_err(config_err)?;
    let rows = sweep(&resolved).map_err(numeric_err)?;
    write(&resolved, rows).map_err(numeric_err)
}

fn validate(resolved: &Resolved) -> anyhow::Result<()> {
    let config = &resolved.config;
    match (config.task, config.algorithm) {
        (Task::Qgt, Algorithm::ScAmp | Algorithm::IidAmp) => {
            config.pi.scalar().map(drop)
        }
        (Task::Pooled, Algorithm::MatScAmp | Algorithm::ColScAmp) => {
            config.pi.vector().map(drop)
        }
        (_, algorithm) => Err(anyhow!(
            "no deterministic recursion is defined for algorithm {}",
            algorithm.label()
        )),
    }
}

struct SePoint {
    delta: f64,
    iterations: usize,
    converged: bool,
    mse: f64,
    correlation: f64,
    /// One `(zeta, fpr, fnr)` triple per threshold; empty for pooled runs.
    rates: Vec<(f64, f64, f64)>,
}

fn sweep(resolved: &Resolved) -> anyhow::Result<Vec<SePoint>> {
    let config = &resolved.config;
    config
        .delta_grid
        .par_iter()
        .map(|&delta| match config.task {
            Task::Qgt => {
                let pi = config.pi.scalar().expect("validated");
                let run = iterate_scalar_se(
                    &resolved.base,
                    delta,
                    pi,
                    config.sigma2,
                    &ScalarSeConfig { k_max: config.max_iters, ..Default::default() },
                )?;
                let last = run.final_state();
                let head = se_predict_metrics(last, pi, 0.5);
                let rates = config
                    .zeta_grid
                    .iter()
                    .map(|&zeta| {
                        let m = se_predict_metrics(last, pi, zeta);
                        (zeta, m.fpr, m.fnr)
                    })
                    .collect();
                Ok(SePoint {
                    delta,
                    iterations: run.iterations(),
                    converged: run.converged,
                    mse: head.mse,
                    correlation: head.correlation,
                    rates,
                })
            }
            Task::Pooled => {
                let pi = config.pi.vector().expect("validated");
                let l = pi.len();
                let noise_cov = DMatrix::from_diagonal_element(l, l, config.sigma2);
                let run = iterate_cov_se(
                    &resolved.base,
                    delta,
                    &pi,
                    &noise_cov,
                    &CovSeConfig { k_max: config.max_iters, ..Default::default() },
                )?;
                let mse = run.psi.iter().map(|m| m.trace()).sum::<f64>()
                    / run.psi.len() as f64;
                Ok(SePoint {
                    delta,
                    iterations: run.iterations(),
                    converged: run.converged,
                    mse,
                    correlation: run.overlap,
                    rates: Vec::new(),
                })
            }
        })
        .collect()
}

fn write(resolved: &Resolved, points: Vec<SePoint>) -> anyhow::Result<()> {
    let config = &resolved.config;
    let reference = match config.task {
        Task::Qgt => {
            let pi = config.pi.scalar().expect("validated");
            reference_test_limit(&[1.0 - pi, pi], resolved.p)?
        }
        Task::Pooled => {
            reference_test_limit(&config.pi.vector().expect("validated"), resolved.p)?
        }
    };
    let mut bundle = Bundle::new("se", &resolved.stem, config);
    bundle.note(format!("reference tests-per-item limit at p={}: {reference}", resolved.p));
    let header = [
        "task",
        "algorithm",
        "delta",
        "iterations",
        "converged",
        "mse",
        "correlation",
        "zeta",
        "fpr",
        "fnr",
        "reference_limit",
    ];
    let task = format!("{:?}", config.task).to_lowercase();
    let algorithm = config.algorithm.label();
    let table = bundle.table(&header);
    for point in &points {
        let lead = |zeta: String, fpr: String, fnr: String| {
            vec![
                task.clone(),
                algorithm.to_string(),
                num(point.delta),
                point.iterations.to_string(),
                point.converged.to_string(),
                num(point.mse),
                num(point.correlation),
                zeta,
                fpr,
                fnr,
                num(reference),
            ]
        };
        if point.rates.is_empty() {
            table.push(lead(blank(), blank(), blank()));
        } else {
            for &(zeta, fpr, fnr) in &point.rates {
                table.push(lead(num(zeta), num(fpr), num(fnr)));
            }
        }
    }
    for path in bundle.commit()? {
        println!("{}", path.display());
    }
    Ok(())
}
