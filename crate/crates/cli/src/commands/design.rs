//! Design sampling: block-level density summaries per (delta, seed), with
//! optional export of full reconstructable instances.

use rayon::prelude::*;

use scamp::design::{DesignKind, DesignPair};
use scamp::model::{
    export_pooled, export_qgt, observe_pooled, observe_qgt, sample_pooled_signal,
    sample_qgt_signal, ExportArgs, NoiseScaling,
};

use crate::commands::{config_err, numeric_err, CliError};
use crate::config::{self, Algorithm, Overrides, Resolved, Task};
use crate::output::{blank, num, Bundle, PointRecord};

pub fn run(overrides: &Overrides, export: bool, payload: bool) -> Result<(), CliError> {
    let config = config::load(overrides).map_err(config_err)?;
    let resolved = config::resolve(config, overrides, "design").map_err(config_err)?;
    match resolved.config.task {
        Task::Qgt => resolved.config.pi.scalar().map(drop),
        Task::Pooled => resolved.config.pi.vector().map(drop),
    }
    .map_err(config_err)?;
    let rows = sweep(&resolved, export, payload).map_err(numeric_err)?;
    write(&resolved, rows).map_err(numeric_err)
}

struct DesignRow {
    delta: f64,
    n: usize,
    seed: u64,
    ones: usize,
    empirical_density: f64,
    min_block_ones: usize,
    max_block_ones: usize,
    exported: Option<String>,
}

fn sweep(resolved: &Resolved, export: bool, payload: bool) -> anyhow::Result<Vec<DesignRow>> {
    let config = &resolved.config;
    let mut specs = Vec::new();
    for &delta in &config.delta_grid {
        for &seed in &config.seeds {
            specs.push((delta, seed));
        }
    }
    specs
        .into_par_iter()
        .map(|(delta, seed)| {
            let n = resolved.tests_for(delta);
            let kind = match config.algorithm {
                Algorithm::IidAmp => DesignKind::Uncoupled,
                _ => DesignKind::Coupled,
            };
            let design = DesignPair::sample(&resolved.base, n, resolved.p, seed, kind)?;
            let base = &resolved.base;
            let rows_per = design.rows_per_block();
            let mut block_ones = vec![0usize; base.rows() * base.cols()];
            for i in 0..n {
                let r = i / rows_per;
                for c in base.band_cols_of_row(r) {
                    block_ones[r * base.cols() + c] += design.row_ones_in_block(i, c).len();
                }
            }
            let ones: usize = block_ones.iter().sum();
            let mut in_band_cells = 0usize;
            let mut min_block = usize::MAX;
            let mut max_block = 0usize;
            for r in 0..base.rows() {
                for c in 0..base.cols() {
                    if base.in_band(r, c) {
                        in_band_cells += rows_per * design.cols_per_block();
                        let v = block_ones[r * base.cols() + c];
                        min_block = min_block.min(v);
                        max_block = max_block.max(v);
                    }
                }
            }
            let exported = if export {
                Some(export_instance(resolved, &design, n, delta, seed, payload)?)
            } else {
                None
            };
            Ok(DesignRow {
                delta,
                n,
                seed,
                ones,
                empirical_density: ones as f64 / in_band_cells as f64,
                min_block_ones: min_block,
                max_block_ones: max_block,
                exported,
            })
        })
        .collect()
}

fn export_instance(
    resolved: &Resolved,
    design: &DesignPair,
    n: usize,
    delta: f64,
    seed: u64,
    payload: bool,
) -> anyhow::Result<String> {
    let config = &resolved.config;
    std::fs::create_dir_all(&config.output_dir)?;
    let stem_name = format!("{}_delta{}_seed{seed}", resolved.stem, num(delta));
    let stem = config.output_dir.join(&stem_name);
    let args = ExportArgs {
        base: &resolved.base,
        kind: design.kind(),
        n,
        p: resolved.p,
        design_seed: seed,
        signal_seed: seed,
        noise_sigma2: config.sigma2,
        noise_scaling: NoiseScaling::RescaledVariance,
    };
    let json = match config.task {
        Task::Qgt => {
            let pi = config.pi.scalar().expect("validated");
            let beta = sample_qgt_signal(resolved.p, pi, seed)?;
            let instance = observe_qgt(
                design,
                pi,
                beta,
                config.sigma2,
                NoiseScaling::RescaledVariance,
                seed,
            )?;
            export_qgt(&stem, &args, &instance, payload)?
        }
        Task::Pooled => {
            let pi = config.pi.vector().expect("validated");
            let b = sample_pooled_signal(resolved.p, &pi, seed)?;
            let instance = observe_pooled(
                design,
                pi,
                b,
                config.sigma2,
                NoiseScaling::RescaledVariance,
                seed,
            )?;
            export_pooled(&stem, &args, &instance, payload)?
        }
    };
    Ok(json.file_name().unwrap().to_string_lossy().into_owned())
}

fn write(resolved: &Resolved, rows: Vec<DesignRow>) -> anyhow::Result<()> {
    let config = &resolved.config;
    let expected_density = resolved.base.alpha() * resolved.base.band_value();
    let mut bundle = Bundle::new("design", &resolved.stem, config);
    {
        let table = bundle.table(&[
            "delta",
            "delta_actual",
            "n",
            "p",
            "seed",
            "expected_density",
            "ones",
            "empirical_density",
            "min_block_ones",
            "max_block_ones",
            "instance",
        ]);
        for row in &rows {
            table.push(vec![
                num(row.delta),
                num(row.n as f64 / resolved.p as f64),
                row.n.to_string(),
                resolved.p.to_string(),
                row.seed.to_string(),
                num(expected_density),
                row.ones.to_string(),
                num(row.empirical_density),
                row.min_block_ones.to_string(),
                row.max_block_ones.to_string(),
                row.exported.clone().unwrap_or_else(blank),
            ]);
        }
    }
    for row in &rows {
        bundle.record_point(PointRecord {
            delta: row.delta,
            delta_actual: row.n as f64 / resolved.p as f64,
            n: row.n,
            p: resolved.p,
        });
    }
    for path in bundle.commit()? {
        println!("{}", path.display());
    }
    Ok(())
}
