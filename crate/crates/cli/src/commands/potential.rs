//! Scalar potential sweeps: the curve over candidate error levels plus a
//! stationary-point summary per sampling ratio.

use anyhow::anyhow;
use rayon::prelude::*;

use scamp::potential::{potential_profile, scan_potential, PotentialScan, ScanConfig};

use crate::commands::{config_err, numeric_err, CliError};
use crate::config::{self, Overrides, Resolved, Task};
use crate::output::{blank, num, Bundle};

/// Stands in for an exactly-zero noise variance, which the potential's
/// logarithmic terms cannot take; small enough that every curve on a
/// practical grid is indistinguishable from the noiseless limit.
const NOISELESS_STAND_IN: f64 = 1e-60;

pub fn run(overrides: &Overrides) -> Result<(), CliError> {
    let config = config::load(overrides).map_err(config_err)?;
    let mut resolved = config::resolve(config, overrides, "potential").map_err(config_err)?;
    if resolved.config.task != Task::Qgt {
        return Err(config_err(anyhow!(
            "the potential is defined for the two-class count problem only"
        )));
    }
    let pi = resolved.config.pi.scalar().map_err(config_err)?;
    let substituted = resolved.config.sigma2 == 0.0;
    if substituted {
        resolved.config.sigma2 = NOISELESS_STAND_IN;
    }
    let sigma2 = resolved.config.sigma2;
    let grid_points = resolved.config.grid_points;
    if grid_points < 2 {
        return Err(config_err(anyhow!("gridPoints must be at least 2")));
    }

    let results: Vec<(f64, Vec<(f64, f64)>, PotentialScan)> = resolved
        .config
        .delta_grid
        .par_iter()
        .map(|&delta| {
            let curve = potential_profile(delta, pi, sigma2, grid_points - 1)?;
            let scan = scan_potential(
                delta,
                pi,
                sigma2,
                &ScanConfig { grid_points: grid_points - 1, ..Default::default() },
            )?;
            Ok((delta, curve, scan))
        })
        .collect::<Result<_, scamp::potential::PotentialError>>()
        .map_err(numeric_err)?;

    write(&resolved, pi, substituted, results).map_err(numeric_err)
}

fn write(
    resolved: &Resolved,
    pi: f64,
    substituted: bool,
    results: Vec<(f64, Vec<(f64, f64)>, PotentialScan)>,
) -> anyhow::Result<()> {
    let config = &resolved.config;
    let mut bundle = Bundle::new("potential", &resolved.stem, config);
    if substituted {
        bundle.note(format!(
            "noise variance 0 replaced by {NOISELESS_STAND_IN:e} for the noiseless limit"
        ));
    }
    {
        let curve_table = bundle.table(&["pi", "sigma2", "delta", "b", "potential"]);
        for (delta, curve, _) in &results {
            for &(b, u) in curve {
                curve_table.push(vec![
                    num(pi),
                    num(config.sigma2),
                    num(*delta),
                    num(b),
                    num(u),
                ]);
            }
        }
    }
    {
        let summary = bundle.suffixed_table(
            "summary",
            &[
                "pi",
                "sigma2",
                "delta",
                "argmin",
                "min_value",
                "largest_stationary",
                "stationary_points",
            ],
        );
        for (delta, _, scan) in &results {
            summary.push(vec![
                num(pi),
                num(config.sigma2),
                num(*delta),
                num(scan.argmin),
                num(scan.min_value),
                scan.largest_stationary().map(num).unwrap_or_else(blank),
                scan.stationary.len().to_string(),
            ]);
        }
    }
    for path in bundle.commit()? {
        println!("{}", path.display());
    }
    Ok(())
}
