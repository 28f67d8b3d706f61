//! Experiment configuration: JSON file, flag overrides, and the resolved
//! form every command consumes.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use scamp::design::BaseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Defective-set recovery from per-test counts.
    Qgt,
    /// Categorical recovery from per-test histograms.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Scalar message-passing loop on the coupled design.
    ScAmp,
    /// Scalar loop on the dense uncoupled design.
    IidAmp,
    /// Matrix loop for categorical signals.
    MatScAmp,
    /// Column-wise reduction of the matrix loop.
    ColScAmp,
    /// Linear program with box constraints on raw counts.
    Lp,
    /// Penalized least squares on raw counts.
    Cvx,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::ScAmp => "sc-amp",
            Algorithm::IidAmp => "iid-amp",
            Algorithm::MatScAmp => "mat-sc-amp",
            Algorithm::ColScAmp => "col-sc-amp",
            Algorithm::Lp => "lp",
            Algorithm::Cvx => "cvx",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Algorithm::Lp | Algorithm::Cvx)
    }
}

/// Inclusion probability: a single value for the two-class problem, a
/// distribution over categories for pooled data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PriorSpec {
    pub fn scalar(&self) -> Result<f64> {
        match self {
            PriorSpec::Scalar(v) => Ok(*v),
            PriorSpec::Vector(v) if v.len() == 1 => Ok(v[0]),
            PriorSpec::Vector(_) => {
                bail!("this task takes a single inclusion probability, not a category vector")
            }
        }
    }

    pub fn vector(&self) -> Result<Vec<f64>> {
        match self {
            PriorSpec::Vector(v) if v.len() >= 2 => Ok(v.clone()),
            _ => bail!("pooled tasks need a probability vector with at least two categories"),
        }
    }
}

fn default_omega() -> usize {
    6
}
fn default_lambda() -> usize {
    40
}
fn default_alpha() -> f64 {
    0.5
}
fn default_p() -> usize {
    20_000
}
fn default_pi() -> PriorSpec {
    PriorSpec::Scalar(0.3)
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_max_iters() -> usize {
    300
}
fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}
fn default_baseline_p_cap() -> usize {
    2000
}
fn default_grid_points() -> usize {
    500
}
fn default_task() -> Task {
    Task::Qgt
}
fn default_algorithm() -> Algorithm {
    Algorithm::ScAmp
}

/// On-disk schema; unknown keys are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_omega")]
    pub omega: usize,
    #[serde(default = "default_lambda")]
    pub lambda: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default)]
    pub delta_grid: Vec<f64>,
    #[serde(default = "default_pi")]
    pub pi: PriorSpec,
    #[serde(default)]
    pub sigma2: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub zeta_grid: Vec<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Largest item count baseline solvers accept before the driver
    /// shrinks the run.
    #[serde(default = "default_baseline_p_cap")]
    pub baseline_p_cap: usize,
    /// Resolution of the potential sweep over error levels.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Flag-level overrides; every field mirrors an `ExperimentConfig` entry
/// and wins over the file value when present.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    #[arg(long, value_enum)]
    pub algorithm: Option<Algorithm>,
    /// Coupling width of the banded base matrix.
    #[arg(long)]
    pub omega: Option<usize>,
    /// Coupling length (number of column blocks).
    #[arg(long)]
    pub lambda: Option<usize>,
    /// Bernoulli rate scaling of the design.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Item count; rounded to a multiple of the column-block count.
    #[arg(long)]
    pub p: Option<usize>,
    /// Sampling ratios to sweep.
    #[arg(long, value_delimiter = ',')]
    pub delta_grid: Option<Vec<f64>>,
    /// Inclusion probability (one value) or category distribution
    /// (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub pi: Option<Vec<f64>>,
    /// Noise variance in the rescaled observation domain.
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Decision thresholds for the error-rate columns.
    #[arg(long, value_delimiter = ',')]
    pub zeta_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub baseline_p_cap: Option<usize>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Base name for the output files (defaults to the command name).
    #[arg(long)]
    pub stem: Option<String>,
}

pub fn load(overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut config = match &overrides.config {
        Some(path) => parse_file(path)?,
        None => ExperimentConfig::default(),
    };
    apply(&mut config, overrides);
    Ok(config)
}

fn parse_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading configuration file {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing configuration file {}", path.display()))
}

fn apply(config: &mut ExperimentConfig, over: &Overrides) {
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = &over.$field {
                config.$field = v.clone();
            }
        };
    }
    take!(task);
    take!(algorithm);
    take!(omega);
    take!(lambda);
    take!(alpha);
    take!(p);
    take!(delta_grid);
    take!(sigma2);
    take!(seeds);
    take!(max_iters);
    take!(zeta_grid);
    take!(output_dir);
    take!(baseline_p_cap);
    take!(grid_points);
    if let Some(pi) = &over.pi {
        config.pi = if pi.len() == 1 {
            PriorSpec::Scalar(pi[0])
        } else {
            PriorSpec::Vector(pi.clone())
        };
    }
}

/// A configuration after validation: grids checked, duplicates dropped,
/// and the item count aligned with the block partition.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub base: BaseMatrix,
    /// `p` rounded to a multiple of the column-block count.
    pub p: usize,
    pub stem: String,
}

impl Resolved {
    /// Tests for a requested sampling ratio: the nearest row count that
    /// splits evenly across row blocks.
    pub fn tests_for(&self, delta: f64) -> usize {
        let r = self.base.rows() as f64;
        let blocks = (delta * self.p as f64 / r).round() as usize;
        blocks.max(1) * self.base.rows()
    }
}

/// Validates the shared fields and constructs the base matrix the chosen
/// algorithm runs on. `default_stem` names the output files when the user
/// does not pick one.
pub fn resolve(
    config: ExperimentConfig,
    overrides: &Overrides,
    default_stem: &str,
) -> Result<Resolved> {
    let mut config = config;
    if config.delta_grid.is_empty() {
        bail!("deltaGrid must list at least one sampling ratio");
    }
    if config.seeds.is_empty() {
        bail!("seeds must list at least one value");
    }
    for &d in &config.delta_grid {
        if !(d > 0.0) || !d.is_finite() {
            bail!("sampling ratio {d} is not positive and finite");
        }
    }
    for &z in &config.zeta_grid {
        if !(0.0..=1.0).contains(&z) {
            bail!("threshold {z} lies outside [0, 1]");
        }
    }
    let before = config.delta_grid.len();
    dedup_preserving_order(&mut config.delta_grid);
    if config.delta_grid.len() < before {
        eprintln!(
            "warning: dropped {} duplicate deltaGrid entries",
            before - config.delta_grid.len()
        );
    }

    let base = match config.algorithm {
        Algorithm::IidAmp => BaseMatrix::uncoupled(config.alpha),
        _ => BaseMatrix::new(config.omega, config.lambda, config.alpha),
    }
    .map_err(|e| anyhow!("design parameters rejected: {e}"))?;

    let c_blocks = base.cols();
    let p = round_to_multiple(config.p, c_blocks)
        .ok_or_else(|| anyhow!("item count {} rounds to zero blocks of {c_blocks}", config.p))?;
    if p != config.p {
        eprintln!(
            "warning: item count {} is not a multiple of {c_blocks} column blocks; using {p}",
            config.p
        );
    }

    let stem = overrides.stem.clone().unwrap_or_else(|| default_stem.to_string());
    Ok(Resolved { config, base, p, stem })
}

fn round_to_multiple(value: usize, unit: usize) -> Option<usize> {
    let blocks = (value as f64 / unit as f64).round() as usize;
    (blocks > 0).then(|| blocks * unit)
}

fn dedup_preserving_order(values: &mut Vec<f64>) {
    let mut seen: Vec<f64> = Vec::with_capacity(values.len());
    values.retain(|&v| {
        if seen.iter().any(|&s| s == v) {
            false
        } else {
            seen.push(v);
            true
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"deltaGrd": [0.3]}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("deltaGrd"), "{err}");
    }

    #[test]
    fn flags_override_file_values() {
        let mut config = ExperimentConfig::default();
        config.p = 400;
        let over = Overrides { p: Some(600), ..Default::default() };
        apply(&mut config, &over);
        assert_eq!(config.p, 600);
    }

    #[test]
    fn single_pi_flag_becomes_a_scalar() {
        let mut config = ExperimentConfig::default();
        let over = Overrides { pi: Some(vec![0.2]), ..Default::default() };
        apply(&mut config, &over);
        assert_eq!(config.pi.scalar().unwrap(), 0.2);
        let over = Overrides { pi: Some(vec![0.2, 0.3, 0.5]), ..Default::default() };
        apply(&mut config, &over);
        assert_eq!(config.pi.vector().unwrap(), vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn resolution_rounds_item_count_and_dedupes() {
        let mut config = ExperimentConfig::default();
        config.delta_grid = vec![0.3, 0.5, 0.3];
        config.p = 20_010;
        let resolved = resolve(config, &Overrides::default(), "run").unwrap();
        assert_eq!(resolved.p, 20_000);
        assert_eq!(resolved.config.delta_grid, vec![0.3, 0.5]);
        assert_eq!(resolved.tests_for(0.38), 7605);
    }

    #[test]
    fn empty_delta_grid_is_a_usage_error() {
        let config = ExperimentConfig::default();
        let err = resolve(config, &Overrides::default(), "run").unwrap_err().to_string();
        assert!(err.contains("deltaGrid"), "{err}");
    }
}
