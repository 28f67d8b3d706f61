//! Signal sampling, noisy observation, and the rescaled data vectors the
//! recovery algorithms actually consume.
//!
//! Observations are raw counts `y = X beta + noise`. The analysis works on
//! the centered, variance-normalized form `yt = Xt beta + noise/scale`,
//! which requires subtracting the per-column-block signal sums. Those sums
//! are taken from the true signal by default (a negligible number of extra
//! tests would reveal them); a prior-mean substitute is available but has
//! `O(sqrt(p/C))` error and is not used in the headline experiments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{BaseMatrix, DesignError, DesignKind, DesignPair};
use crate::rng::{stream_rng, Purpose};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("prior probability must lie in [0, 1], got {0}")]
    PriorOutOfRange(f64),
    #[error("category probabilities must be nonnegative and sum to 1, got sum {0}")]
    BadCategoricalPrior(f64),
    #[error("noise variance must be nonnegative and finite, got {0}")]
    BadNoiseVariance(f64),
    #[error("signal length {got} does not match design item count {want}")]
    SignalLengthMismatch { got: usize, want: usize },
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("unsupported instance schema {0:?}")]
    UnknownSchema(String),
    #[error("payload file {0} has malformed contents")]
    BadPayload(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How the requested noise variance is interpreted.
///
/// `RawVariance` is the variance of the noise added to the integer counts.
/// `RescaledVariance` requests that the noise on the rescaled data have the
/// given variance, so the raw variance becomes `sigma2 * n alpha (1-alpha) / R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScaling {
    RawVariance,
    RescaledVariance,
}

/// Source of the per-column-block signal sums used when rescaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSumMode {
    /// Exact sums computed from the signal itself.
    TrueCounts,
    /// `(p/C) * pi`, the prior expectation; cheaper but noisier.
    PriorMean,
}

/// A simulated test outcome for the defective-set problem.
#[derive(Debug, Clone)]
pub struct QgtInstance {
    pub pi: f64,
    /// 0/1 entries, one per item.
    pub beta: Vec<f64>,
    /// Raw counts plus noise, one per test.
    pub y: Vec<f64>,
    /// Variance of the noise on the rescaled data; what the analysis sees.
    pub sigma2: f64,
    /// Variance of the noise added to the raw counts.
    pub raw_noise_var: f64,
    pub noise_seed: u64,
}

impl QgtInstance {
    /// Number of defective items.
    pub fn defectives(&self) -> usize {
        self.beta.iter().filter(|&&b| b != 0.0).count()
    }
}

/// A simulated pooled test outcome over `l` categories.
#[derive(Debug, Clone)]
pub struct PooledInstance {
    pub pi: Vec<f64>,
    /// One-hot rows, `p x l` row-major.
    pub b: Vec<f64>,
    /// Per-test category counts plus noise, `n x l` row-major.
    pub y: Vec<f64>,
    pub sigma2: f64,
    pub raw_noise_var: f64,
    pub noise_seed: u64,
}

impl PooledInstance {
    pub fn categories(&self) -> usize {
        self.pi.len()
    }
}

fn check_noise_var(v: f64) -> Result<(), ModelError> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(ModelError::BadNoiseVariance(v));
    }
    Ok(())
}

fn check_categorical(pi: &[f64]) -> Result<(), ModelError> {
    let sum: f64 = pi.iter().sum();
    if pi.is_empty() || pi.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
        return Err(ModelError::BadCategoricalPrior(sum));
    }
    Ok(())
}

/// Independent 0/1 draws with inclusion probability `pi`.
pub fn sample_qgt_signal(p: usize, pi: f64, seed: u64) -> Result<Vec<f64>, ModelError> {
    if !(0.0..=1.0).contains(&pi) || !pi.is_finite() {
        return Err(ModelError::PriorOutOfRange(pi));
    }
    let mut rng = stream_rng(seed, Purpose::Signal, 0, 0);
    Ok((0..p).map(|_| (rng.random::<f64>() < pi) as u8 as f64).collect())
}

/// Independent one-hot rows drawn from `Categorical(pi)`, `p x l` row-major.
pub fn sample_pooled_signal(p: usize, pi: &[f64], seed: u64) -> Result<Vec<f64>, ModelError> {
    check_categorical(pi)?;
    let l = pi.len();
    let mut rng = stream_rng(seed, Purpose::Signal, 0, 0);
    let mut b = vec![0.0; p * l];
    for row in b.chunks_exact_mut(l) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = l - 1;
        for (t, &w) in pi.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = t;
                break;
            }
        }
        row[pick] = 1.0;
    }
    Ok(b)
}

fn raw_variance_for(design: &DesignPair, noise_sigma2: f64, scaling: NoiseScaling) -> (f64, f64) {
    let scale2 = design.scale() * design.scale();
    match scaling {
        NoiseScaling::RawVariance => (noise_sigma2, noise_sigma2 / scale2),
        NoiseScaling::RescaledVariance => (noise_sigma2 * scale2, noise_sigma2),
    }
}

/// Runs the tests: `y = X beta` plus centered Gaussian noise.
pub fn observe_qgt(
    design: &DesignPair,
    pi: f64,
    beta: Vec<f64>,
    noise_sigma2: f64,
    scaling: NoiseScaling,
    seed: u64,
) -> Result<QgtInstance, ModelError> {
    check_noise_var(noise_sigma2)?;
    if beta.len() != design.p() {
        return Err(ModelError::SignalLengthMismatch { got: beta.len(), want: design.p() });
    }
    let (raw_noise_var, sigma2) = raw_variance_for(design, noise_sigma2, scaling);
    let mut y = design.x_times(&beta);
    if raw_noise_var > 0.0 {
        let noise = Normal::new(0.0, raw_noise_var.sqrt()).expect("variance checked above");
        let mut rng = stream_rng(seed, Purpose::Noise, 0, 0);
        for v in &mut y {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(QgtInstance { pi, beta, y, sigma2, raw_noise_var, noise_seed: seed })
}

/// Runs the pooled tests: `Y = X B` plus centered Gaussian noise per entry.
pub fn observe_pooled(
    design: &DesignPair,
    pi: Vec<f64>,
    b: Vec<f64>,
    noise_sigma2: f64,
    scaling: NoiseScaling,
    seed: u64,
) -> Result<PooledInstance, ModelError> {
    check_noise_var(noise_sigma2)?;
    check_categorical(&pi)?;
    let l = pi.len();
    if b.len() != design.p() * l {
        return Err(ModelError::SignalLengthMismatch { got: b.len(), want: design.p() * l });
    }
    let (raw_noise_var, sigma2) = raw_variance_for(design, noise_sigma2, scaling);
    let mut y = vec![0.0; design.n() * l];
    for i in 0..design.n() {
        let acc = &mut y[i * l..(i + 1) * l];
        for &j in design.row_ones(i) {
            let row = &b[j as usize * l..(j as usize + 1) * l];
            for t in 0..l {
                acc[t] += row[t];
            }
        }
    }
    if raw_noise_var > 0.0 {
        let noise = Normal::new(0.0, raw_noise_var.sqrt()).expect("variance checked above");
        let mut rng = stream_rng(seed, Purpose::Noise, 0, 0);
        for v in &mut y {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(PooledInstance { pi, b, y, sigma2, raw_noise_var, noise_seed: seed })
}

fn qgt_block_sums(design: &DesignPair, instance: &QgtInstance, mode: BlockSumMode) -> Vec<f64> {
    let cols_per = design.cols_per_block();
    match mode {
        BlockSumMode::TrueCounts => instance
            .beta
            .chunks_exact(cols_per)
            .map(|chunk| chunk.iter().sum())
            .collect(),
        BlockSumMode::PriorMean => {
            vec![instance.pi * cols_per as f64; design.base().cols()]
        }
    }
}

/// Centers and normalizes the observations: `yt_i = (y_i - alpha sum_c
/// W[r][c] S_c) / scale` with `S_c` the column-block signal sums.
///
/// With `BlockSumMode::TrueCounts` the identity `yt = Xt beta + noise/scale`
/// holds exactly.
pub fn rescale_qgt(design: &DesignPair, instance: &QgtInstance, mode: BlockSumMode) -> Vec<f64> {
    let sums = qgt_block_sums(design, instance, mode);
    let base = design.base();
    let aw = base.alpha() * base.band_value();
    let rows_per = design.rows_per_block();
    let mut yt = Vec::with_capacity(design.n());
    for r in 0..base.rows() {
        let shift: f64 = aw * base.band_cols_of_row(r).map(|c| sums[c]).sum::<f64>();
        for i in (r * rows_per)..((r + 1) * rows_per) {
            yt.push((instance.y[i] - shift) / design.scale());
        }
    }
    yt
}

/// Pooled analogue of the rescaling; returns `n x l` row-major, satisfying
/// `Yt = Xt B + noise/scale` exactly under `TrueCounts`.
pub fn rescale_pooled(
    design: &DesignPair,
    instance: &PooledInstance,
    mode: BlockSumMode,
) -> Vec<f64> {
    let l = instance.categories();
    let cols_per = design.cols_per_block();
    let c_blocks = design.base().cols();
    let mut sums = vec![0.0; c_blocks * l];
    match mode {
        BlockSumMode::TrueCounts => {
            for (j, row) in instance.b.chunks_exact(l).enumerate() {
                let c = j / cols_per;
                for (t, &v) in row.iter().enumerate() {
                    sums[c * l + t] += v;
                }
            }
        }
        BlockSumMode::PriorMean => {
            for c in 0..c_blocks {
                for t in 0..l {
                    sums[c * l + t] = instance.pi[t] * cols_per as f64;
                }
            }
        }
    }
    let base = design.base();
    let aw = base.alpha() * base.band_value();
    let rows_per = design.rows_per_block();
    let mut yt = vec![0.0; design.n() * l];
    let mut shift = vec![0.0; l];
    for r in 0..base.rows() {
        shift.iter_mut().for_each(|x| *x = 0.0);
        for c in base.band_cols_of_row(r) {
            for t in 0..l {
                shift[t] += aw * sums[c * l + t];
            }
        }
        for i in (r * rows_per)..((r + 1) * rows_per) {
            for t in 0..l {
                yt[i * l + t] = (instance.y[i * l + t] - shift[t]) / design.scale();
            }
        }
    }
    yt
}

const QGT_SCHEMA: &str = "qgt-instance/1";
const POOLED_SCHEMA: &str = "pooled-instance/1";

/// Self-describing header written next to (or instead of) instance payloads.
///
/// By default an instance is captured as `(seeds, parameters)` only; the
/// arrays are re-derived on import. `with_payload` additionally writes the
/// signal and observations as CSV for consumers outside this codebase.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceHeader {
    pub schema: String,
    pub kind: DesignKind,
    pub omega: usize,
    pub lambda: usize,
    pub alpha: f64,
    pub n: usize,
    pub p: usize,
    pub design_seed: u64,
    pub signal_seed: u64,
    pub noise_seed: u64,
    /// Length 1 for the defective-set problem, length `L` for pooled data.
    pub pi: Vec<f64>,
    pub noise_sigma2: f64,
    pub noise_scaling: NoiseScaling,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub signal_csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub observations_csv: Option<String>,
}

fn write_csv(path: &Path, data: &[f64], cols: usize) -> Result<(), ModelError> {
    let mut text = String::with_capacity(data.len() * 8);
    for row in data.chunks_exact(cols) {
        for (t, v) in row.iter().enumerate() {
            if t > 0 {
                text.push(',');
            }
            let _ = write!(text, "{v:.17e}");
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_csv(path: &Path, cols: usize) -> Result<Vec<f64>, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(ModelError::BadPayload(path.to_path_buf()));
        }
        for f in fields {
            out.push(f.trim().parse().map_err(|_| ModelError::BadPayload(path.to_path_buf()))?);
        }
    }
    Ok(out)
}

/// Everything needed to reconstruct a simulated experiment.
pub struct ExportArgs<'a> {
    pub base: &'a BaseMatrix,
    pub kind: DesignKind,
    pub n: usize,
    pub p: usize,
    pub design_seed: u64,
    pub signal_seed: u64,
    pub noise_sigma2: f64,
    pub noise_scaling: NoiseScaling,
}

/// Writes `{stem}.json`, plus `{stem}.signal.csv` / `{stem}.obs.csv` when
/// `with_payload` is set.
pub fn export_qgt(
    stem: &Path,
    args: &ExportArgs,
    instance: &QgtInstance,
    with_payload: bool,
) -> Result<PathBuf, ModelError> {
    let mut header = InstanceHeader {
        schema: QGT_SCHEMA.to_string(),
        kind: args.kind,
        omega: args.base.omega(),
        lambda: args.base.lambda(),
        alpha: args.base.alpha(),
        n: args.n,
        p: args.p,
        design_seed: args.design_seed,
        signal_seed: args.signal_seed,
        noise_seed: instance.noise_seed,
        pi: vec![instance.pi],
        noise_sigma2: args.noise_sigma2,
        noise_scaling: args.noise_scaling,
        signal_csv: None,
        observations_csv: None,
    };
    write_instance_files(stem, &mut header, &instance.beta, &instance.y, 1, with_payload)
}

pub fn export_pooled(
    stem: &Path,
    args: &ExportArgs,
    instance: &PooledInstance,
    with_payload: bool,
) -> Result<PathBuf, ModelError> {
    let mut header = InstanceHeader {
        schema: POOLED_SCHEMA.to_string(),
        kind: args.kind,
        omega: args.base.omega(),
        lambda: args.base.lambda(),
        alpha: args.base.alpha(),
        n: args.n,
        p: args.p,
        design_seed: args.design_seed,
        signal_seed: args.signal_seed,
        noise_seed: instance.noise_seed,
        pi: instance.pi.clone(),
        noise_sigma2: args.noise_sigma2,
        noise_scaling: args.noise_scaling,
        signal_csv: None,
        observations_csv: None,
    };
    let l = instance.categories();
    write_instance_files(stem, &mut header, &instance.b, &instance.y, l, with_payload)
}

fn write_instance_files(
    stem: &Path,
    header: &mut InstanceHeader,
    signal: &[f64],
    obs: &[f64],
    cols: usize,
    with_payload: bool,
) -> Result<PathBuf, ModelError> {
    let file_name = |suffix: &str| {
        let mut name = stem.file_name().map(|s| s.to_owned()).unwrap_or_default();
        name.push(suffix);
        name
    };
    if with_payload {
        let signal_path = stem.with_file_name(file_name(".signal.csv"));
        let obs_path = stem.with_file_name(file_name(".obs.csv"));
        write_csv(&signal_path, signal, cols)?;
        write_csv(&obs_path, obs, cols)?;
        header.signal_csv = Some(signal_path.file_name().unwrap().to_string_lossy().into());
        header.observations_csv = Some(obs_path.file_name().unwrap().to_string_lossy().into());
    }
    let json_path = stem.with_file_name(file_name(".json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(header)?)?;
    Ok(json_path)
}

/// An instance re-read from disk, either problem family.
pub enum ImportedInstance {
    Qgt { design: DesignPair, instance: QgtInstance },
    Pooled { design: DesignPair, instance: PooledInstance },
}

/// Reads a header written by the export functions and reconstructs the
/// instance, preferring the CSV payload when the header references one and
/// re-simulating from the recorded seeds otherwise.
pub fn import_instance(json_path: &Path) -> Result<ImportedInstance, ModelError> {
    let header: InstanceHeader = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let base = BaseMatrix::new(header.omega, header.lambda, header.alpha)?;
    let design = DesignPair::sample(&base, header.n, header.p, header.design_seed, header.kind)?;
    let dir = json_path.parent().unwrap_or(Path::new(""));
    match header.schema.as_str() {
        QGT_SCHEMA => {
            let pi = header.pi[0];
            let instance = if let (Some(sig), Some(obs)) =
                (&header.signal_csv, &header.observations_csv)
            {
                let beta = read_csv(&dir.join(sig), 1)?;
                let y = read_csv(&dir.join(obs), 1)?;
                let (raw_noise_var, sigma2) =
                    raw_variance_for(&design, header.noise_sigma2, header.noise_scaling);
                QgtInstance { pi, beta, y, sigma2, raw_noise_var, noise_seed: header.noise_seed }
            } else {
                let beta = sample_qgt_signal(header.p, pi, header.signal_seed)?;
                observe_qgt(
                    &design,
                    pi,
                    beta,
                    header.noise_sigma2,
                    header.noise_scaling,
                    header.noise_seed,
                )?
            };
            Ok(ImportedInstance::Qgt { design, instance })
        }
        POOLED_SCHEMA => {
            let l = header.pi.len();
            let instance = if let (Some(sig), Some(obs)) =
                (&header.signal_csv, &header.observations_csv)
            {
                let b = read_csv(&dir.join(sig), l)?;
                let y = read_csv(&dir.join(obs), l)?;
                let (raw_noise_var, sigma2) =
                    raw_variance_for(&design, header.noise_sigma2, header.noise_scaling);
                PooledInstance {
                    pi: header.pi.clone(),
                    b,
                    y,
                    sigma2,
                    raw_noise_var,
                    noise_seed: header.noise_seed,
                }
            } else {
                let b = sample_pooled_signal(header.p, &header.pi, header.signal_seed)?;
                observe_pooled(
                    &design,
                    header.pi.clone(),
                    b,
                    header.noise_sigma2,
                    header.noise_scaling,
                    header.noise_seed,
                )?
            };
            Ok(ImportedInstance::Pooled { design, instance })
        }
        other => Err(ModelError::UnknownSchema(other.to_string())),
    }
}
