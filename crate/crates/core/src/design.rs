//! Band-diagonal base matrices and the binary test designs sampled from them.
//!
//! A base matrix fixes a small grid of Bernoulli densities; the sampled design
//! blows each base entry up into an `(n/R) x (p/C)` binary block. Entries are
//! ones with probability `alpha * W[r][c]` inside the band and are exactly
//! zero outside it (off-band blocks are never sampled). The uncoupled design
//! is the one-block special case, so the two kinds share every code path.
//!
//! The analysis operates on the variance-rescaled matrix `Xt` whose entries
//! are `(X[i][j] - alpha * W[r][c]) / sqrt(n alpha (1-alpha) / R)`. `Xt` is
//! never materialized: within a block it is an affine function of `X`, so
//! products against it reduce to products against the stored one-positions
//! plus per-block sums.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, Purpose};
use rand::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum DesignError {
    #[error("coupling width must be at least 1")]
    ZeroWidth,
    #[error("need at least 2*omega-1 = {min} column blocks, got {lambda}")]
    TooFewColumnBlocks { lambda: usize, min: usize },
    #[error("density alpha must lie strictly inside (0, 1), got {0}")]
    AlphaOutOfRange(f64),
    #[error("per-block density alpha*W = {0} escapes (0, 1)")]
    DegenerateBlockDensity(f64),
    #[error("signal length {p} is not a positive multiple of the {blocks} column blocks")]
    SignalNotBlockAligned { p: usize, blocks: usize },
    #[error("test count {n} is not a positive multiple of the {blocks} row blocks")]
    TestsNotBlockAligned { n: usize, blocks: usize },
}

/// Band-diagonal base matrix with `lambda + omega - 1` row blocks and
/// `lambda` column blocks; column block `c` feeds row blocks `c..c+omega`.
///
/// All in-band entries share one value `W`, the root of
/// `alpha W^2 - W + (1-alpha)/omega = 0` lying in `(0, 1/alpha)`, chosen so
/// that the variance-normalized profile `W (1 - alpha W) / (1 - alpha)`
/// equals `1/omega` on the whole band. Column sums of the normalized profile
/// are then 1, which is what makes the rescaled design's columns have unit
/// total variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseMatrix {
    omega: usize,
    lambda: usize,
    alpha: f64,
    band_value: f64,
}

impl BaseMatrix {
    pub fn new(omega: usize, lambda: usize, alpha: f64) -> Result<Self, DesignError> {
        if omega == 0 {
            return Err(DesignError::ZeroWidth);
        }
        let min = 2 * omega - 1;
        if lambda < min {
            return Err(DesignError::TooFewColumnBlocks { lambda, min });
        }
        if !(alpha > 0.0 && alpha < 1.0) || !alpha.is_finite() {
            return Err(DesignError::AlphaOutOfRange(alpha));
        }
        let disc = 1.0 - 4.0 * alpha * (1.0 - alpha) / omega as f64;
        debug_assert!(disc >= 0.0, "4 alpha (1-alpha) <= 1 for alpha in (0,1)");
        let root = disc.max(0.0).sqrt();
        let band_value = if alpha <= 0.5 {
            (1.0 - root) / (2.0 * alpha)
        } else {
            (1.0 + root) / (2.0 * alpha)
        };
        let density = alpha * band_value;
        if !(density > 0.0 && density < 1.0) {
            return Err(DesignError::DegenerateBlockDensity(density));
        }
        Ok(Self { omega, lambda, alpha, band_value })
    }

    /// The one-block base used by uncoupled designs; its single entry makes
    /// the design plain Bernoulli(`alpha`).
    pub fn uncoupled(alpha: f64) -> Result<Self, DesignError> {
        Self::new(1, 1, alpha)
    }

    pub fn omega(&self) -> usize {
        self.omega
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of row blocks, `lambda + omega - 1`.
    pub fn rows(&self) -> usize {
        self.lambda + self.omega - 1
    }

    /// Number of column blocks, `lambda`.
    pub fn cols(&self) -> usize {
        self.lambda
    }

    pub fn in_band(&self, r: usize, c: usize) -> bool {
        r >= c && r < c + self.omega
    }

    /// Base entry `W[r][c]`.
    pub fn w(&self, r: usize, c: usize) -> f64 {
        if self.in_band(r, c) {
            self.band_value
        } else {
            0.0
        }
    }

    /// Shared value of the in-band entries.
    pub fn band_value(&self) -> f64 {
        self.band_value
    }

    /// Variance-normalized profile entry `W (1 - alpha W) / (1 - alpha)`,
    /// which is `1/omega` on the band and 0 elsewhere.
    pub fn normalized_profile(&self, r: usize, c: usize) -> f64 {
        if self.in_band(r, c) {
            self.profile_value()
        } else {
            0.0
        }
    }

    /// In-band value of the normalized profile, `1/omega`.
    pub fn profile_value(&self) -> f64 {
        1.0 / self.omega as f64
    }

    /// Row blocks reached by column block `c`.
    pub fn band_rows_of_col(&self, c: usize) -> std::ops::Range<usize> {
        debug_assert!(c < self.lambda);
        c..c + self.omega
    }

    /// Column blocks feeding row block `r`.
    pub fn band_cols_of_row(&self, r: usize) -> std::ops::Range<usize> {
        debug_assert!(r < self.rows());
        let lo = r.saturating_sub(self.omega - 1);
        lo..(r + 1).min(self.lambda)
    }

    /// Profile-weighted fold over column blocks: `out[r] = sum_c W~[r][c]
    /// v[c]`. The shared band value is factored out of the sum, and callers
    /// that need bit-identical results across formulations rely on this
    /// exact summation order.
    pub fn profile_fold_cols(&self, per_col: &[f64]) -> Vec<f64> {
        assert_eq!(per_col.len(), self.cols());
        (0..self.rows())
            .map(|r| {
                self.band_cols_of_row(r).map(|c| per_col[c]).sum::<f64>() * self.profile_value()
            })
            .collect()
    }

    /// Profile-weighted fold over row blocks: `out[c] = sum_r W~[r][c] u[r]`.
    pub fn profile_fold_rows(&self, per_row: &[f64]) -> Vec<f64> {
        assert_eq!(per_row.len(), self.rows());
        (0..self.cols())
            .map(|c| {
                self.band_rows_of_col(c).map(|r| per_row[r]).sum::<f64>() * self.profile_value()
            })
            .collect()
    }
}

/// Which of the two design families a sampled matrix belongs to.
///
/// `Uncoupled` ignores the base matrix shape and samples a single dense
/// Bernoulli(`alpha`) block; it is exactly the coupled design with a
/// one-block base, and both kinds share the sampling code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Coupled,
    Uncoupled,
}

/// A sampled binary test design together with its variance-rescaled form.
///
/// The binary matrix is stored as per-row sorted lists of one-positions plus
/// per-row pointers into each column block, so all products cost one pass
/// over the ones plus `O(blocks)` correction terms.
pub struct DesignPair {
    base: BaseMatrix,
    kind: DesignKind,
    n: usize,
    p: usize,
    seed: u64,
    scale: f64,
    ones: Vec<u32>,
    // `row_block_ptr[i * (C+1) + c]` is the offset of block `c` inside row
    // `i`'s slice of `ones`; the row itself spans `row_ptr[i]..row_ptr[i+1]`.
    row_ptr: Vec<usize>,
    row_block_ptr: Vec<u32>,
}

impl DesignPair {
    /// Samples a design for `n` tests over `p` items.
    ///
    /// `n` must be a positive multiple of the base's row blocks and `p` of
    /// its column blocks. For `DesignKind::Uncoupled` the base collapses to
    /// one block and only its `alpha` is used.
    pub fn sample(
        base: &BaseMatrix,
        n: usize,
        p: usize,
        seed: u64,
        kind: DesignKind,
    ) -> Result<Self, DesignError> {
        let base = match kind {
            DesignKind::Coupled => base.clone(),
            DesignKind::Uncoupled => BaseMatrix::uncoupled(base.alpha)?,
        };
        let r_blocks = base.rows();
        let c_blocks = base.cols();
        if n == 0 || n % r_blocks != 0 {
            return Err(DesignError::TestsNotBlockAligned { n, blocks: r_blocks });
        }
        if p == 0 || p % c_blocks != 0 {
            return Err(DesignError::SignalNotBlockAligned { p, blocks: c_blocks });
        }
        let rows_per = n / r_blocks;
        let cols_per = p / c_blocks;
        let density = base.alpha * base.band_value;
        let scale = (n as f64 * base.alpha * (1.0 - base.alpha) / r_blocks as f64).sqrt();

        // Sample block by block, each from its own stream, buffering the rows
        // of the current block row so the final layout is row-major.
        let mut ones = Vec::new();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut row_block_ptr = Vec::with_capacity(n * (c_blocks + 1));
        let mut block_rows: Vec<Vec<u32>> = vec![Vec::new(); rows_per];
        for r in 0..r_blocks {
            for row in block_rows.iter_mut() {
                row.clear();
            }
            let cols = base.band_cols_of_row(r);
            for c in cols {
                let mut rng = stream_rng(seed, Purpose::DesignBlock, r as u64, c as u64);
                let col0 = (c * cols_per) as u32;
                for local in block_rows.iter_mut() {
                    for j in 0..cols_per as u32 {
                        if rng.random::<f64>() < density {
                            local.push(col0 + j);
                        }
                    }
                }
            }
            for local in block_rows.iter() {
                row_ptr.push(ones.len());
                let row_start = ones.len();
                ones.extend_from_slice(local);
                // Column indices are pushed block by block in increasing
                // order, so each row slice is sorted; record block offsets.
                let row_slice = &ones[row_start..];
                let mut cursor = 0usize;
                for c in 0..c_blocks {
                    row_block_ptr.push(cursor as u32);
                    let end = ((c + 1) * cols_per) as u32;
                    while cursor < row_slice.len() && row_slice[cursor] < end {
                        cursor += 1;
                    }
                }
                row_block_ptr.push(row_slice.len() as u32);
            }
        }
        row_ptr.push(ones.len());

        Ok(Self { base, kind, n, p, seed, scale, ones, row_ptr, row_block_ptr })
    }

    pub fn base(&self) -> &BaseMatrix {
        &self.base
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Aspect ratio `n / p`.
    pub fn delta(&self) -> f64 {
        self.n as f64 / self.p as f64
    }

    /// Within-block aspect ratio `(n/R) / (p/C)`.
    pub fn delta_inner(&self) -> f64 {
        self.rows_per_block() as f64 / self.cols_per_block() as f64
    }

    /// Normalization `sqrt(n alpha (1-alpha) / R)` dividing the centered
    /// entries of the rescaled matrix.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rows_per_block(&self) -> usize {
        self.n / self.base.rows()
    }

    pub fn cols_per_block(&self) -> usize {
        self.p / self.base.cols()
    }

    pub fn row_block_of(&self, i: usize) -> usize {
        i / self.rows_per_block()
    }

    pub fn col_block_of(&self, j: usize) -> usize {
        j / self.cols_per_block()
    }

    /// Sorted one-positions of row `i`.
    pub fn row_ones(&self, i: usize) -> &[u32] {
        &self.ones[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// One-positions of row `i` restricted to column block `c`.
    pub fn row_ones_in_block(&self, i: usize, c: usize) -> &[u32] {
        let row = self.row_ones(i);
        let ptr = &self.row_block_ptr[i * (self.base.cols() + 1)..];
        &row[ptr[c] as usize..ptr[c + 1] as usize]
    }

    /// Number of ones stored across the whole matrix.
    pub fn ones_count(&self) -> usize {
        self.ones.len()
    }

    /// All one-positions as `(row, col)` pairs, row-major.
    pub fn iter_ones(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.n).flat_map(move |i| self.row_ones(i).iter().map(move |&j| (i as u32, j)))
    }

    pub fn x_entry(&self, i: usize, j: usize) -> bool {
        self.row_ones_in_block(i, self.col_block_of(j))
            .binary_search(&(j as u32))
            .is_ok()
    }

    /// Rescaled entry `(X[i][j] - alpha W[r][c]) / scale`; exactly 0 off-band.
    pub fn xt_entry(&self, i: usize, j: usize) -> f64 {
        let (r, c) = (self.row_block_of(i), self.col_block_of(j));
        if !self.base.in_band(r, c) {
            return 0.0;
        }
        let x = self.x_entry(i, j) as u8 as f64;
        (x - self.base.alpha * self.base.band_value) / self.scale
    }

    /// Per-block second moment of the rescaled entries, `R W~[r][c] / n`,
    /// laid out row-major over the `R x C` block grid.
    pub fn variance_profile(&self) -> Vec<f64> {
        let (rb, cb) = (self.base.rows(), self.base.cols());
        let mut out = vec![0.0; rb * cb];
        for r in 0..rb {
            for c in self.base.band_cols_of_row(r) {
                out[r * cb + c] = rb as f64 * self.base.profile_value() / self.n as f64;
            }
        }
        out
    }

    fn block_sums(&self, v: &[f64]) -> Vec<f64> {
        let cols_per = self.cols_per_block();
        v.chunks_exact(cols_per).map(|chunk| chunk.iter().sum()).collect()
    }

    fn row_block_sums(&self, u: &[f64]) -> Vec<f64> {
        let rows_per = self.rows_per_block();
        u.chunks_exact(rows_per).map(|chunk| chunk.iter().sum()).collect()
    }

    /// `X v` over the binary matrix.
    pub fn x_times(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.p, "vector length must match item count");
        (0..self.n)
            .map(|i| self.row_ones(i).iter().map(|&j| v[j as usize]).sum())
            .collect()
    }

    /// `X^T u` over the binary matrix.
    pub fn x_transpose_times(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.n, "vector length must match test count");
        let mut out = vec![0.0; self.p];
        for i in 0..self.n {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            for &j in self.row_ones(i) {
                out[j as usize] += ui;
            }
        }
        out
    }

    /// `Xt v` over the rescaled matrix.
    pub fn xt_times(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.p, "vector length must match item count");
        let sums = self.block_sums(v);
        let aw = self.base.alpha * self.base.band_value;
        let rows_per = self.rows_per_block();
        let mut out = Vec::with_capacity(self.n);
        for r in 0..self.base.rows() {
            let shift: f64 = aw * self.base.band_cols_of_row(r).map(|c| sums[c]).sum::<f64>();
            for i in (r * rows_per)..((r + 1) * rows_per) {
                let picked: f64 = self.row_ones(i).iter().map(|&j| v[j as usize]).sum();
                out.push((picked - shift) / self.scale);
            }
        }
        out
    }

    /// `Xt^T u` over the rescaled matrix.
    pub fn xt_transpose_times(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.n, "vector length must match test count");
        let row_sums = self.row_block_sums(u);
        let aw = self.base.alpha * self.base.band_value;
        let cols_per = self.cols_per_block();
        let mut out = vec![0.0; self.p];
        for i in 0..self.n {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            for &j in self.row_ones(i) {
                out[j as usize] += ui;
            }
        }
        for c in 0..self.base.cols() {
            let shift: f64 =
                aw * self.base.band_rows_of_col(c).map(|r| row_sums[r]).sum::<f64>();
            for x in &mut out[(c * cols_per)..((c + 1) * cols_per)] {
                *x = (*x - shift) / self.scale;
            }
        }
        out
    }

    /// `Xt B` for a row-major `p x l` matrix, returning `n x l`.
    pub fn xt_times_mat(&self, b: &[f64], l: usize) -> Vec<f64> {
        assert_eq!(b.len(), self.p * l, "matrix shape must be p x l");
        let cols_per = self.cols_per_block();
        let c_blocks = self.base.cols();
        let mut sums = vec![0.0; c_blocks * l];
        for (j, row) in b.chunks_exact(l).enumerate() {
            let c = j / cols_per;
            for (t, &v) in row.iter().enumerate() {
                sums[c * l + t] += v;
            }
        }
        let aw = self.base.alpha * self.base.band_value;
        let rows_per = self.rows_per_block();
        let mut out = vec![0.0; self.n * l];
        let mut shift = vec![0.0; l];
        for r in 0..self.base.rows() {
            shift.iter_mut().for_each(|x| *x = 0.0);
            for c in self.base.band_cols_of_row(r) {
                for t in 0..l {
                    shift[t] += aw * sums[c * l + t];
                }
            }
            for i in (r * rows_per)..((r + 1) * rows_per) {
                let acc = &mut out[i * l..(i + 1) * l];
                for &j in self.row_ones(i) {
                    let row = &b[j as usize * l..(j as usize + 1) * l];
                    for t in 0..l {
                        acc[t] += row[t];
                    }
                }
                for t in 0..l {
                    acc[t] = (acc[t] - shift[t]) / self.scale;
                }
            }
        }
        out
    }

    /// Restriction of `Xt^T Z` to column block `c`, for a row-major `n x l`
    /// matrix `Z` of which only the rows in the band of `c` are read.
    /// Returns the `(p/C) x l` block row-major.
    pub fn xt_block_transpose_times(&self, c: usize, z: &[f64], l: usize) -> Vec<f64> {
        assert_eq!(z.len(), self.n * l, "matrix shape must be n x l");
        let cols_per = self.cols_per_block();
        let rows_per = self.rows_per_block();
        let col0 = c * cols_per;
        let mut out = vec![0.0; cols_per * l];
        let mut shift = vec![0.0; l];
        let aw = self.base.alpha * self.base.band_value;
        for r in self.base.band_rows_of_col(c) {
            for i in (r * rows_per)..((r + 1) * rows_per) {
                let zi = &z[i * l..(i + 1) * l];
                for &j in self.row_ones_in_block(i, c) {
                    let acc = &mut out[(j as usize - col0) * l..(j as usize - col0 + 1) * l];
                    for t in 0..l {
                        acc[t] += zi[t];
                    }
                }
                for t in 0..l {
                    shift[t] += aw * zi[t];
                }
            }
        }
        for row in out.chunks_exact_mut(l) {
            for t in 0..l {
                row[t] = (row[t] - shift[t]) / self.scale;
            }
        }
        out
    }
}
