//! Gaussian quadrature rules used by the fixed-point and information
//! integrals.
//!
//! Nodes and weights come from the Golub-Welsch eigendecomposition of the
//! three-term recurrence's Jacobi matrix, so arbitrary orders are available
//! without tabulated constants. The Hermite rule is exposed directly in
//! standard-normal form (nodes scaled by sqrt(2), weights summing to one).

use nalgebra::{DMatrix, SymmetricEigen};

/// Running sum with Kahan compensation; the integrals here add thousands of
/// terms of wildly different magnitude and plain summation loses digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Nodes and weights of an `n`-point rule from the symmetric tridiagonal
/// Jacobi matrix with the given diagonal and off-diagonal, scaled so weights
/// sum to `mu0` (the zeroth moment of the weight function). Returned sorted
/// by node.
fn golub_welsch(diag: &[f64], offdiag: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    assert_eq!(offdiag.len(), n - 1);
    let mut jacobi = DMatrix::zeros(n, n);
    for (i, &d) in diag.iter().enumerate() {
        jacobi[(i, i)] = d;
    }
    for (i, &b) in offdiag.iter().enumerate() {
        jacobi[(i, i + 1)] = b;
        jacobi[(i + 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let first = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Quadrature for standard-normal expectations: `E[f(Z)] ~ sum_i p_i f(z_i)`
/// with probabilities `p_i` summing to one.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    probs: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        // Hermite recurrence (weight exp(-x^2)): off-diagonal sqrt(k/2).
        let diag = vec![0.0; n];
        let offdiag: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
        // mu0 = sqrt(pi) cancels when normalizing to probabilities, so use 1.
        let (raw_nodes, probs) = golub_welsch(&diag, &offdiag, 1.0);
        let nodes = raw_nodes.iter().map(|x| x * std::f64::consts::SQRT_2).collect();
        Self { nodes, probs }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Standard-normal abscissae, ascending.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Matching probabilities, summing to one.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = KahanSum::new();
        for (&z, &p) in self.nodes.iter().zip(&self.probs) {
            acc.add(p * f(z));
        }
        acc.value()
    }
}

/// Legendre rule on `[-1, 1]`, mapped affinely onto requested intervals.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "rule needs at least one node");
        let diag = vec![0.0; n];
        let offdiag: Vec<f64> =
            (1..n).map(|k| k as f64 / (4.0 * (k * k) as f64 - 1.0).sqrt()).collect();
        let (nodes, weights) = golub_welsch(&diag, &offdiag, 2.0);
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut acc = KahanSum::new();
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            acc.add(w * f(mid + half * x));
        }
        half * acc.value()
    }

    /// Composite rule: `[a, b]` split into `panels` equal pieces, each
    /// integrated by this rule, all accumulated with compensation.
    pub fn integrate_panels(
        &self,
        a: f64,
        b: f64,
        panels: usize,
        mut f: impl FnMut(f64) -> f64,
    ) -> f64 {
        assert!(panels >= 1, "need at least one panel");
        let width = (b - a) / panels as f64;
        let mut acc = KahanSum::new();
        for k in 0..panels {
            let lo = a + k as f64 * width;
            acc.add(self.integrate(lo, lo + width, &mut f));
        }
        acc.value()
    }
}
