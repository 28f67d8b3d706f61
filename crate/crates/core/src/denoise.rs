//! Bayes-optimal posterior-mean denoisers for the two priors, with exact
//! derivatives for the correction terms of the iterative recovery loops.
//!
//! Both denoisers see an observation of the form `signal-strength * truth +
//! noise`, where the strength and the noise variance coincide (the effective
//! channels the recovery loops produce are of exactly this calibrated form).
//! For the Bernoulli prior the posterior mean collapses to a logistic in the
//! observation; for the categorical prior it is a softmax over per-category
//! quadratics. Everything is evaluated through exponent differences, never
//! density ratios, so strengths far beyond the overflow range of `exp` are
//! handled exactly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Signal strengths below this are clamped before evaluating the posterior;
/// protects against zero or denormal strengths produced by fully converged
/// noiseless runs.
pub const STRENGTH_FLOOR: f64 = 1e-12;

/// Strengths above this are clamped so `s - strength/2` stays finite.
pub const STRENGTH_CEIL: f64 = 1e300;

/// Ridge added to effective-noise covariances before factorization.
pub const COVARIANCE_RIDGE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum DenoiseError {
    #[error("prior probability must lie in [0, 1], got {0}")]
    PriorOutOfRange(f64),
    #[error("category probabilities must be nonnegative and sum to 1, got sum {0}")]
    BadCategoricalPrior(f64),
    #[error("effective noise covariance is not positive definite after regularization")]
    NotPositiveDefinite,
    #[error("expected a length-{want} vector, got {got}")]
    DimensionMismatch { want: usize, got: usize },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Posterior mean of a `{0,1}` variable with prior inclusion probability
/// `pi`, observed through the calibrated Gaussian channel
/// `s = strength * truth + sqrt(strength) * g`.
///
/// The likelihood ratio of the two Gaussians reduces the posterior to
/// `sigmoid(logit(pi) + s - strength/2)`, which is the form used here; the
/// derivative in `s` is then `f (1 - f)`.
#[derive(Debug, Clone, Copy)]
pub struct BernoulliDenoiser {
    pi: f64,
    logit_pi: f64,
    degenerate: bool,
}

impl BernoulliDenoiser {
    pub fn new(pi: f64) -> Result<Self, DenoiseError> {
        if !(0.0..=1.0).contains(&pi) || !pi.is_finite() {
            return Err(DenoiseError::PriorOutOfRange(pi));
        }
        let degenerate = pi == 0.0 || pi == 1.0;
        let logit_pi = if degenerate { 0.0 } else { (pi / (1.0 - pi)).ln() };
        Ok(Self { pi, logit_pi, degenerate })
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    fn exponent(&self, s: f64, strength: f64) -> f64 {
        debug_assert!(strength >= 0.0 && !strength.is_nan(), "strength must be nonnegative");
        let strength = strength.clamp(STRENGTH_FLOOR, STRENGTH_CEIL);
        self.logit_pi + s - 0.5 * strength
    }

    /// `E[truth | observation s]`, in `(0, 1)` for interior priors.
    pub fn posterior_mean(&self, s: f64, strength: f64) -> f64 {
        if self.degenerate {
            return self.pi;
        }
        sigmoid(self.exponent(s, strength))
    }

    /// Derivative of the posterior mean in `s`.
    pub fn posterior_deriv(&self, s: f64, strength: f64) -> f64 {
        if self.degenerate {
            return 0.0;
        }
        let f = sigmoid(self.exponent(s, strength));
        f * (1.0 - f)
    }

    /// Both at once; the loops need the pair for every coordinate.
    pub fn mean_and_deriv(&self, s: f64, strength: f64) -> (f64, f64) {
        if self.degenerate {
            return (self.pi, 0.0);
        }
        let f = sigmoid(self.exponent(s, strength));
        (f, f * (1.0 - f))
    }
}

/// Posterior mean of a one-hot row with prior `Categorical(pi)` observed
/// through `s = truth + g`, `g ~ N(0, T)`.
#[derive(Debug, Clone)]
pub struct CategoricalDenoiser {
    pi: Vec<f64>,
    log_pi: Vec<f64>,
}

impl CategoricalDenoiser {
    pub fn new(pi: Vec<f64>) -> Result<Self, DenoiseError> {
        let sum: f64 = pi.iter().sum();
        if pi.is_empty() || pi.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
            return Err(DenoiseError::BadCategoricalPrior(sum));
        }
        let log_pi = pi.iter().map(|&x| x.ln()).collect();
        Ok(Self { pi, log_pi })
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn categories(&self) -> usize {
        self.pi.len()
    }

    /// Factorizes the effective-noise covariance once so the posterior can
    /// be evaluated for many observations sharing it. `t` gets a ridge of
    /// `COVARIANCE_RIDGE` before the Cholesky factorization.
    pub fn channel(&self, t: &DMatrix<f64>) -> Result<CategoricalPosterior<'_>, DenoiseError> {
        let l = self.categories();
        if t.nrows() != l || t.ncols() != l {
            return Err(DenoiseError::DimensionMismatch { want: l, got: t.nrows() });
        }
        let mut reg = t.clone();
        for i in 0..l {
            reg[(i, i)] += COVARIANCE_RIDGE;
        }
        let chol = Cholesky::new(reg).ok_or(DenoiseError::NotPositiveDefinite)?;
        Ok(CategoricalPosterior { denoiser: self, chol })
    }
}

/// A categorical denoiser bound to one factorized noise covariance.
pub struct CategoricalPosterior<'a> {
    denoiser: &'a CategoricalDenoiser,
    chol: Cholesky<f64, Dyn>,
}

impl CategoricalPosterior<'_> {
    pub fn categories(&self) -> usize {
        self.denoiser.categories()
    }

    fn weights_and_solves(&self, s: &[f64]) -> (Vec<f64>, Vec<DVector<f64>>) {
        let l = self.categories();
        assert_eq!(s.len(), l, "observation length must match category count");
        // Per category: w_l = log pi_l - (e_l - s)' K (e_l - s) / 2 with
        // K the regularized inverse covariance; the solves are reused by the
        // Jacobian below.
        let mut log_w = vec![f64::NEG_INFINITY; l];
        let mut solves = vec![DVector::zeros(l); l];
        for a in 0..l {
            if self.denoiser.pi[a] == 0.0 {
                continue;
            }
            let mut d = DVector::from_column_slice(s);
            d.neg_mut();
            d[a] += 1.0;
            let z = self.chol.solve(&d);
            let q = d.dot(&z);
            log_w[a] = self.denoiser.log_pi[a] - 0.5 * q;
            solves[a] = z;
        }
        let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut f: Vec<f64> = log_w.iter().map(|&w| (w - m).exp()).collect();
        let total: f64 = f.iter().sum();
        for x in &mut f {
            *x /= total;
        }
        (f, solves)
    }

    /// Posterior probabilities of the categories; a point in the simplex.
    pub fn mean(&self, s: &[f64]) -> DVector<f64> {
        let (f, _) = self.weights_and_solves(s);
        DVector::from_vec(f)
    }

    /// Posterior mean together with its Jacobian in `s`.
    ///
    /// Row `a` of the Jacobian is `f_a (z_a - zbar)'` where `z_a = K (e_a -
    /// s)` and `zbar` is the posterior average of the `z_a`; this is the
    /// product of the posterior covariance with `K`, assembled without ever
    /// forming `K` itself.
    pub fn mean_and_jacobian(&self, s: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let l = self.categories();
        let (f, solves) = self.weights_and_solves(s);
        let mut zbar = DVector::zeros(l);
        for a in 0..l {
            if f[a] > 0.0 {
                zbar.axpy(f[a], &solves[a], 1.0);
            }
        }
        let mut jac = DMatrix::zeros(l, l);
        for a in 0..l {
            if f[a] == 0.0 {
                continue;
            }
            for b in 0..l {
                jac[(a, b)] = f[a] * (solves[a][b] - zbar[b]);
            }
        }
        (DVector::from_vec(f), jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::GaussHermite;

    #[test]
    fn prior_validation() {
        assert!(BernoulliDenoiser::new(-0.1).is_err());
        assert!(BernoulliDenoiser::new(1.1).is_err());
        assert!(BernoulliDenoiser::new(f64::NAN).is_err());
        assert!(CategoricalDenoiser::new(vec![0.5, 0.4]).is_err());
        assert!(CategoricalDenoiser::new(vec![-0.1, 1.1]).is_err());
        assert!(CategoricalDenoiser::new(vec![]).is_err());
    }

    #[test]
    fn symmetric_point_returns_half() {
        let den = BernoulliDenoiser::new(0.5).unwrap();
        for &strength in &[0.1, 1.0, 9.0, 100.0] {
            let f = den.posterior_mean(0.5 * strength, strength);
            assert!((f - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_density_ratio_form() {
        // The logistic form must agree with the two-Gaussian likelihood
        // ratio computed from raw normal densities where those are finite.
        let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for &pi in &[0.1, 0.3, 0.5, 0.9] {
            let den = BernoulliDenoiser::new(pi).unwrap();
            for &chi in &[0.5, 1.0, 2.0, 3.0] {
                let strength = chi * chi;
                for &s in &[-4.0, -1.0, 0.0, 0.7, 2.5, 6.0] {
                    let num = pi * phi((s - strength) / chi);
                    let den_val = num + (1.0 - pi) * phi(s / chi);
                    let want = num / den_val;
                    let got = den.posterior_mean(s, strength);
                    assert!((got - want).abs() < 1e-12, "pi={pi} chi={chi} s={s}");
                }
            }
        }
        // Spot value: s=0, chi=1, pi=0.3.
        let den = BernoulliDenoiser::new(0.3).unwrap();
        let want = 0.3 * phi(-1.0) / (0.3 * phi(-1.0) + 0.7 * phi(0.0));
        assert!((den.posterior_mean(0.0, 1.0) - want).abs() < 1e-14);
    }

    #[test]
    fn saturates_at_extreme_observations() {
        let den = BernoulliDenoiser::new(0.3).unwrap();
        assert!(den.posterior_mean(60.0, 1.0) > 1.0 - 1e-12);
        assert!(den.posterior_mean(-60.0, 1.0) < 1e-12);
        // Far beyond exp overflow, the exponent difference still works.
        assert_eq!(den.posterior_mean(1e250, 1e250), 1.0);
        assert_eq!(den.posterior_mean(0.0, 1e250), 0.0);
        assert_eq!(den.posterior_deriv(1e250, 1e250), 0.0);
    }

    #[test]
    fn monotone_in_observation_and_bounded() {
        let den = BernoulliDenoiser::new(0.2).unwrap();
        let mut prev = 0.0;
        for k in 0..100 {
            let s = -10.0 + 0.2 * k as f64;
            let f = den.posterior_mean(s, 2.0);
            assert!(f > 0.0 && f < 1.0);
            assert!(f > prev, "posterior must increase in s");
            assert!(den.posterior_deriv(s, 2.0) > 0.0);
            prev = f;
        }
    }

    #[test]
    fn degenerate_priors_are_constant() {
        for &pi in &[0.0, 1.0] {
            let den = BernoulliDenoiser::new(pi).unwrap();
            for &s in &[-5.0, 0.0, 5.0] {
                assert_eq!(den.posterior_mean(s, 1.0), pi);
                assert_eq!(den.posterior_deriv(s, 1.0), 0.0);
            }
        }
    }

    #[test]
    fn zero_strength_is_clamped_not_rejected() {
        let den = BernoulliDenoiser::new(0.3).unwrap();
        let f = den.posterior_mean(1.0, 0.0);
        assert!(f.is_finite());
        // At the floor the shift strength/2 is negligible.
        let expect = 1.0 / (1.0 + ((0.7f64 / 0.3).ln() - 1.0).exp());
        assert!((f - expect).abs() < 1e-9);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let h = 1e-5;
        for &pi in &[0.1, 0.3, 0.5, 0.9] {
            let den = BernoulliDenoiser::new(pi).unwrap();
            for &chi in &[0.3, 1.0, 2.0, 5.0] {
                let strength = chi * chi;
                for k in 0..21 {
                    let s = -10.0 + k as f64;
                    let fd = (den.posterior_mean(s + h, strength)
                        - den.posterior_mean(s - h, strength))
                        / (2.0 * h);
                    let got = den.posterior_deriv(s, strength);
                    let denom = fd.abs().max(1e-12);
                    assert!(
                        (got - fd).abs() / denom < 1e-6,
                        "pi={pi} chi={chi} s={s}: {got} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn derivative_at_symmetric_point_is_quarter() {
        // f = 1/2 there, so f(1-f) = 1/4 independent of the strength; the
        // finite-difference check pins this against any alternative scaling.
        let den = BernoulliDenoiser::new(0.5).unwrap();
        for &chi in &[0.5, 1.0, 3.0] {
            let strength = chi * chi;
            let s = 0.5 * strength;
            let got = den.posterior_deriv(s, strength);
            assert!((got - 0.25).abs() < 1e-14);
            let h = 1e-6;
            let fd = (den.posterior_mean(s + h, strength) - den.posterior_mean(s - h, strength))
                / (2.0 * h);
            assert!((fd - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn posterior_mean_square_identity() {
        // For the Bayes denoiser on the calibrated channel,
        // E[truth * f] = E[f^2]; both sides by Gauss-Hermite quadrature.
        let rule = GaussHermite::new(61);
        for &pi in &[0.1, 0.3, 0.5] {
            let den = BernoulliDenoiser::new(pi).unwrap();
            for &strength in &[0.25f64, 1.0, 4.0] {
                let chi = strength.sqrt();
                let mean_truth_f =
                    pi * rule.expect(|g| den.posterior_mean(strength + chi * g, strength));
                let mean_f_sq = pi
                    * rule.expect(|g| den.posterior_mean(strength + chi * g, strength).powi(2))
                    + (1.0 - pi)
                        * rule.expect(|g| den.posterior_mean(chi * g, strength).powi(2));
                assert!(
                    (mean_truth_f - mean_f_sq).abs() < 1e-8,
                    "pi={pi} strength={strength}: {mean_truth_f} vs {mean_f_sq}"
                );
            }
        }
    }

    fn eye(l: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::identity(l, l) * scale
    }

    #[test]
    fn one_hot_prior_ignores_observation() {
        let den = CategoricalDenoiser::new(vec![1.0, 0.0, 0.0]).unwrap();
        let post = den.channel(&eye(3, 0.5)).unwrap();
        let (f, jac) = post.mean_and_jacobian(&[-3.0, 10.0, 0.2]);
        assert_eq!(f.as_slice(), &[1.0, 0.0, 0.0]);
        assert!(jac.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn symmetric_observation_gives_uniform_posterior() {
        let den = CategoricalDenoiser::new(vec![0.25; 4]).unwrap();
        let post = den.channel(&eye(4, 0.7)).unwrap();
        for &c in &[-1.0, 0.0, 0.25, 2.0] {
            let f = post.mean(&[c; 4]);
            for a in 0..4 {
                assert!((f[a] - 0.25).abs() < 1e-14);
            }
        }
        // The Jacobian there has one diagonal value and one off-diagonal
        // value by symmetry.
        let (_, jac) = post.mean_and_jacobian(&[0.3; 4]);
        for a in 0..4 {
            assert!((jac[(a, a)] - jac[(0, 0)]).abs() < 1e-13);
            for b in 0..4 {
                if a != b {
                    assert!((jac[(a, b)] - jac[(0, 1)]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn posterior_stays_in_simplex() {
        let den = CategoricalDenoiser::new(vec![0.6, 0.3, 0.1]).unwrap();
        // A correlated, poorly conditioned covariance.
        let t = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.9, 0.8, 0.9, 1.0, 0.9, 0.8, 0.9, 1.001],
        );
        let post = den.channel(&t).unwrap();
        for &s in &[[-5.0, 0.0, 5.0], [100.0, 99.0, 98.0], [0.0, 0.0, 0.0]] {
            let f = post.mean(&s);
            let sum: f64 = f.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(f.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn two_category_posterior_reduces_to_logistic() {
        // With isotropic noise the two-category posterior is the 0/1
        // posterior of the difference coordinate: strength 2/tau^2 and
        // observation (s_1 - s_2 + 1)/tau^2.
        for &pi1 in &[0.2, 0.5, 0.7] {
            let cat = CategoricalDenoiser::new(vec![pi1, 1.0 - pi1]).unwrap();
            let scalar = BernoulliDenoiser::new(pi1).unwrap();
            for &tau2 in &[0.3, 1.0, 2.5] {
                let post = cat.channel(&eye(2, tau2)).unwrap();
                for &(s1, s2) in &[(0.0, 0.0), (1.3, -0.4), (-2.0, 2.0), (0.9, 0.1)] {
                    let f = post.mean(&[s1, s2]);
                    let want =
                        scalar.posterior_mean((s1 - s2 + 1.0) / tau2, 2.0 / tau2);
                    // The ridge shifts tau^2 by 1e-10; allow for it.
                    assert!(
                        (f[0] - want).abs() < 1e-8,
                        "pi={pi1} tau2={tau2} s=({s1},{s2}): {} vs {want}",
                        f[0]
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let den = CategoricalDenoiser::new(vec![0.5, 0.3, 0.2]).unwrap();
        let t = DMatrix::from_row_slice(
            3,
            3,
            &[0.8, 0.2, -0.1, 0.2, 0.6, 0.15, -0.1, 0.15, 0.9],
        );
        let post = den.channel(&t).unwrap();
        let h = 1e-6;
        for &s in &[[0.0, 0.0, 0.0], [1.0, -0.5, 0.3], [-2.0, 1.5, 0.7], [3.0, 3.0, -3.0]] {
            let (_, jac) = post.mean_and_jacobian(&s);
            for b in 0..3 {
                let mut hi = s;
                hi[b] += h;
                let mut lo = s;
                lo[b] -= h;
                let fhi = post.mean(&hi);
                let flo = post.mean(&lo);
                for a in 0..3 {
                    let fd = (fhi[a] - flo[a]) / (2.0 * h);
                    let denom = fd.abs().max(1e-5);
                    assert!(
                        (jac[(a, b)] - fd).abs() / denom < 1e-5,
                        "entry ({a},{b}) at {s:?}: {} vs {fd}",
                        jac[(a, b)]
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_symmetric_under_isotropic_noise() {
        // With T = tau^2 I the Jacobian is the posterior covariance over
        // tau^2, hence symmetric PSD; with general T it need not be
        // symmetric, which is why the general test above goes through
        // finite differences instead.
        let den = CategoricalDenoiser::new(vec![0.4, 0.35, 0.25]).unwrap();
        let post = den.channel(&eye(3, 0.6)).unwrap();
        let (f, jac) = post.mean_and_jacobian(&[0.4, -0.2, 0.9]);
        for a in 0..3 {
            for b in 0..3 {
                assert!((jac[(a, b)] - jac[(b, a)]).abs() < 1e-12);
                let want = (if a == b { f[a] } else { 0.0 } - f[a] * f[b]) / 0.6;
                assert!((jac[(a, b)] - want).abs() < 1e-8);
            }
        }
        // Diagonal entries of a PSD matrix are nonnegative.
        for a in 0..3 {
            assert!(jac[(a, a)] >= 0.0);
        }
    }

    #[test]
    fn channel_rejects_bad_covariances() {
        let den = CategoricalDenoiser::new(vec![0.5, 0.5]).unwrap();
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(den.channel(&bad), Err(DenoiseError::NotPositiveDefinite)));
        let wrong = DMatrix::identity(3, 3);
        assert!(matches!(den.channel(&wrong), Err(DenoiseError::DimensionMismatch { .. })));
        // Singular but PSD passes thanks to the ridge.
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(den.channel(&singular).is_ok());
    }
}
