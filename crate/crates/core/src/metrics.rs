//! Empirical quality measures shared by the recovery loops, the baselines,
//! and the drivers.

use nalgebra::DMatrix;

/// Mean squared error between two equal-length vectors.
pub fn mse(truth: &[f64], estimate: &[f64]) -> f64 {
    assert_eq!(truth.len(), estimate.len());
    assert!(!truth.is_empty());
    truth
        .iter()
        .zip(estimate)
        .map(|(t, e)| (t - e) * (t - e))
        .sum::<f64>()
        / truth.len() as f64
}

/// Squared correlation `<t, e>^2 / (|t|^2 |e|^2)`; zero if either side is
/// identically zero.
pub fn normalized_sq_correlation(truth: &[f64], estimate: &[f64]) -> f64 {
    assert_eq!(truth.len(), estimate.len());
    let (mut tt, mut ee, mut te) = (0.0, 0.0, 0.0);
    for (t, e) in truth.iter().zip(estimate) {
        tt += t * t;
        ee += e * e;
        te += t * e;
    }
    if tt == 0.0 || ee == 0.0 {
        return 0.0;
    }
    te * te / (tt * ee)
}

/// Average posterior mass the row estimates place on the true categories;
/// the empirical counterpart of the recursion's predicted overlap.
pub fn pooled_mean_correlation(categories: &[usize], estimate: &DMatrix<f64>) -> f64 {
    assert_eq!(categories.len(), estimate.nrows());
    assert!(!categories.is_empty());
    categories
        .iter()
        .enumerate()
        .map(|(i, &c)| estimate[(i, c)])
        .sum::<f64>()
        / categories.len() as f64
}

/// False positive and false negative rates of a flagging decision against
/// a `{0,1}` truth. Empty classes contribute a zero rate.
pub fn fpr_fnr(truth: &[f64], flagged: &[bool]) -> (f64, f64) {
    assert_eq!(truth.len(), flagged.len());
    let (mut fp, mut negatives, mut fn_, mut positives) = (0usize, 0usize, 0usize, 0usize);
    for (&t, &f) in truth.iter().zip(flagged) {
        if t > 0.5 {
            positives += 1;
            if !f {
                fn_ += 1;
            }
        } else {
            negatives += 1;
            if f {
                fp += 1;
            }
        }
    }
    let fpr = if negatives == 0 { 0.0 } else { fp as f64 / negatives as f64 };
    let fnr = if positives == 0 { 0.0 } else { fn_ as f64 / positives as f64 };
    (fpr, fnr)
}

/// Fraction of disagreeing entries between two `{0,1}` vectors.
pub fn hamming_rate(truth: &[f64], decision: &[f64]) -> f64 {
    assert_eq!(truth.len(), decision.len());
    assert!(!truth.is_empty());
    truth
        .iter()
        .zip(decision)
        .filter(|&(&t, &d)| (t > 0.5) != (d > 0.5))
        .count() as f64
        / truth.len() as f64
}

/// Fraction of rows whose decided category differs from the truth.
pub fn categorical_error_rate(categories: &[usize], decided: &[usize]) -> f64 {
    assert_eq!(categories.len(), decided.len());
    assert!(!categories.is_empty());
    categories.iter().zip(decided).filter(|(a, b)| a != b).count() as f64
        / categories.len() as f64
}

/// Standard error of an empirical rate out of `trials` independent draws
/// with success probability `rate`.
pub fn binomial_stderr(rate: f64, trials: usize) -> f64 {
    assert!(trials > 0);
    assert!((0.0..=1.0).contains(&rate));
    (rate * (1.0 - rate) / trials as f64).sqrt()
}
