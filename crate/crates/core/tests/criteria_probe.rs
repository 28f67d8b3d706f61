// Temporary probe for the acceptance operating points; deleted before finish.
use nalgebra::DMatrix;
use scamp::amp::{
    argmax_categories, run_matrix_sc_amp, run_sc_amp_qgt, AmpConfig,
};
use scamp::baselines::{design_rows, lp_estimate};
use scamp::design::{BaseMatrix, DesignKind, DesignPair};
use scamp::metrics;
use scamp::model::{
    observe_pooled, observe_qgt, rescale_pooled, rescale_qgt, sample_pooled_signal,
    sample_qgt_signal, BlockSumMode, NoiseScaling,
};
use scamp::potential::{scan_potential, ScanConfig};
use scamp::state_evolution::{
    iterate_cov_se, iterate_scalar_se, se_predict_metrics, CovSeConfig, ScalarSeConfig,
};

fn sc_tests(delta: f64, p: usize, r: usize) -> usize {
    ((delta * p as f64 / r as f64).round() as usize).max(1) * r
}

#[test]
#[ignore]
fn probe_c2_pooled_amp() {
    let base = BaseMatrix::new(6, 40, 0.5).unwrap();
    let pi = vec![1.0 / 3.0; 3];
    let p = 20000;
    let n = sc_tests(0.36, p, 45);
    println!("n={n} delta_actual={}", n as f64 / p as f64);
    let noise_cov = DMatrix::<f64>::zeros(3, 3);
    let mut corrs = Vec::new();
    for k in 0..10u64 {
        let seed = 2000 + 31 * k;
        let design = DesignPair::sample(&base, n, p, seed, DesignKind::Coupled).unwrap();
        let b = sample_pooled_signal(p, &pi, seed).unwrap();
        let inst = observe_pooled(
            &design,
            pi.clone(),
            b.clone(),
            0.0,
            NoiseScaling::RescaledVariance,
            seed,
        )
        .unwrap();
        let yt = rescale_pooled(&design, &inst, BlockSumMode::TrueCounts);
        let ytm = DMatrix::from_row_slice(n, 3, &yt);
        let cats: Vec<usize> = b
            .chunks_exact(3)
            .map(|row| row.iter().position(|&v| v == 1.0).unwrap())
            .collect();
        let run = run_matrix_sc_amp(&design, &ytm, &pi, &noise_cov, &AmpConfig::default(), Some(&cats))
            .unwrap();
        let corr = metrics::pooled_mean_correlation(&cats, &run.state.b_hat);
        let err = metrics::categorical_error_rate(&cats, &argmax_categories(&run.state.b_hat));
        println!(
            "seed={seed}: corr={corr:.6} cat_err={err:.6} iters={} conv={}",
            run.iterations, run.converged
        );
        corrs.push(corr);
    }
    let mean = corrs.iter().sum::<f64>() / corrs.len() as f64;
    println!("mean corr = {mean:.6}");
}

#[test]
#[ignore]
fn probe_c3_pooled_se() {
    let base = BaseMatrix::new(6, 40, 0.5).unwrap();
    let pi = vec![1.0 / 3.0; 3];
    let noise_cov = DMatrix::<f64>::zeros(3, 3);
    for delta in [0.25, 0.20] {
        let t0 = std::time::Instant::now();
        let run = iterate_cov_se(&base, delta, &pi, &noise_cov, &CovSeConfig::default()).unwrap();
        let mse = run.psi.iter().map(|m| m.trace()).sum::<f64>() / run.psi.len() as f64;
        println!(
            "delta={delta}: overlap={:.6} mse={mse:.6} iters={} conv={} elapsed={:?}",
            run.overlap,
            run.iterations(),
            run.converged,
            t0.elapsed()
        );
    }
}

#[test]
#[ignore]
fn probe_c4_se_amp_agreement() {
    let base = BaseMatrix::new(3, 20, 0.5).unwrap();
    let (pi, p) = (0.3, 4000);
    let n = sc_tests(0.5, p, 22);
    let delta_actual = n as f64 / p as f64;
    let se = iterate_scalar_se(
        &base,
        delta_actual,
        pi,
        0.0,
        &ScalarSeConfig { k_max: 50, tol: 0.0 },
    )
    .unwrap();
    let se_mse = se.mse_at(50.min(se.iterations()));
    let cfg = AmpConfig { max_iters: 50, tol: 1e-300, ..Default::default() };
    let mut worst: f64 = 0.0;
    for k in 0..5u64 {
        let seed = 3000 + 31 * k;
        let design = DesignPair::sample(&base, n, p, seed, DesignKind::Coupled).unwrap();
        let beta = sample_qgt_signal(p, pi, seed).unwrap();
        let inst =
            observe_qgt(&design, pi, beta.clone(), 0.0, NoiseScaling::RescaledVariance, seed)
                .unwrap();
        let yt = rescale_qgt(&design, &inst, BlockSumMode::TrueCounts);
        let amp = run_sc_amp_qgt(&design, &yt, pi, 0.0, &cfg, Some(&beta)).unwrap();
        let emp = metrics::mse(&beta, &amp.state.beta_hat);
        println!("seed={seed}: empirical mse={emp:.3e} |diff|={:.3e}", (emp - se_mse).abs());
        worst = worst.max((emp - se_mse).abs());
    }
    println!("se mse at k=50: {se_mse:.3e}; worst diff {worst:.3e}");
}

#[test]
#[ignore]
fn probe_c5_triples() {
    let base = BaseMatrix::uncoupled(0.5).unwrap();
    for &pi in &[0.1, 0.3, 0.5] {
        for &delta in &[0.2, 0.35, 0.5] {
            for &sigma2 in &[1e-2, 1e-3] {
                let run =
                    iterate_scalar_se(&base, delta, pi, sigma2, &ScalarSeConfig::default())
                        .unwrap();
                let fixed = run.final_state().psi[0];
                let scan = scan_potential(delta, pi, sigma2, &ScanConfig::default()).unwrap();
                match scan.largest_stationary() {
                    Some(st) => println!(
                        "pi={pi} delta={delta} sigma2={sigma2}: fixed={fixed:.9e} stationary={st:.9e} diff={:.3e}",
                        (st - fixed).abs()
                    ),
                    None => println!(
                        "pi={pi} delta={delta} sigma2={sigma2}: fixed={fixed:.9e} NO STATIONARY"
                    ),
                }
            }
        }
    }
}

#[test]
#[ignore]
fn probe_c6_minimizer() {
    for delta in [0.02, 0.05] {
        let scan = scan_potential(delta, 0.1, 1e-30, &ScanConfig::default()).unwrap();
        println!(
            "delta={delta}: argmin={} min={} largest_stationary={:?} count={}",
            scan.argmin,
            scan.min_value,
            scan.largest_stationary(),
            scan.stationary.len()
        );
    }
}

#[test]
#[ignore]
fn probe_c7_rate_bound() {
    let (delta, dd) = (0.3, 0.1);
    let expo = 2.0 - 2.0 * dd / delta;
    for &pi in &[0.1, 0.3] {
        for k in 0..7 {
            let sigma = 10f64.powf(-3.0 - 0.5 * k as f64);
            let sigma2 = sigma * sigma;
            let scan = scan_potential(delta, pi, sigma2, &ScanConfig::default()).unwrap();
            let bound = 3.5 * delta * sigma.powf(expo);
            println!(
                "pi={pi} sigma={sigma:.3e}: argmin={:.6e} bound={bound:.6e} ok={}",
                scan.argmin,
                scan.argmin < bound
            );
        }
    }
}

#[test]
#[ignore]
fn probe_c8_rates() {
    let (pi, p, delta) = (0.3, 20000usize, 0.46);
    let n = sc_tests(delta, p, 1);
    let base = BaseMatrix::uncoupled(0.5).unwrap();
    let raw_var = p as f64 * 0.0016;
    let zetas: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();

    let mut sigma2_eff = None;
    let mut fp = vec![0u64; zetas.len()];
    let mut fne = vec![0u64; zetas.len()];
    let mut neg = 0u64;
    let mut pos = 0u64;
    let t0 = std::time::Instant::now();
    for k in 0..10u64 {
        let seed = 5000 + 31 * k;
        let design = DesignPair::sample(&base, n, p, seed, DesignKind::Uncoupled).unwrap();
        let beta = sample_qgt_signal(p, pi, seed).unwrap();
        let inst =
            observe_qgt(&design, pi, beta.clone(), raw_var, NoiseScaling::RawVariance, seed)
                .unwrap();
        sigma2_eff.get_or_insert(inst.sigma2);
        let yt = rescale_qgt(&design, &inst, BlockSumMode::TrueCounts);
        let amp = run_sc_amp_qgt(&design, &yt, pi, inst.sigma2, &AmpConfig::default(), Some(&beta))
            .unwrap();
        let hamming = metrics::hamming_rate(
            &beta,
            &scamp::amp::quantize_threshold_half(&amp.state.beta_hat),
        );
        let mse = metrics::mse(&beta, &amp.state.beta_hat);
        println!(
            "seed={seed}: iters={} conv={} mse={mse:.4e} hamming={hamming:.4e} ham_le_4mse={}",
            amp.iterations,
            amp.converged,
            hamming <= 4.0 * mse
        );
        for (j, &b) in beta.iter().enumerate() {
            let est = amp.state.beta_hat[j];
            if b > 0.5 {
                pos += 1;
                for (zi, &z) in zetas.iter().enumerate() {
                    if est <= z {
                        fne[zi] += 1;
                    }
                }
            } else {
                neg += 1;
                for (zi, &z) in zetas.iter().enumerate() {
                    if est > z {
                        fp[zi] += 1;
                    }
                }
            }
        }
    }
    println!("10 seeds in {:?}", t0.elapsed());
    let sigma2_eff = sigma2_eff.unwrap();
    println!("rescaled sigma2 = {sigma2_eff}");
    let se = iterate_scalar_se(&base, delta, pi, sigma2_eff, &ScalarSeConfig::default()).unwrap();
    println!("se fixed point mse = {:.6e} iters={}", se.mse_at(se.iterations()), se.iterations());
    for (zi, &z) in zetas.iter().enumerate() {
        let m = se_predict_metrics(se.final_state(), pi, z);
        let emp_fpr = fp[zi] as f64 / neg as f64;
        let emp_fnr = fne[zi] as f64 / pos as f64;
        let se_fpr = (m.fpr * (1.0 - m.fpr) / neg as f64).sqrt();
        let se_fnr = (m.fnr * (1.0 - m.fnr) / pos as f64).sqrt();
        let z_fpr = (emp_fpr - m.fpr).abs() / se_fpr;
        let z_fnr = (emp_fnr - m.fnr).abs() / se_fnr;
        println!(
            "zeta={z:.1}: fpr emp={emp_fpr:.4e} pred={:.4e} z={z_fpr:.2} | fnr emp={emp_fnr:.4e} pred={:.4e} z={z_fnr:.2}",
            m.fpr, m.fnr
        );
    }
}

#[test]
#[ignore]
fn probe_c10a_reference_amp() {
    let (pi, p, n) = (0.3, 40usize, 20usize);
    let seed = 9000u64;
    let base = BaseMatrix::uncoupled(0.5).unwrap();
    let design = DesignPair::sample(&base, n, p, seed, DesignKind::Uncoupled).unwrap();
    let beta = sample_qgt_signal(p, pi, seed).unwrap();
    let inst = observe_qgt(&design, pi, beta.clone(), 0.0, NoiseScaling::RescaledVariance, seed)
        .unwrap();
    let yt = rescale_qgt(&design, &inst, BlockSumMode::TrueCounts);

    // Dense rescaled matrix, one column at a time.
    let mut a = vec![vec![0.0f64; p]; n];
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        let col = design.xt_times(&e);
        for i in 0..n {
            a[i][j] = col[i];
        }
    }
    let logit = (pi / (1.0 - pi)).ln();
    let sigmoid = |x: f64| {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    };
    let delta = n as f64 / p as f64;

    for iters in 1..=10usize {
        // Reference run: textbook loop in (s, tau2) parameterization.
        let mut x = vec![pi; p];
        let mut z: Vec<f64> = (0..n)
            .map(|i| yt[i] - a[i].iter().zip(&x).map(|(aa, xx)| aa * xx).sum::<f64>())
            .collect();
        let mut g_avg = 0.0;
        for k in 0..iters {
            if k > 0 {
                let mut z_new = vec![0.0; n];
                for i in 0..n {
                    let ax: f64 = a[i].iter().zip(&x).map(|(aa, xx)| aa * xx).sum();
                    z_new[i] = yt[i] - ax + g_avg / delta * z[i];
                }
                z = z_new;
            }
            let tau2 = z.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let mut deriv_sum = 0.0;
            for j in 0..p {
                let s: f64 = x[j] + (0..n).map(|i| a[i][j] * z[i]).sum::<f64>();
                let m = sigmoid(logit + s / tau2 - 0.5 / tau2);
                deriv_sum += m * (1.0 - m) / tau2;
                x[j] = m;
            }
            g_avg = deriv_sum / p as f64;
        }

        let cfg = AmpConfig { max_iters: iters, tol: 1e-300, ..Default::default() };
        let amp = run_sc_amp_qgt(&design, &yt, pi, 0.0, &cfg, None).unwrap();
        let diff = amp
            .state
            .beta_hat
            .iter()
            .zip(&x)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0f64, f64::max);
        println!("k={iters}: max |diff| = {diff:.3e}");
    }
}

#[test]
#[ignore]
fn probe_c2_slow_seeds_long() {
    let base = BaseMatrix::new(6, 40, 0.5).unwrap();
    let pi = vec![1.0 / 3.0; 3];
    let p = 20000;
    let n = sc_tests(0.36, p, 45);
    let noise_cov = DMatrix::<f64>::zeros(3, 3);
    let cfg = AmpConfig { max_iters: 1000, ..Default::default() };
    for seed in [2062u64, 2031, 2217, 2124] {
        let design = DesignPair::sample(&base, n, p, seed, DesignKind::Coupled).unwrap();
        let b = sample_pooled_signal(p, &pi, seed).unwrap();
        let inst = observe_pooled(
            &design,
            pi.clone(),
            b.clone(),
            0.0,
            NoiseScaling::RescaledVariance,
            seed,
        )
        .unwrap();
        let yt = rescale_pooled(&design, &inst, BlockSumMode::TrueCounts);
        let ytm = DMatrix::from_row_slice(n, 3, &yt);
        let cats: Vec<usize> = b
            .chunks_exact(3)
            .map(|row| row.iter().position(|&v| v == 1.0).unwrap())
            .collect();
        let t0 = std::time::Instant::now();
        let run = run_matrix_sc_amp(&design, &ytm, &pi, &noise_cov, &cfg, Some(&cats)).unwrap();
        let corr = metrics::pooled_mean_correlation(&cats, &run.state.b_hat);
        println!(
            "seed={seed}: corr={corr:.6} iters={} conv={} elapsed={:?}",
            run.iterations,
            run.converged,
            t0.elapsed()
        );
        for row in run.trace.iter().step_by(50) {
            println!("  k={} corr={:?}", row.k, row.correlation.map(|c| (c * 1e6).round() / 1e6));
        }
    }
}

#[test]
#[ignore]
fn probe_c11_ordering() {
    let (pi, p, delta) = (0.3, 2000usize, 0.30);
    let sc_base = BaseMatrix::new(6, 40, 0.5).unwrap();
    let iid_base = BaseMatrix::uncoupled(0.5).unwrap();
    let n_sc = sc_tests(delta, p, 45);
    let n_iid = sc_tests(delta, p, 1);
    println!("n_sc={n_sc} n_iid={n_iid}");
    let mut amp_corr = Vec::new();
    let mut lp_sc_corr = Vec::new();
    let mut lp_iid_corr = Vec::new();
    for k in 0..5u64 {
        let seed = 4000 + 31 * k;
        // SC design shared by SC-AMP and LP.
        let design = DesignPair::sample(&sc_base, n_sc, p, seed, DesignKind::Coupled).unwrap();
        let beta = sample_qgt_signal(p, pi, seed).unwrap();
        let inst =
            observe_qgt(&design, pi, beta.clone(), 0.0, NoiseScaling::RescaledVariance, seed)
                .unwrap();
        let yt = rescale_qgt(&design, &inst, BlockSumMode::TrueCounts);
        let amp =
            run_sc_amp_qgt(&design, &yt, pi, 0.0, &AmpConfig::default(), Some(&beta)).unwrap();
        amp_corr.push(metrics::normalized_sq_correlation(&beta, &amp.state.beta_hat));

        let rows = design_rows(&design);
        let lp = lp_estimate(&rows, p, &inst.y).unwrap();
        lp_sc_corr.push(metrics::normalized_sq_correlation(&beta, &lp));

        let idesign = DesignPair::sample(&iid_base, n_iid, p, seed, DesignKind::Uncoupled).unwrap();
        let iinst =
            observe_qgt(&idesign, pi, beta.clone(), 0.0, NoiseScaling::RescaledVariance, seed)
                .unwrap();
        let irows = design_rows(&idesign);
        let ilp = lp_estimate(&irows, p, &iinst.y).unwrap();
        lp_iid_corr.push(metrics::normalized_sq_correlation(&beta, &ilp));
        println!(
            "seed={seed}: amp={:.5} lp_sc={:.5} lp_iid={:.5}",
            amp_corr.last().unwrap(),
            lp_sc_corr.last().unwrap(),
            lp_iid_corr.last().unwrap()
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "means: amp={:.5} lp_sc={:.5} lp_iid={:.5}",
        mean(&amp_corr),
        mean(&lp_sc_corr),
        mean(&lp_iid_corr)
    );
}
