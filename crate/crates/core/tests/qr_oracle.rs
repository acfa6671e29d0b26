//! Quantile regression against exhaustive enumeration of basic solutions.

mod common;

use common::{brute_force_objective, random_qr_instance as random_instance};
use ivqr_core::qr::{fit_qr, mean_check_loss};
use proptest::prelude::*;

#[test]
fn enumeration_oracle_n8_q2() {
    let (y, x) = random_instance(2024, 8, 2);
    for tau in [0.2, 0.5, 0.8] {
        let fit = fit_qr(&y, &x, tau).unwrap();
        let oracle = brute_force_objective(&y, &x, tau);
        assert!((fit.objective - oracle).abs() < 1e-8, "tau={tau}: {} vs {oracle}", fit.objective);
    }
}

#[test]
fn enumeration_oracle_hundred_instances() {
    for seed in 0..100u64 {
        let n = 5 + (seed as usize % 6);
        let q = 1 + (seed as usize % 3);
        let tau = [0.1, 0.25, 0.5, 0.7, 0.9][seed as usize % 5];
        let (y, x) = random_instance(seed, n, q);
        let fit = fit_qr(&y, &x, tau).unwrap();
        let oracle = brute_force_objective(&y, &x, tau);
        assert!(
            (fit.objective - oracle).abs() < 1e-8,
            "seed {seed}: n={n} q={q} tau={tau}: {} vs {oracle}",
            fit.objective
        );
    }
}

#[test]
fn basic_solution_interpolates_q_points() {
    let (y, x) = random_instance(5, 200, 4);
    let fit = fit_qr(&y, &x, 0.35).unwrap();
    let zeros = (0..200)
        .filter(|&i| {
            let r = y[i] - x.row(i).iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum::<f64>();
            r.abs() < 1e-8
        })
        .count();
    assert!(zeros >= 4);
}

#[test]
fn subgradient_band_holds() {
    let (y, x) = random_instance(17, 300, 3);
    let tau = 0.3;
    let fit = fit_qr(&y, &x, tau).unwrap();
    let n = 300.0;
    let q = 3.0;
    let band = q * x.max_abs() / n;
    for j in 0..3 {
        let g: f64 = (0..300)
            .map(|i| {
                let r = y[i] - x.row(i).iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum::<f64>();
                let ind = if r < -1e-9 { 1.0 } else { 0.0 };
                x[(i, j)] * (tau - ind)
            })
            .sum::<f64>()
            / n;
        assert!(g.abs() <= band, "component {j}: {g} > {band}");
    }
}

#[test]
fn objective_beats_zero_vector() {
    let (y, x) = random_instance(3, 50, 3);
    let fit = fit_qr(&y, &x, 0.6).unwrap();
    assert!(fit.objective >= 0.0);
    assert!(fit.objective <= mean_check_loss(&y, &x, &[0.0; 3], 0.6) + 1e-12);
}

#[test]
fn location_model_quantiles_are_monotone_at_mean_covariate() {
    let (y, x) = random_instance(8, 400, 2);
    let xbar = [1.0, (0..400).map(|i| x[(i, 1)]).sum::<f64>() / 400.0];
    let mut prev = f64::NEG_INFINITY;
    for tau in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let b = fit_qr(&y, &x, tau).unwrap().coefficients;
        let pred = xbar[0] * b[0] + xbar[1] * b[1];
        assert!(pred >= prev - 1e-12);
        prev = pred;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scale_and_shift_equivariance(seed in 0u64..1000, c in 0.1f64..10.0, w0 in -3.0f64..3.0, w1 in -3.0f64..3.0) {
        let (y, x) = random_instance(seed, 40, 2);
        let tau = 0.4;
        let base = fit_qr(&y, &x, tau).unwrap();
        let scaled: Vec<f64> = y.iter().map(|v| c * v).collect();
        let fs = fit_qr(&scaled, &x, tau).unwrap();
        let shifted: Vec<f64> = (0..40).map(|i| y[i] + x[(i, 0)] * w0 + x[(i, 1)] * w1).collect();
        let fh = fit_qr(&shifted, &x, tau).unwrap();
        // objectives are exact; coefficients agree whenever the optimum is unique
        prop_assert!((fs.objective - c * base.objective).abs() < 1e-9 * (1.0 + c));
        prop_assert!((fh.objective - base.objective).abs() < 1e-9);
        for j in 0..2 {
            prop_assert!((fs.coefficients[j] - c * base.coefficients[j]).abs() < 1e-7 * (1.0 + c));
            let w = [w0, w1][j];
            prop_assert!((fh.coefficients[j] - base.coefficients[j] - w).abs() < 1e-7);
        }
    }
}
