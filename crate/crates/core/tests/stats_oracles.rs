//! Distribution functions and weighted least squares against independent
//! references.

mod common;

use common::exact_wls;
use ivqr_core::stats::linalg::weighted_gram;
use ivqr_core::stats::{
    bivariate_normal_sample, chisq_cdf, chisq_sf, norm_cdf, norm_pdf, norm_quantile, solve_wls, Matrix, RngStream,
};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

#[test]
fn normal_density_values() {
    assert!((norm_pdf(0.0) - 0.398_942_280_4).abs() < 1e-10);
    assert!((norm_pdf(1.959_964) - 0.058_445_07).abs() < 1e-8);
    assert!((norm_pdf(-1.3) - norm_pdf(1.3)).abs() < 1e-16);
}

// Bisection on an independent normal CDF.
fn bisect_quantile(p: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if n.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn normal_quantile_matches_bisection() {
    assert!((norm_quantile(0.975).unwrap() - 1.959_964).abs() < 1e-6);
    for p in [1e-10, 1e-6, 0.001, 0.025, 0.1, 0.3, 0.5, 0.7, 0.9, 0.975, 0.999, 1.0 - 1e-6] {
        let q = norm_quantile(p).unwrap();
        let r = bisect_quantile(p);
        assert!((q - r).abs() < 1e-8 * (1.0 + r.abs()), "p {p}: {q} vs {r}");
    }
    assert!(norm_quantile(0.0).is_err() || norm_quantile(0.0).unwrap().is_infinite());
    assert!(norm_quantile(1.5).is_err());
}

#[test]
fn quantile_inverts_cdf_on_grid() {
    for i in 1..=99 {
        let p = i as f64 / 100.0;
        let back = norm_cdf(norm_quantile(p).unwrap());
        assert!((back - p).abs() < 1e-8, "p {p}");
    }
}

#[test]
fn chi_square_critical_values() {
    assert!((chisq_sf(3.841_459, 1).unwrap() - 0.05).abs() < 1e-7);
    assert!((chisq_sf(5.991_465, 2).unwrap() - 0.05).abs() < 1e-7);
    assert_eq!(chisq_sf(0.0, 3).unwrap(), 1.0);
}

#[test]
fn chi_square_matches_statrs() {
    for k in [1usize, 2, 3, 5, 10, 17] {
        let reference = ChiSquared::new(k as f64).unwrap();
        for x in [0.01, 0.5, 1.0, 2.5, 4.0, 9.0, 20.0, 40.0] {
            let ours = chisq_cdf(x, k).unwrap();
            let theirs = reference.cdf(x);
            assert!((ours - theirs).abs() < 1e-10, "k {k} x {x}: {ours} vs {theirs}");
        }
    }
}

#[test]
fn bivariate_normal_correlation() {
    let mut rng = RngStream::new(2024, 0);
    let n = 100_000;
    let draws: Vec<(f64, f64)> = (0..n).map(|_| bivariate_normal_sample(&mut rng, 0.5).unwrap()).collect();
    let mu = draws.iter().fold((0.0, 0.0), |a, d| (a.0 + d.0, a.1 + d.1));
    let (mu, mv) = (mu.0 / n as f64, mu.1 / n as f64);
    let (mut suv, mut suu, mut svv) = (0.0, 0.0, 0.0);
    for (u, v) in &draws {
        suv += (u - mu) * (v - mv);
        suu += (u - mu) * (u - mu);
        svv += (v - mv) * (v - mv);
    }
    assert!((suv / (suu * svv).sqrt() - 0.5).abs() < 0.01);
}

fn random_wls(seed: u64, n: usize) -> (Matrix, Vec<f64>, Vec<f64>) {
    let mut rng = RngStream::new(seed, 0);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![1.0, rng.standard_normal(), 3.0 * rng.uniform()])
        .collect();
    let f: Vec<f64> = (0..n).map(|_| 0.1 + 2.0 * rng.uniform()).collect();
    let d: Vec<f64> = rows
        .iter()
        .map(|r| 0.5 - r[1] + 2.0 * r[2] + rng.standard_normal())
        .collect();
    (Matrix::from_rows(&rows).unwrap(), f, d)
}

#[test]
fn wls_matches_exact_rational_normal_equations() {
    let (w, f, d) = random_wls(99, 50);
    let q = w.ncols();
    let truth = exact_wls(&w, &f, &d);
    let ours = solve_wls(&w, &f, &d).unwrap();
    for j in 0..q {
        assert!((ours[j] - truth[j]).abs() < 1e-10, "coef {j}: {} vs {}", ours[j], truth[j]);
    }
}

#[test]
fn gram_is_symmetric() {
    let (w, f, _) = random_wls(5, 30);
    assert!(weighted_gram(&w, &f).is_symmetric(0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constant_weights_equal_unit_weights(seed in 0u64..10_000, c in 1e-3f64..1e3) {
        let (w, _, d) = random_wls(seed, 40);
        let unit = solve_wls(&w, &vec![1.0; 40], &d).unwrap();
        let scaled = solve_wls(&w, &vec![c; 40], &d).unwrap();
        for j in 0..unit.len() {
            prop_assert!((unit[j] - scaled[j]).abs() < 1e-12 * (1.0 + unit[j].abs()));
        }
    }

    #[test]
    fn chi_square_tails_sum_to_one(x in 0.0f64..200.0, k in 1usize..40) {
        let total = chisq_sf(x, k).unwrap() + chisq_cdf(x, k).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_roundtrip(p in 1e-6f64..(1.0 - 1e-6)) {
        let back = norm_cdf(norm_quantile(p).unwrap());
        prop_assert!((back - p).abs() < 1e-8);
    }
}
