use ivqr_core::dataset::Dataset;
use ivqr_core::ivqr::{fit_ivqr, AlphaGrid, WeightingMode};
use ivqr_core::montecarlo::{simulate_dgp, simulate_location_scale, true_density_weights, DgpConfig};
use ivqr_core::stats::{norm_pdf, norm_quantile};
use ivqr_core::weights::{
    hall_sheather_bandwidth, sparsity_weights, weights_from_fits, WEIGHT_CAP, WEIGHT_FLOOR,
};

fn formula(tau: f64, n: usize) -> f64 {
    let x0 = norm_quantile(tau).unwrap();
    let z = 1.959_964f64;
    2.0 * (n as f64).powf(-1.0 / 3.0)
        * z.powf(2.0 / 3.0)
        * (1.5 * norm_pdf(x0).powi(4) / (2.0 * x0 * x0 + 1.0)).powf(1.0 / 3.0)
}

#[test]
fn bandwidth_matches_direct_formula() {
    assert!((hall_sheather_bandwidth(0.5, 1000) - 0.1053).abs() < 1e-4);
    for tau in [0.25, 0.5, 0.75] {
        let h = hall_sheather_bandwidth(tau, 1000);
        assert!((h - formula(tau, 1000)).abs() < 1e-6, "tau {tau}");
    }
    // symmetric in tau around one half
    assert!((hall_sheather_bandwidth(0.25, 700) - hall_sheather_bandwidth(0.75, 700)).abs() < 1e-12);
}

#[test]
fn bandwidth_decreases_in_n() {
    for tau in [0.1, 0.25, 0.5, 0.9] {
        let mut prev = f64::INFINITY;
        for n in [50, 100, 500, 1000, 5000, 100_000] {
            let h = hall_sheather_bandwidth(tau, n);
            assert!(h <= prev, "tau {tau} n {n}");
            prev = h;
        }
    }
}

fn location(n: usize, seed: u64) -> Dataset {
    simulate_location_scale(n, 1.0, 0.0, 0.5, seed, 0).unwrap()
}

fn loc_grid() -> AlphaGrid {
    AlphaGrid::new(0.0, 2.0, 0.01).unwrap()
}

#[test]
fn location_model_mean_density() {
    let data = location(5000, 17);
    let w = sparsity_weights(&data, 0.5, &loc_grid(), WeightingMode::Identity).unwrap();
    let mean = w.values.iter().sum::<f64>() / w.len() as f64;
    let truth = norm_pdf(0.0) / (1.0f64 - 0.25).sqrt();
    assert!((truth - 0.4606).abs() < 1e-4);
    assert!((mean - truth).abs() < 0.15 * truth, "mean {mean} vs {truth}");
}

fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt() / m
}

#[test]
fn location_model_dispersion_shrinks_with_n() {
    let small = sparsity_weights(&location(400, 3), 0.5, &loc_grid(), WeightingMode::Identity).unwrap();
    let large = sparsity_weights(&location(6400, 3), 0.5, &loc_grid(), WeightingMode::Identity).unwrap();
    let (a, b) = (coefficient_of_variation(&small.values), coefficient_of_variation(&large.values));
    assert!(b < a, "cv {a} at n=400, {b} at n=6400");
}

#[test]
fn location_scale_design_tracks_true_density() {
    let mut cfg = DgpConfig::new(5000, 0.0, 0.0, 1.0);
    cfg.master_seed = 101;
    let data = simulate_dgp(&cfg, 0).unwrap();
    let w = sparsity_weights(&data, 0.5, &cfg.grid, WeightingMode::Identity).unwrap();
    let truth = true_density_weights(&data, 0.5, 0.5).unwrap();
    let mut rel: Vec<f64> = w
        .values
        .iter()
        .zip(&truth.values)
        .map(|(e, t)| ((e - t) / t).abs())
        .collect();
    rel.sort_by(f64::total_cmp);
    let median = rel[rel.len() / 2];
    assert!(median < 0.20, "median relative error {median}");
}

#[test]
fn weights_are_permutation_equivariant() {
    let data = location(300, 9);
    let n = data.n();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let permuted = data.select_rows(&perm).unwrap();
    let grid = AlphaGrid::new(0.0, 2.0, 0.02).unwrap();
    let w = sparsity_weights(&data, 0.5, &grid, WeightingMode::Identity).unwrap();
    let wp = sparsity_weights(&permuted, 0.5, &grid, WeightingMode::Identity).unwrap();
    for (i, &j) in perm.iter().enumerate() {
        assert!((wp.values[i] - w.values[j]).abs() <= 1e-8 * (1.0 + w.values[j]), "row {i}");
    }
}

#[test]
fn crossing_quantiles_are_floored_and_counted() {
    let data = location(200, 4);
    let grid = AlphaGrid::new(0.0, 2.0, 0.02).unwrap();
    let h = 0.1;
    let upper = fit_ivqr(&data, 0.6, &grid, WeightingMode::Identity).unwrap();
    let lower = fit_ivqr(&data, 0.4, &grid, WeightingMode::Identity).unwrap();
    // swapped fits make every quotient negative where the quantiles are ordered
    let swapped = weights_from_fits(&data, 0.5, h, &lower, &upper).unwrap();
    let proper = weights_from_fits(&data, 0.5, h, &upper, &lower).unwrap();
    assert!(swapped.clipped_count > 0);
    for (s, p) in swapped.values.iter().zip(&proper.values) {
        assert!(*s == WEIGHT_FLOOR || *s == WEIGHT_CAP || *p == WEIGHT_FLOOR || *p == WEIGHT_CAP);
    }
    assert!(swapped.values.iter().all(|v| (WEIGHT_FLOOR..=WEIGHT_CAP).contains(v)));
    assert_eq!(
        swapped.clipped_count,
        swapped
            .values
            .iter()
            .filter(|v| **v == WEIGHT_FLOOR || **v == WEIGHT_CAP)
            .count()
    );
}

#[test]
fn identical_side_fits_hit_the_cap() {
    let data = location(120, 5);
    let grid = AlphaGrid::new(0.0, 2.0, 0.05).unwrap();
    let fit = fit_ivqr(&data, 0.5, &grid, WeightingMode::Identity).unwrap();
    let w = weights_from_fits(&data, 0.5, 0.05, &fit, &fit).unwrap();
    assert!(w.values.iter().all(|v| *v == WEIGHT_CAP));
    assert_eq!(w.clipped_count, data.n());
    assert!((w.clipped_fraction() - 1.0).abs() < 1e-15);
}
