use ivqr_core::dataset::Dataset;
use ivqr_core::ivqr::{fit_ivqr, weighting_matrix, AlphaGrid, IvqrWarning, WeightingMode};
use ivqr_core::montecarlo::{simulate_dgp, DgpConfig};
use ivqr_core::qr::fit_qr;
use ivqr_core::stats::{Matrix, RngStream};
use proptest::prelude::*;

fn noiseless(n: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed, 0);
    let (mut y, mut d, mut x, mut z1, mut z2) = (vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let (xi, a, b) = (rng.uniform(), rng.uniform(), rng.uniform());
        let di = 1.0 + a + 0.5 * b + rng.standard_normal();
        y.push(2.0 * di + 0.5 * xi);
        d.push(di);
        x.push(xi);
        z1.push(a);
        z2.push(b);
    }
    Dataset::from_columns(y, d, vec![x], vec![z1, z2], true).unwrap()
}

#[test]
fn noiseless_design_recovers_alpha() {
    let data = noiseless(80, 3);
    let grid = AlphaGrid::new(0.0, 4.0, 0.05).unwrap();
    let fit = fit_ivqr(&data, 0.5, &grid, WeightingMode::Identity).unwrap();
    assert!((fit.alpha_hat - 2.0).abs() < 1e-9, "{}", fit.alpha_hat);
    assert!(fit.gamma_hat.iter().all(|g| g.abs() < 1e-8));
    assert!((fit.beta_hat[1] - 0.5).abs() < 1e-8);
    assert!(fit.warnings.iter().all(|w| !matches!(w, IvqrWarning::Boundary { .. })));
}

// An exact fit leaves no residuals to estimate the sparsity from, so the
// inverse-covariance weighting is undefined there and says so.
#[test]
fn noiseless_design_rejects_inverse_covariance() {
    let data = noiseless(80, 3);
    let grid = AlphaGrid::new(0.0, 4.0, 0.05).unwrap();
    let err = fit_ivqr(&data, 0.5, &grid, WeightingMode::InverseGammaCov).unwrap_err();
    assert!(err.to_string().contains("sparsity"), "{err}");
}

#[test]
fn small_noise_design_recovers_alpha_with_inverse_covariance() {
    let base = noiseless(200, 6);
    let mut rng = RngStream::new(6, 1);
    let y: Vec<f64> = base.y().iter().map(|v| v + 0.01 * rng.standard_normal()).collect();
    let x = vec![base.x().column(1)];
    let z = vec![base.z().column(0), base.z().column(1)];
    let data = Dataset::from_columns(y, base.endogenous().unwrap(), x, z, true).unwrap();
    let fit = fit_ivqr(&data, 0.5, &AlphaGrid::new(0.0, 4.0, 0.01).unwrap(), WeightingMode::InverseGammaCov).unwrap();
    assert!((fit.alpha_hat - 2.0).abs() <= 0.02, "{}", fit.alpha_hat);
}

#[test]
fn minimum_on_grid_edge_is_flagged() {
    let data = noiseless(60, 4);
    let grid = AlphaGrid::new(2.5, 4.0, 0.1).unwrap();
    let fit = fit_ivqr(&data, 0.5, &grid, WeightingMode::Identity).unwrap();
    assert_eq!(fit.alpha_hat, 2.5);
    assert!(fit.warnings.iter().any(|w| matches!(w, IvqrWarning::Boundary { .. })));
}

// d = 0 leaves y - d alpha, and so gamma(alpha), unchanged across the grid.
#[test]
fn absent_endogenous_variation_gives_flat_warning() {
    let n = 40;
    let mut rng = RngStream::new(8, 0);
    let y: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let z: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let data = Dataset::from_columns(y, vec![0.0; n], vec![], vec![z], true).unwrap();
    let fit = fit_ivqr(&data, 0.5, &AlphaGrid::new(-1.0, 1.0, 0.1).unwrap(), WeightingMode::Identity).unwrap();
    assert!(fit.warnings.iter().any(|w| matches!(w, IvqrWarning::FlatObjective { .. })));
    // ties resolve to the smallest alpha
    assert_eq!(fit.alpha_hat, -1.0);
}

// With d as its own instrument, gamma(alpha) = b_d - alpha: the minimizer is
// the grid point closest to the plain quantile regression coefficient.
#[test]
fn exogenous_design_matches_plain_quantile_regression() {
    let mut cfg = DgpConfig::new(2000, 1.0, 0.0, 0.0);
    cfg.rho = 0.0;
    cfg.master_seed = 21;
    let sim = simulate_dgp(&cfg, 0).unwrap();
    let d = sim.endogenous().unwrap();
    let x: Vec<f64> = sim.x().column(1);
    let data = Dataset::from_columns(sim.y().to_vec(), d.clone(), vec![x.clone()], vec![d.clone()], true).unwrap();
    let grid = AlphaGrid::simulation_default();
    let fit = fit_ivqr(&data, 0.5, &grid, WeightingMode::Identity).unwrap();
    let design = Matrix::from_columns(&[vec![1.0; d.len()], d, x]).unwrap();
    let plain = fit_qr(sim.y(), &design, 0.5).unwrap();
    let b_d = plain.coefficients[1];
    assert!(
        (fit.alpha_hat - b_d).abs() <= 0.5 * grid.step() + 1e-9,
        "alpha {} vs plain {b_d}",
        fit.alpha_hat
    );
}

#[test]
fn median_alpha_is_centred_on_truth() {
    let mut cfg = DgpConfig::new(1000, 1.0, 0.0, 1.0);
    cfg.master_seed = 33;
    let grid = AlphaGrid::simulation_default();
    let reps = 200;
    let mean = (0..reps)
        .map(|r| {
            let data = simulate_dgp(&cfg, r).unwrap();
            fit_ivqr(&data, 0.5, &grid, WeightingMode::Identity).unwrap().alpha_hat
        })
        .sum::<f64>()
        / reps as f64;
    assert!((mean - 1.0).abs() < 0.15, "mean alpha {mean}");
}

#[test]
fn gamma_vanishes_at_the_minimizer_when_just_identified() {
    let mut cfg = DgpConfig::new(5000, 1.0, 0.0, 0.0);
    cfg.master_seed = 5;
    let data = simulate_dgp(&cfg, 0).unwrap();
    let fit = fit_ivqr(&data, 0.5, &AlphaGrid::simulation_default(), WeightingMode::Identity).unwrap();
    let norm = fit.gamma_hat.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm < 0.05, "|gamma| = {norm} at alpha {}", fit.alpha_hat);
}

#[test]
fn inverse_covariance_weighting_scales_inversely() {
    let cov = Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
    let a1 = weighting_matrix(WeightingMode::InverseGammaCov, 2, Some(&cov)).unwrap();
    let a4 = weighting_matrix(WeightingMode::InverseGammaCov, 2, Some(&cov.scale(4.0))).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((a1[(i, j)] - 4.0 * a4[(i, j)]).abs() < 1e-12);
        }
    }
}

fn rescale_instrument(data: &Dataset, c: f64) -> Dataset {
    let z: Vec<Vec<f64>> = (0..data.p())
        .map(|j| {
            let col = data.z().column(j);
            if j == 0 {
                col.iter().map(|v| c * v).collect()
            } else {
                col
            }
        })
        .collect();
    let x: Vec<Vec<f64>> = (1..data.k()).map(|j| data.x().column(j)).collect();
    Dataset::from_columns(data.y().to_vec(), data.endogenous().unwrap(), x, z, true).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    // Rescaling an instrument rescales gamma and its covariance together:
    // the inverse-covariance objective, and so its minimizer, do not move.
    #[test]
    fn argmin_invariant_to_instrument_scale(seed in 0u64..500, c in 0.2f64..5.0) {
        let mut cfg = DgpConfig::new(300, 1.0, 0.0, 1.0);
        cfg.master_seed = seed;
        let data = simulate_dgp(&cfg, 0).unwrap();
        let scaled = rescale_instrument(&data, c);
        let grid = AlphaGrid::new(-1.0, 3.0, 0.05).unwrap();
        let base = fit_ivqr(&data, 0.5, &grid, WeightingMode::InverseGammaCov).unwrap();
        let other = fit_ivqr(&scaled, 0.5, &grid, WeightingMode::InverseGammaCov).unwrap();
        prop_assert_eq!(base.alpha_hat, other.alpha_hat);
        for (u, v) in base.objective_curve.iter().zip(&other.objective_curve) {
            prop_assert!((u - v).abs() <= 1e-6 * (1.0 + u.abs()));
        }
    }
}
