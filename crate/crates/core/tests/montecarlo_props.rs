use ivqr_core::first_stage::{fit_first_stage, wald_test};
use ivqr_core::ivqr::AlphaGrid;
use ivqr_core::montecarlo::{
    power_experiment, power_to_wide_csv, rejection_experiment, report_to_csv, run_replication,
    simulate_dgp, simulate_location_scale, size_experiment, true_density_weights_scaled, DgpConfig, Method, Sweep,
};
use ivqr_core::stats::{norm_pdf, norm_quantile};
use ivqr_core::weights::WeightVector;

fn small(n: usize, reps: usize, seed: u64) -> DgpConfig {
    let mut c = DgpConfig::new(n, 0.0, 0.0, 1.0);
    c.replications = reps;
    c.master_seed = seed;
    c.grid = AlphaGrid::new(-1.0, 3.0, 0.05).unwrap();
    c
}

#[test]
fn endogenous_mean_and_monotonicity_guard() {
    let mut cfg = DgpConfig::new(100_000, 0.0, 0.0, 1.0);
    cfg.master_seed = 4;
    let data = simulate_dgp(&cfg, 0).unwrap();
    let d = data.endogenous().unwrap();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    assert!((mean - 10.5).abs() < 0.02, "mean d {mean}");
    assert!(d.iter().all(|v| 1.0 + v > 0.0));
    assert_eq!(data.p(), 2);
    assert_eq!(data.k(), 2);
}

#[test]
fn true_density_reference_values() {
    let mut cfg = DgpConfig::new(50, 0.0, 0.0, 1.0);
    cfg.master_seed = 2;
    let data = simulate_dgp(&cfg, 0).unwrap();
    let w = true_density_weights_scaled(&data, 0.5, 0.5, 1.0).unwrap();
    let d = data.endogenous().unwrap();
    for (f, di) in w.values.iter().zip(&d) {
        let truth = norm_pdf(0.0) / ((1.0 + di) * 0.75f64.sqrt());
        assert!((f - truth).abs() < 1e-15);
    }
    let at_ten = norm_pdf(0.0) / (11.0 * 0.75f64.sqrt());
    assert!((at_ten - 0.04188).abs() < 1e-5);
    // pure location limit
    let loc = simulate_location_scale(60, 0.0, 0.0, 0.0, 1, 0).unwrap();
    let w = true_density_weights_scaled(&loc, 0.3, 0.0, 0.0).unwrap();
    let c = norm_pdf(norm_quantile(0.3).unwrap());
    assert!(w.values.iter().all(|v| (v - c).abs() < 1e-15));
}

#[test]
fn constant_true_density_equals_unit_weights() {
    let data = simulate_location_scale(300, 1.0, 0.0, 0.5, 9, 0).unwrap();
    let truth = true_density_weights_scaled(&data, 0.5, 0.5, 0.0).unwrap();
    let a = fit_first_stage(&data, &truth).unwrap();
    let b = fit_first_stage(&data, &WeightVector::unit(data.n())).unwrap();
    for (u, v) in a.mu_hat.iter().zip(&b.mu_hat) {
        assert!((u - v).abs() < 1e-12 * (1.0 + u.abs()));
    }
    let (ta, tb) = (
        ivqr_core::first_stage::wald_test_unchecked(&a, &[0]).unwrap(),
        ivqr_core::first_stage::wald_test_unchecked(&b, &[0]).unwrap(),
    );
    assert!((ta.statistic - tb.statistic).abs() < 1e-9 * ta.statistic);
}

#[test]
fn arms_share_one_dataset() {
    let cfg = small(120, 1, 13);
    let out = run_replication(&cfg, 5);
    let data = simulate_dgp(&cfg, 5).unwrap();
    let direct = wald_test(&fit_first_stage(&data, &WeightVector::unit(data.n())).unwrap(), &[0]).unwrap();
    for t in &out.tests {
        assert_eq!(t[Method::Fs2sls.index()].as_ref().unwrap(), &direct);
    }
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let mut a = small(100, 12, 99);
    a.threads = Some(1);
    let mut b = a.clone();
    b.threads = Some(3);
    let ra = rejection_experiment(&a, &[0.1, 0.05]).unwrap();
    let rb = rejection_experiment(&b, &[0.1, 0.05]).unwrap();
    assert_eq!(report_to_csv(&ra).unwrap(), report_to_csv(&rb).unwrap());
    assert_eq!(ra.cells, rb.cells);
}

#[test]
fn unit_nominal_level_always_rejects() {
    let cfg = small(80, 6, 3);
    let r = rejection_experiment(&cfg, &[1.0]).unwrap();
    for c in &r.cells {
        assert_eq!(c.rate, 1.0, "{:?}", c.method);
        assert_eq!(c.reps + c.failed, 6);
    }
}

#[test]
fn size_experiment_requires_null() {
    let mut cfg = small(80, 2, 1);
    cfg.a = 0.5;
    assert!(size_experiment(&cfg, &[0.05]).is_err());
}

#[test]
fn power_curve_has_one_row_per_value() {
    let cfg = small(80, 4, 8);
    let sweep = Sweep::Scale(vec![0.0, 0.5, 1.0]);
    let points = power_experiment(&cfg, &sweep, &[0.05]).unwrap();
    let csv = power_to_wide_csv(&sweep, &points, 0.05).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("FS-IVQR-sparsity@0.25"));
    assert!(lines[3].starts_with("scale,1,"));
    assert!(power_experiment(&cfg, &Sweep::Location(vec![1.5]), &[0.05]).is_err());
}

#[test]
fn location_power_rises_with_instrument_strength() {
    let mut cfg = small(300, 40, 21);
    cfg.tau_list = vec![0.5];
    let sweep = Sweep::Location(vec![0.0, 1.0]);
    let points = power_experiment(&cfg, &sweep, &[0.05]).unwrap();
    let lo = points[0].report.rate(0.5, 0.05, Method::TrueDensity).unwrap();
    let hi = points[1].report.rate(0.5, 0.05, Method::TrueDensity).unwrap();
    assert!(hi >= lo - 0.04, "{lo} -> {hi}");
}
