use std::sync::Arc;

use mvstable::coefficients::{BuiltinFamily, ConstantDrift};
use mvstable::kernel_checks::*;
use mvstable::{EmpiricalMeasure, Execution, MeasureFlow, TimeGrid};
use nalgebra::DMatrix;

fn two_phase_flow(grid: Arc<TimeGrid>) -> MeasureFlow {
    let early = EmpiricalMeasure::dirac(&[0.0]).unwrap();
    let late = EmpiricalMeasure::uniform(1, vec![1.0, 2.0, 3.0]).unwrap();
    let half = grid.steps() / 2;
    let measures = (0..grid.len()).map(|j| if j < half { early.clone() } else { late.clone() }).collect();
    MeasureFlow::new(grid, measures).unwrap()
}

#[test]
fn covariance_is_blockwise_for_piecewise_constant_noise_law() {
    let fam = BuiltinFamily::standard(1, 1.5).unwrap();
    let grid = Arc::new(TimeGrid::uniform(1.0, 10).unwrap());
    let nu = two_phase_flow(grid.clone());
    let ctx = KernelContext::new(&fam, &nu).unwrap();
    let (c0, c1) = (ctx.node_covariance(0)[(0, 0)], ctx.node_covariance(9)[(0, 0)]);
    assert!((c0 - c1).abs() > 1e-3, "phases should differ: {c0} {c1}");
    let paths = path_bank(1.5, grid, 1000, 2, Execution::Parallel).unwrap();
    for p in paths.iter().take(50) {
        let v = p.values();
        let a = ctx.covariance_functional(p, 0.0, 1.0).unwrap()[(0, 0)];
        let want = c0 * v[5] + c1 * (v[10] - v[5]);
        assert!((a - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn mixed_density_is_normalized_and_symmetric() {
    let z = ConstantDrift::zero(1, 1.5).unwrap();
    let grid = Arc::new(TimeGrid::uniform(1.0, 20).unwrap());
    let nu = MeasureFlow::constant(grid.clone(), EmpiricalMeasure::dirac(&[0.0]).unwrap());
    let ctx = KernelContext::new(&z, &nu).unwrap();
    let paths = path_bank(1.5, grid, 2000, 3, Execution::Parallel).unwrap();
    let covs = ctx.covariances(&paths, 0.0, 1.0, Execution::Parallel).unwrap();
    let x = [0.7];
    // trapezoid over [-60, 60] around x; the stable tail beyond carries ~1e-3
    let h = 0.02;
    let mut total = 0.0;
    for i in 0..=6000 {
        let y = x[0] - 60.0 + h * i as f64;
        let w = if i == 0 || i == 6000 { 0.5 } else { 1.0 };
        total += w * h * mixed_density(&covs, &x, &[y]).unwrap().mean;
    }
    assert!((total - 1.0).abs() < 0.01, "{total}");
    for dy in [0.1, 1.0, 5.0] {
        let l = mixed_density(&covs, &x, &[x[0] - dy]).unwrap().mean;
        let r = mixed_density(&covs, &x, &[x[0] + dy]).unwrap().mean;
        assert!((l - r).abs() <= 1e-12 * l);
    }
    let probs = mixed_bin_probabilities(&covs, x[0], &[f64::NEG_INFINITY, x[0], f64::INFINITY]).unwrap();
    assert!((probs[0] - 0.5).abs() < 1e-12 && (probs[1] - 0.5).abs() < 1e-12);
}

#[test]
fn gaussian_density_oracle() {
    let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    // det = 1.75, a^{-1} = [1, -0.5; -0.5, 2] / 1.75
    let z = [1.0, -1.0];
    let quad: f64 = (1.0 + 1.0 + 2.0) / 1.75;
    let want = (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * 1.75f64.sqrt());
    assert!((gaussian_density(&a, &z).unwrap() - want).abs() < 1e-15);
    assert!(gaussian_density(&DMatrix::zeros(1, 1), &[0.0]).is_err());
}

#[test]
fn gradient_scaling_slopes_at_small_sample_size() {
    let z = ConstantDrift::zero(1, 1.5).unwrap();
    let grid = Arc::new(log_lag_grid(1e-3, 8).unwrap());
    let nu = MeasureFlow::constant(grid.clone(), EmpiricalMeasure::dirac(&[0.0]).unwrap());
    let ctx = KernelContext::new(&z, &nu).unwrap();
    let paths = path_bank(1.5, grid.clone(), 5_000, 5, Execution::Parallel).unwrap();
    let taus = &grid.nodes()[1..];
    for eps in [0.0, 1.0] {
        let r = gradient_scaling_check(&ctx, &paths, taus, eps, Execution::Parallel).unwrap();
        assert!(r.slope_within(0.05), "eps {eps}: slope {} vs {}", r.fit.slope, r.expected_slope);
    }
    assert!(gradient_scaling_check(&ctx, &paths, taus, 1.5, Execution::Parallel).is_err());
    assert!(gradient_scaling_check(&ctx, &paths, &taus[..3], 0.5, Execution::Parallel).is_err());
}

#[test]
fn identical_noise_flows_have_zero_perturbation() {
    let fam = BuiltinFamily::standard(1, 1.5).unwrap();
    let grid = Arc::new(TimeGrid::uniform(1.0, 20).unwrap());
    let nu = two_phase_flow(grid.clone());
    let paths = path_bank(1.5, grid, 1000, 6, Execution::Parallel).unwrap();
    let r = kernel_perturbation_check(&fam, &nu, &nu, &paths, 0.0, 1.0, 0.5).unwrap();
    assert_eq!(r.lhs, 0.0);
    assert_eq!(r.path_bound_violations, 0);
    let other = MeasureFlow::constant(nu.shared_grid().clone(), EmpiricalMeasure::dirac(&[5.0]).unwrap());
    let r = kernel_perturbation_check(&fam, &nu, &other, &paths, 0.0, 1.0, 0.5).unwrap();
    assert!(r.lhs > 0.0 && r.rhs > 0.0 && r.path_bound_violations == 0);
}

#[test]
fn constant_test_function_has_zero_duhamel_residual() {
    let fam = BuiltinFamily::standard(1, 1.5).unwrap();
    let grid = Arc::new(TimeGrid::uniform(0.5, 20).unwrap());
    let mu = MeasureFlow::constant(grid, EmpiricalMeasure::dirac(&[0.3]).unwrap());
    let r = duhamel_residual(&Constant(2.5), &fam, &mu, &mu, &[0.3], 2_000, 1, GradientMode::Analytic, Execution::Parallel).unwrap();
    assert!(r.residual.mean.abs() < 1e-12 && r.integral_term.mean.abs() < 1e-12, "{r:?}");
    assert!((r.lhs.mean - 2.5).abs() < 1e-12);
}

#[test]
fn drift_free_duhamel_reduces_to_the_free_term() {
    let z = ConstantDrift::zero(1, 1.5).unwrap();
    let grid = Arc::new(TimeGrid::uniform(0.5, 40).unwrap());
    let mu = MeasureFlow::constant(grid, EmpiricalMeasure::dirac(&[0.3]).unwrap());
    let r = duhamel_residual(&Tanh, &z, &mu, &mu, &[0.3], 20_000, 2, GradientMode::Analytic, Execution::Parallel).unwrap();
    assert_eq!(r.integral_term.mean, 0.0);
    assert!(r.passes(3.0, DUHAMEL_FLOOR), "{r:?}");
}
