use std::sync::Arc;

use mvstable::coefficients::*;
use mvstable::measure::{damped_sup_distance, FlowCombo};
use mvstable::solver::*;
use mvstable::{EmpiricalMeasure, Execution, MeasureFlow, TimeGrid};

fn config(n: usize, steps: usize) -> SolverConfig {
    let mut c = SolverConfig::new(n, Arc::new(TimeGrid::uniform(1.0, steps).unwrap()));
    c.master_seed = 9;
    c
}

#[test]
fn measure_free_coefficients_take_one_iteration() {
    let z = ConstantDrift::new(vec![0.3], 1.5, 1.2, 0.5).unwrap();
    let cfg = config(500, 20);
    let sol = solve(&EmpiricalMeasure::dirac(&[0.0]).unwrap(), &z, &cfg).unwrap();
    assert_eq!(sol.report.outer.iterations, 1);
    assert!(sol.report.inner.iter().all(|t| t.iterations == 1));
    assert_eq!(sol.flow, sol.ensemble.law_flow().unwrap());
}

#[test]
fn builtin_family_passes_its_own_probe() {
    for dim in [1, 2] {
        let fam = BuiltinFamily::standard(dim, 1.5).unwrap();
        let report = probe_assumptions(&fam, &ProbePlan::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }
    assert_eq!(BuiltinFamily::standard(1, 1.5).unwrap().constants().k, 1.2);
}

#[test]
fn solve_is_deterministic_across_execution_modes() {
    let fam = BuiltinFamily::standard(1, 1.5).unwrap();
    let gamma = EmpiricalMeasure::uniform(1, vec![-0.5, 0.5]).unwrap();
    let mut cfg = config(400, 20);
    let a = solve(&gamma, &fam, &cfg).unwrap();
    cfg.exec = Execution::Sequential;
    let b = solve(&gamma, &fam, &cfg).unwrap();
    assert_eq!(a.flow, b.flow);
    assert_eq!(a.report, b.report);
}

#[test]
fn independent_initializations_agree_and_solution_is_self_consistent() {
    let fam = BuiltinFamily::standard(1, 1.5).unwrap();
    let gamma = EmpiricalMeasure::dirac(&[0.3]).unwrap();
    let cfg = config(2_000, 50);
    let a = outer_fixed_point(&gamma, &fam, &cfg, None).unwrap();
    let far = MeasureFlow::constant(cfg.grid.clone(), EmpiricalMeasure::dirac(&[3.0]).unwrap());
    let b = outer_fixed_point(&gamma, &fam, &cfg, Some(&far)).unwrap();
    let gap = damped_sup_distance(&a.flow, &b.flow, cfg.delta, FlowCombo::KvarPlusK, &cfg.metric(&fam), cfg.exec).unwrap();
    assert!(gap < 2.0 * cfg.tol_outer, "{gap}");
    assert!(self_consistency_residual(&a, &fam, &cfg).unwrap() < cfg.tol_outer);
    // the inner residuals shrink from one iteration to the next
    for t in a.report.inner.iter().filter(|t| t.residuals.len() > 1) {
        assert!(t.residuals.windows(2).all(|w| w[1] < w[0]), "{:?}", t.residuals);
    }
}

#[test]
fn inner_fixed_point_is_unique_from_two_starts() {
    let fam = BuiltinFamily::standard(1, 1.5).unwrap();
    let cfg = config(1_000, 40);
    let gamma = EmpiricalMeasure::dirac(&[0.2]).unwrap();
    let noise = Arc::new(DrivingNoise::sample(1.5, 1, cfg.grid.clone(), cfg.n_particles, 1, cfg.exec).unwrap());
    let x0 = initial_states(&gamma, cfg.n_particles, 1);
    let mu = MeasureFlow::constant(cfg.grid.clone(), gamma.clone());
    let a = inner_fixed_point(&x0, &mu, &mu, &fam, &cfg, &noise).unwrap();
    let other = MeasureFlow::constant(cfg.grid.clone(), EmpiricalMeasure::dirac(&[-2.0]).unwrap());
    let b = inner_fixed_point(&x0, &mu, &other, &fam, &cfg, &noise).unwrap();
    let gap = damped_sup_distance(&a.flow, &b.flow, cfg.delta, FlowCombo::EtaPlusK, &cfg.metric(&fam), cfg.exec).unwrap();
    assert!(gap < 2.0 * cfg.tol_inner, "{gap}");
}

#[test]
fn capped_iterations_report_the_residual_trace() {
    let fam = BuiltinFamily::standard(1, 1.5).unwrap();
    let mut cfg = config(300, 20);
    cfg.max_inner = 1;
    cfg.tol_inner = 1e-12;
    match solve(&EmpiricalMeasure::dirac(&[0.0]).unwrap(), &fam, &cfg) {
        Err(mvstable::Error::NonConvergence { stage, residuals, .. }) => {
            assert_eq!(stage, "inner");
            assert_eq!(residuals.len(), 1);
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn unperturbed_contraction_input_gives_zero_output() {
    let fam = BuiltinFamily::standard(1, 1.5).unwrap();
    let cfg = config(300, 20);
    let table = contraction_estimate(&EmpiricalMeasure::dirac(&[0.0]).unwrap(), &fam, &cfg, &[5.0, 20.0, 80.0], &[0.0]).unwrap();
    assert!(table.rows.iter().all(|r| r.output_distance == 0.0 && r.input_distance == 0.0));
}

#[test]
fn pure_noise_moment_ratio_is_stable_across_seeds() {
    let z = ConstantDrift::zero(1, 1.5).unwrap();
    let gamma = EmpiricalMeasure::dirac(&[0.0]).unwrap();
    let ratios: Vec<f64> = (0..3)
        .map(|seed| {
            let mut cfg = config(50_000, 50);
            cfg.master_seed = 100 + seed;
            let sol = solve(&gamma, &z, &cfg).unwrap();
            moment_bound_report(&sol.ensemble, 1.0).unwrap().ratio
        })
        .collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    assert!(lo.is_finite() && hi / lo < 1.1, "{ratios:?}");
}
