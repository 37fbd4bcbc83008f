//! Desk-scale acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use mvstable::appendix_limits::{limit_table, LimitExperiment, Part};
use mvstable::coefficients::{BuiltinFamily, Coefficients, ConstantDrift};
use mvstable::counterexample::{calibrate, tail_ratio, verification_times, verify_two_solutions};
use mvstable::kernel_checks::{
    duhamel_residual, gradient_scaling_check, log_lag_grid, path_bank, GradientMode, KernelContext, Tanh, DUHAMEL_FLOOR,
};
use mvstable::measure::{damped_sup_distance, FlowCombo};
use mvstable::solver::{contraction_estimate, moment_ladder, outer_fixed_point, SolverConfig};
use mvstable::stable_paths::*;
use mvstable::{Domain, EmpiricalMeasure, Execution, MeasureFlow, Result, RngKey, TimeGrid};
use num_complex::Complex64;

mod common;

const EXEC: Execution = Execution::Parallel;
const ALPHAS: [f64; 3] = [1.2, 1.5, 1.8];
const RS: [f64; 3] = [0.5, 1.0, 2.0];
const TS: [f64; 2] = [0.5, 1.0];

type Outcome = Result<(bool, String)>;

fn laplace() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, &a) in ALPHAS.iter().enumerate() {
        for (j, &t) in TS.iter().enumerate() {
            let key = RngKey::new(100 + (i * 2 + j) as u64, Domain::Subordinator);
            let s = sample_subordinator_at(StableParams::new(a, 1)?, t, 1_000_000, &key, EXEC)?;
            for &r in &RS {
                worst = worst.max(empirical_laplace(&s, r)?.z_score(laplace_transform(a, r, t)));
            }
        }
    }
    Ok((worst < 3.0, format!("18 cases, max |z| = {worst:.2}")))
}

fn charfn() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, &a) in ALPHAS.iter().enumerate() {
        for (j, &t) in TS.iter().enumerate() {
            let key = RngKey::new(200 + (i * 2 + j) as u64, Domain::Subordinator);
            let z = sample_stable_marginal(StableParams::new(a, 1)?, t, 1_000_000, &key, &key.child(1), EXEC)?;
            for &r in &RS {
                let want = Complex64::new(characteristic_function(a, &[r], t), 0.0);
                worst = worst.max(empirical_charfn(&z, &[r])?.z_score(want));
            }
        }
    }
    Ok((worst < 3.0, format!("18 cases, max |z| = {worst:.2}")))
}

fn negative_moments() -> Outcome {
    let (alpha, t) = (1.5, 1.0);
    let s = sample_subordinator_at(StableParams::new(alpha, 1)?, t, 1_000_000, &RngKey::new(300, Domain::Subordinator), EXEC)?;
    let c = one_sided_scale(alpha / 2.0);
    let unit: Vec<f64> = s.iter().map(|v| v / c).collect();
    let mut worst: f64 = 0.0;
    for eps in [0.0, 0.5, 1.0] {
        let p = (eps - 1.0) / 2.0;
        let ours = moment_estimate(&s, p, EXEC)?.mean / subordinator_negative_moment(alpha, eps, t)?;
        let displayed = moment_estimate(&unit, p, EXEC)?.mean / unit_negative_moment(alpha, eps, t)?;
        worst = worst.max((ours - 1.0).abs()).max((displayed - 1.0).abs());
    }
    Ok((worst < 0.02, format!("eps in {{0, 0.5, 1}}, max relative error {:.3}%", 100.0 * worst)))
}

fn counterexample_solutions() -> Outcome {
    let params = calibrate(1.5, 1_000_000, 400, EXEC)?;
    let report = verify_two_solutions(&params, 1_000_000, &verification_times(10, 1.0), 401, EXEC)?;
    let worst = report.rows.iter().filter(|r| r.c <= 2.0).map(|r| r.z_score()).fold(0.0, f64::max);
    // the scale 3 is not a solution and must be rejected
    let ok = report.passes(1.0, 3.0) && report.passes(2.0, 3.0) && !report.passes(3.0, 3.0);
    Ok((ok, format!("M = {}, a = {:.4}, b = {:.4}, max |z| = {worst:.2} over 10 times for Z and 2Z", params.m, params.a, params.b_coef)))
}

fn counterexample_tail() -> Outcome {
    let r = tail_ratio(1.5, 50.0, 10_000_000, 402, EXEC)?;
    let z = r.estimate.z_score(r.limit);
    Ok((z < 3.0, format!("x = 50: {:.4} +- {:.4} vs {:.4} (|z| = {z:.2})", r.estimate.mean, r.estimate.stderr, r.limit)))
}

fn appendix(part: Part, kappa: f64) -> Outcome {
    let mut e = LimitExperiment::new(1.5, kappa);
    e.seed = 500;
    let t = limit_table(&e, part)?;
    let ok = t.all_finite() && t.nonincreasing(2.0) && t.decays_by_half() && t.dominated(3.0);
    let first = t.rows.first().map_or(f64::NAN, |r| r.estimate.mean);
    let last = t.rows.last().map_or(f64::NAN, |r| r.estimate.mean);
    Ok((ok, format!("kappa = {kappa}: delta=1 -> {first:.4}, delta=256 -> {last:.4}, envelope dominates")))
}

fn gradient_scaling() -> Outcome {
    let z = ConstantDrift::zero(1, 1.5)?;
    let grid = Arc::new(log_lag_grid(1e-3, 12)?);
    let nu = MeasureFlow::constant(grid.clone(), EmpiricalMeasure::dirac(&[0.0])?);
    let ctx = KernelContext::new(&z, &nu)?;
    let paths = path_bank(1.5, grid.clone(), 100_000, 600, EXEC)?;
    let mut ok = true;
    let mut detail = Vec::new();
    for eps in [0.0, 1.0] {
        let r = gradient_scaling_check(&ctx, &paths, &grid.nodes()[1..], eps, EXEC)?;
        ok &= r.slope_within(0.1);
        detail.push(format!("eps={eps}: {:.4} vs {:.4}", r.fit.slope, r.expected_slope));
    }
    Ok((ok, detail.join(", ")))
}

fn duhamel() -> Outcome {
    let fam = BuiltinFamily::standard(1, 1.5)?;
    let gamma = EmpiricalMeasure::dirac(&[0.3])?;
    let mut cfg = SolverConfig::new(10_000, Arc::new(TimeGrid::uniform(0.5, 200)?));
    cfg.master_seed = 700;
    let flow = outer_fixed_point(&gamma, &fam, &cfg, None)?.flow;
    let r = duhamel_residual(&Tanh, &fam, &flow, &flow, &[0.3], 100_000, 701, GradientMode::Analytic, EXEC)?;
    let zero = ConstantDrift::zero(1, 1.5)?;
    let r0 = duhamel_residual(&Tanh, &zero, &flow, &flow, &[0.3], 100_000, 702, GradientMode::Analytic, EXEC)?;
    let ok = r.passes(3.0, DUHAMEL_FLOOR) && r0.passes(3.0, 0.0);
    Ok((
        ok,
        format!(
            "builtin residual {:.1e} +- {:.1e}, zero drift {:.1e} +- {:.1e}",
            r.residual.mean, r.residual.stderr, r0.residual.mean, r0.residual.stderr
        ),
    ))
}

fn builtin_config() -> Result<(BuiltinFamily, SolverConfig)> {
    let fam = BuiltinFamily::standard(1, 1.5)?;
    let mut cfg = SolverConfig::new(10_000, Arc::new(TimeGrid::uniform(1.0, 200)?));
    cfg.master_seed = 800;
    Ok((fam, cfg))
}

fn uniqueness() -> Outcome {
    let (fam, cfg) = builtin_config()?;
    let gamma = EmpiricalMeasure::dirac(&[0.0])?;
    let a = outer_fixed_point(&gamma, &fam, &cfg, None)?;
    let far = MeasureFlow::constant(cfg.grid.clone(), EmpiricalMeasure::dirac(&[3.0])?);
    let b = outer_fixed_point(&gamma, &fam, &cfg, Some(&far))?;
    let gap = damped_sup_distance(&a.flow, &b.flow, cfg.delta, FlowCombo::KvarPlusK, &cfg.metric(&fam), EXEC)?;
    Ok((gap < 2.0 * cfg.tol_outer, format!("gap {gap:.2e} < {:.0e}", 2.0 * cfg.tol_outer)))
}

fn contraction() -> Outcome {
    let (fam, cfg) = builtin_config()?;
    let t = contraction_estimate(&EmpiricalMeasure::dirac(&[0.0])?, &fam, &cfg, &[5.0, 20.0, 80.0], &[0.5])?;
    let monotone = t.rows.windows(2).all(|w| w[1].ratio <= w[0].ratio);
    let bound = -(1.0 - 1.0 / fam.constants().alpha) + 0.15;
    let ratios: Vec<String> = t.rows.iter().map(|r| format!("{:.4}", r.ratio)).collect();
    Ok((monotone && t.slope <= bound, format!("ratios [{}], slope {:.3} <= {bound:.3}", ratios.join(", "), t.slope)))
}

fn moments() -> Outcome {
    let (fam, mut cfg) = builtin_config()?;
    cfg.n_particles = 4_000;
    let l = moment_ladder(&fam, &cfg, &[1.0, 10.0, 100.0])?;
    Ok((l.fit.r_squared > 0.999, format!("R^2 = {:.6}", l.fit.r_squared)))
}

fn metric_oracles() -> Outcome {
    let lp = common::lp_oracle_max_error(900, 60);
    let (checked, excess) = common::holder_dual_check(901, 10, 100);
    let ok = lp < 1e-8 && checked == 1000 && excess <= 1e-8;
    Ok((ok, format!("60 LP instances max error {lp:.1e}; {checked} dual test functions, max excess {excess:.1e}")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("laplace transform", laplace),
        ("characteristic function", charfn),
        ("negative moments", negative_moments),
        ("counterexample two solutions", counterexample_solutions),
        ("counterexample tail ratio", counterexample_tail),
        ("damped limit part i", || appendix(Part::I, 0.3)),
        ("damped limit part ii", || appendix(Part::Ii, 0.9)),
        ("kernel gradient scaling", gradient_scaling),
        ("duhamel identity", duhamel),
        ("fixed-point uniqueness", uniqueness),
        ("contraction rate", contraction),
        ("moment bound", moments),
        ("metric oracles", metric_oracles),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!("{} {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {}", if failed == 0 { "all criteria pass".to_string() } else { format!("{failed} failed") });
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
