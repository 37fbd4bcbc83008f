//! One runner per experiment. Each writes its artifacts through [`Artifacts`]
//! and returns a short human-readable summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use mvstable::appendix_limits::limit_table;
use mvstable::counterexample::{calibrate, tail_ratios, verification_times, verify_two_solutions, SOLUTION_SCALES};
use mvstable::kernel_checks::{
    duhamel_residual, gradient_scaling_check, log_lag_grid, path_bank, perturbation_sweep, KernelContext, Tanh, DUHAMEL_FLOOR,
};
use mvstable::measure::io::write_flow_csv;
use mvstable::measure::{total_variation, transport, wasserstein, weighted_variation, BinningSpec, DistanceReport};
use mvstable::solver::{contraction_estimate, outer_fixed_point};
use mvstable::stable_paths::{empirical_laplace, laplace_transform, sample_subordinator_at, StableParams};
use mvstable::{Domain, EmpiricalMeasure, Execution, MeasureFlow, RngKey};
use rand::Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Experiment, ExperimentConfig, KernelCheck};

const EXEC: Execution = Execution::Parallel;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes files into one directory and remembers their digests.
pub struct Artifacts {
    dir: PathBuf,
    pub files: Vec<(String, String)>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let probe = dir.join(".write-probe");
        fs::write(&probe, b"").with_context(|| format!("output directory {} is not writable", dir.display()))?;
        fs::remove_file(&probe)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        debug_assert!(!name.contains('/') && !name.contains(".."));
        fs::write(self.dir.join(name), bytes).with_context(|| format!("cannot write {name}"))?;
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

pub fn run(cfg: &ExperimentConfig, out: &mut Artifacts) -> anyhow::Result<String> {
    match cfg.experiment()? {
        Experiment::Simulate => simulate(cfg, out),
        Experiment::Contraction => contraction(cfg, out),
        Experiment::Counterexample => counterexample(cfg, out),
        Experiment::Limits => limits(cfg, out),
        Experiment::KernelCheck => kernel(cfg, out),
        Experiment::MetricsSelftest => metrics_selftest(cfg, out),
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn simulate(cfg: &ExperimentConfig, out: &mut Artifacts) -> anyhow::Result<String> {
    let coeffs = cfg.model.build()?;
    let grid = cfg.grid.build()?;
    let solver = cfg.solver.build(grid, cfg.seed);
    let gamma = cfg.solver.initial_law(cfg.model.dim)?;
    let sol = outer_fixed_point(&gamma, coeffs.as_ref(), &solver, None)?;

    let mut buf = Vec::new();
    write_flow_csv(&mut buf, &sol.flow)?;
    out.write("flow.csv", &buf)?;
    out.json("iterations.json", &sol.report)?;
    if cfg.solver.write_ensemble {
        let ens = &sol.ensemble;
        let mut s = String::from("t,particle");
        (1..=ens.dim()).for_each(|i| write!(s, ",x_{i}").unwrap());
        s.push('\n');
        for (j, t) in ens.grid().nodes().iter().enumerate() {
            for p in 0..ens.len() {
                write!(s, "{t},{p}").unwrap();
                ens.state(j, p).iter().for_each(|v| write!(s, ",{v}").unwrap());
                s.push('\n');
            }
        }
        out.write("ensemble.csv", s.as_bytes())?;
    }

    // Laplace transform of the subordinator behind the driving noise
    let alpha = cfg.model.alpha;
    let params = StableParams::new(alpha, 1)?;
    let key = RngKey::new(cfg.seed, Domain::Verification).child(1);
    let mut csv = String::from("alpha,t,r,estimate,stderr,exact\n");
    for (i, t) in [0.5, 1.0].into_iter().enumerate() {
        let s = sample_subordinator_at(params, t, solver.n_particles, &key.child(i as u64), EXEC)?;
        for r in [0.5, 1.0, 2.0] {
            let e = empirical_laplace(&s, r)?;
            writeln!(csv, "{alpha},{t},{r},{},{},{}", e.mean, e.stderr, laplace_transform(alpha, r, t)).unwrap();
        }
    }
    out.write("laplace.csv", csv.as_bytes())?;

    Ok(format!(
        "converged after {} outer iterations (residual {:.3e}), {} particles x {} steps",
        sol.report.outer.iterations,
        sol.report.outer.final_residual(),
        sol.report.n_particles,
        sol.report.steps
    ))
}

fn contraction(cfg: &ExperimentConfig, out: &mut Artifacts) -> anyhow::Result<String> {
    let coeffs = cfg.model.build()?;
    let solver = cfg.solver.build(cfg.grid.build()?, cfg.seed);
    let gamma = cfg.solver.initial_law(cfg.model.dim)?;
    let shift = cfg.contraction.shift(cfg.model.dim);
    let table = contraction_estimate(&gamma, coeffs.as_ref(), &solver, &cfg.contraction.deltas, &shift)?;
    let mut csv = String::from("delta,input_distance,output_distance,ratio\n");
    for r in &table.rows {
        writeln!(csv, "{},{},{},{}", r.delta, r.input_distance, r.output_distance, r.ratio).unwrap();
    }
    out.write("contraction.csv", csv.as_bytes())?;
    let alpha = cfg.model.alpha;
    let reference = -(1.0 - 1.0 / alpha);
    let monotone = table.rows.windows(2).all(|w| w[1].ratio <= w[0].ratio);
    let pass = monotone && table.slope <= reference + 0.15;
    out.json(
        "contraction.json",
        &json!({
            "rows": table.rows,
            "shift": table.shift,
            "slope": table.slope,
            "reference_slope": reference,
            "slope_margin": 0.15,
            "ratios_nonincreasing": monotone,
            "pass": pass,
        }),
    )?;
    Ok(format!("slope {:.3} (reference {reference:.3}), {}", table.slope, verdict(pass)))
}

fn counterexample(cfg: &ExperimentConfig, out: &mut Artifacts) -> anyhow::Result<String> {
    let c = &cfg.counterexample;
    let mut params = calibrate(c.alpha, c.calibration_samples, cfg.seed, EXEC)?;
    params.horizon = c.horizon;
    let times = verification_times(c.times, c.horizon);
    let report = verify_two_solutions(&params, c.samples, &times, cfg.seed.wrapping_add(1), EXEC)?;
    let tails = tail_ratios(c.alpha, &c.tail_x, c.tail_samples, cfg.seed.wrapping_add(2), EXEC)?;

    let passes: serde_json::Map<String, serde_json::Value> =
        SOLUTION_SCALES.iter().map(|&s| (format!("c={s}"), json!(report.passes(s, 3.0)))).collect();
    let two_solutions = report.passes(1.0, 3.0) && report.passes(2.0, 3.0);
    out.json(
        "counterexample.json",
        &json!({
            "alpha": params.alpha,
            "M": params.m,
            "a": params.a,
            "b": params.b_coef,
            "params": params,
            "n_samples": report.n_samples,
            "rows": report.rows,
            "passes_within_3se": passes,
            "two_solutions": two_solutions,
        }),
    )?;
    let mut csv = String::from("x,estimate,stderr,limit,tail_hits,band_hits\n");
    for t in &tails {
        writeln!(csv, "{},{},{},{},{},{}", t.x, t.estimate.mean, t.estimate.stderr, t.limit, t.tail_hits, t.band_hits).unwrap();
    }
    out.write("tail_ratio.csv", csv.as_bytes())?;
    Ok(format!(
        "M = {}, a = {:.4}, b = {:.4}; c = 1 and c = 2 both solve: {}",
        params.m,
        params.a,
        params.b_coef,
        verdict(two_solutions)
    ))
}

fn limits(cfg: &ExperimentConfig, out: &mut Artifacts) -> anyhow::Result<String> {
    let (part, exp) = cfg.limits.experiment(cfg.seed)?;
    let table = limit_table(&exp, part)?;
    let label = part.label();
    out.write(&format!("limit_{label}.csv"), table.to_csv().as_bytes())?;
    let checks = json!({
        "all_finite": table.all_finite(),
        "nonincreasing_2se": table.nonincreasing(2.0),
        "decays_by_half": table.decays_by_half(),
        "dominated_3se": table.dominated(3.0),
        "max_refinement_change": table.max_refinement_change(),
        "refinement_below_5pct": table.max_refinement_change().map(|c| c < 0.05),
    });
    let pass = table.all_finite() && table.nonincreasing(2.0) && table.decays_by_half() && table.dominated(3.0);
    out.json(
        &format!("limit_{label}.json"),
        &json!({
            "part": label,
            "alpha": table.alpha,
            "kappa": table.kappa,
            "theta": table.theta,
            "epsilon": table.epsilon,
            "n_paths": table.n_paths,
            "steps": table.steps,
            "moments": table.moments,
            "checks": checks,
            "pass": pass,
        }),
    )?;
    Ok(format!("part {label}, kappa = {}: {}", table.kappa, verdict(pass)))
}

fn kernel(cfg: &ExperimentConfig, out: &mut Artifacts) -> anyhow::Result<String> {
    let k = &cfg.kernel;
    let coeffs = cfg.model.build()?;
    let dim = cfg.model.dim;
    let name = k.check.name();
    let (csv, summary, line) = match k.check {
        KernelCheck::Scaling => {
            let grid = std::sync::Arc::new(log_lag_grid(k.tau_min, k.lags)?);
            let nu = MeasureFlow::constant(grid.clone(), EmpiricalMeasure::dirac(&vec![0.0; dim])?);
            let ctx = KernelContext::new(coeffs.as_ref(), &nu)?;
            let paths = path_bank(cfg.model.alpha, grid.clone(), k.paths, cfg.seed, EXEC)?;
            let mut eps = k.epsilons.clone();
            let kk = cfg.model.k();
            if !eps.contains(&kk) && kk < cfg.model.alpha {
                eps.push(kk);
            }
            let mut csv = String::from("epsilon,tau,estimate,stderr\n");
            let mut fits = Vec::new();
            let mut pass = true;
            for e in eps {
                let r = gradient_scaling_check(&ctx, &paths, &grid.nodes()[1..], e, EXEC)?;
                for row in &r.rows {
                    writeln!(csv, "{e},{},{},{}", row.tau, row.estimate.mean, row.estimate.stderr).unwrap();
                }
                let ok = r.slope_within(k.slope_tolerance);
                pass &= ok;
                fits.push(json!({
                    "epsilon": e,
                    "slope": r.fit.slope,
                    "slope_stderr": r.fit.slope_stderr,
                    "expected_slope": r.expected_slope,
                    "constant": r.constant,
                    "r_squared": r.fit.r_squared,
                    "pass": ok,
                }));
            }
            let line = format!("{} slopes within {}: {}", fits.len(), k.slope_tolerance, verdict(pass));
            (csv, json!({ "check": name, "fits": fits, "pass": pass }), line)
        }
        KernelCheck::Perturbation => {
            let grid = cfg.grid.build()?;
            let nu1 = MeasureFlow::constant(grid.clone(), EmpiricalMeasure::uniform(1, k.base_atoms.clone())?);
            let target = MeasureFlow::constant(grid.clone(), EmpiricalMeasure::uniform(1, k.target_atoms.clone())?);
            let paths = path_bank(cfg.model.alpha, grid, k.paths, cfg.seed, EXEC)?;
            let rows = perturbation_sweep(coeffs.as_ref(), &nu1, &target, &k.lambdas, &paths, k.s, k.t, k.epsilon)?;
            let mut csv = String::from("lambda,lhs,rhs,ratio,path_bound_violations,max_path_bound_ratio\n");
            for r in &rows {
                let p = &r.report;
                writeln!(csv, "{},{},{},{},{},{}", r.lambda, p.lhs, p.rhs, p.ratio, p.path_bound_violations, p.max_path_bound_ratio)
                    .unwrap();
            }
            let ratios: Vec<f64> = rows.iter().map(|r| r.report.ratio).collect();
            let violations: usize = rows.iter().map(|r| r.report.path_bound_violations).sum();
            let bounded = ratios.iter().all(|r| r.is_finite());
            let pass = bounded && violations == 0;
            let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
            let line = format!("ratio in [{lo:.4}, {hi:.4}], {violations} path-bound violations: {}", verdict(pass));
            let summary = json!({
                "check": name,
                "epsilon": k.epsilon,
                "ratio_min": lo,
                "ratio_max": hi,
                "path_bound_violations": violations,
                "pass": pass,
            });
            (csv, summary, line)
        }
        KernelCheck::Duhamel => {
            let grid = cfg.grid.build()?;
            let mut solver = cfg.solver.build(grid, cfg.seed);
            solver.n_particles = k.flow_particles;
            let x0 = k.x0(dim);
            let gamma = EmpiricalMeasure::dirac(&x0)?;
            let flow = outer_fixed_point(&gamma, coeffs.as_ref(), &solver, None)?.flow;
            let r = duhamel_residual(
                &Tanh,
                coeffs.as_ref(),
                &flow,
                &flow,
                &x0,
                k.particles,
                cfg.seed.wrapping_add(1),
                k.gradient_mode(),
                EXEC,
            )?;
            let mut csv = String::from("term,estimate,stderr\n");
            for (term, e) in [("lhs", r.lhs), ("free", r.free_term), ("integral", r.integral_term), ("residual", r.residual)] {
                writeln!(csv, "{term},{},{}", e.mean, e.stderr).unwrap();
            }
            let pass = r.passes(3.0, DUHAMEL_FLOOR);
            let line = format!("residual {:.2e} +- {:.2e}: {}", r.residual.mean, r.residual.stderr, verdict(pass));
            (csv, json!({ "check": name, "report": r, "floor": DUHAMEL_FLOOR, "pass": pass }), line)
        }
    };
    out.write(&format!("kernel_{name}.csv"), csv.as_bytes())?;
    out.json(&format!("kernel_{name}.json"), &summary)?;
    Ok(line)
}

fn random_measure(rng: &mut impl Rng, n: usize, d: usize, uniform: bool) -> mvstable::Result<EmpiricalMeasure> {
    let atoms: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    if uniform {
        return EmpiricalMeasure::uniform(d, atoms);
    }
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    EmpiricalMeasure::new(d, atoms, w.into_iter().map(|x| x / s).collect())
}

fn cost_matrix(g: &EmpiricalMeasure, h: &EmpiricalMeasure, kappa: f64) -> Vec<f64> {
    let mut c = Vec::with_capacity(g.len() * h.len());
    for (x, _) in g.iter() {
        for (y, _) in h.iter() {
            c.push(euclid(x, y).powf(kappa));
        }
    }
    c
}

fn euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `W_kappa` from a raw optimal cost.
fn from_cost(cost: f64, kappa: f64) -> f64 {
    if kappa > 1.0 {
        cost.powf(1.0 / kappa)
    } else {
        cost
    }
}

fn best_permutation(c: &[f64], n: usize) -> f64 {
    fn go(p: &mut [usize], k: usize, c: &[f64], n: usize, best: &mut f64) {
        if k == p.len() {
            *best = best.min(p.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum::<f64>() / n as f64);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            go(p, k + 1, c, n, best);
            p.swap(k, i);
        }
    }
    let mut p: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    go(&mut p, 0, c, n, &mut best);
    best
}

#[derive(Serialize)]
struct SelfCheck {
    name: &'static str,
    instances: usize,
    max_error: f64,
    tolerance: f64,
    pass: bool,
}

impl SelfCheck {
    fn new(name: &'static str, instances: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name,
            instances,
            max_error,
            tolerance,
            pass: max_error <= tolerance,
        }
    }
}

fn metrics_selftest(cfg: &ExperimentConfig, out: &mut Artifacts) -> anyhow::Result<String> {
    let n = cfg.metrics.instances;
    let mut rng = RngKey::new(cfg.seed, Domain::Auxiliary).stream(0);
    let mut checks = Vec::new();

    // exact solver on uniform 5-atom measures vs the best of all 120 matchings
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let kappa = rng.random_range(0.3..2.5);
        let d = rng.random_range(1..=3);
        let g = random_measure(&mut rng, 5, d, true)?;
        let h = random_measure(&mut rng, 5, d, true)?;
        let want = from_cost(best_permutation(&cost_matrix(&g, &h, kappa), 5), kappa);
        worst = worst.max((wasserstein(&g, &h, kappa)? - want).abs());
    }
    checks.push(SelfCheck::new("transport_vs_permutations", n, worst, 1e-8));

    // 1-d monotone fast path vs the general network simplex
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let kappa = rng.random_range(1.0..2.5);
        let g = random_measure(&mut rng, 7, 1, false)?;
        let h = random_measure(&mut rng, 5, 1, false)?;
        let plan = transport::solve(g.weights(), h.weights(), &cost_matrix(&g, &h, kappa))?;
        worst = worst.max((wasserstein(&g, &h, kappa)? - from_cost(plan.cost, kappa)).abs());
    }
    checks.push(SelfCheck::new("monotone_vs_simplex", n, worst, 1e-8));

    // symmetry and triangle inequality
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let kappa = rng.random_range(0.3..2.5);
        let d = rng.random_range(1..=2);
        let m: Vec<EmpiricalMeasure> = (0..3).map(|_| random_measure(&mut rng, 6, d, false)).collect::<mvstable::Result<_>>()?;
        let (ab, ba) = (wasserstein(&m[0], &m[1], kappa)?, wasserstein(&m[1], &m[0], kappa)?);
        let (bc, ac) = (wasserstein(&m[1], &m[2], kappa)?, wasserstein(&m[0], &m[2], kappa)?);
        worst = worst.max((ab - ba).abs()).max(ac - ab - bc);
    }
    checks.push(SelfCheck::new("metric_axioms", n, worst, 1e-9));

    // kappa-Holder test functions x -> +-min_i (c_i + |x - z_i|^kappa)
    let mut worst = f64::NEG_INFINITY;
    let per_pair = 100;
    let pairs = cfg.metrics.dual_functions.div_ceil(per_pair);
    let mut checked = 0;
    for _ in 0..pairs {
        let kappa = rng.random_range(0.2..=1.0);
        let d = rng.random_range(1..=2);
        let g = random_measure(&mut rng, 8, d, false)?;
        let h = random_measure(&mut rng, 6, d, false)?;
        let w = wasserstein(&g, &h, kappa)?;
        for _ in 0..per_pair.min(cfg.metrics.dual_functions - checked) {
            let centres: Vec<(Vec<f64>, f64)> = (0..rng.random_range(1..5))
                .map(|_| ((0..d).map(|_| rng.random_range(-3.0..3.0)).collect(), rng.random_range(-1.0..1.0)))
                .collect();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let f = |x: &[f64]| sign * centres.iter().map(|(z, c)| c + euclid(x, z).powf(kappa)).fold(f64::INFINITY, f64::min);
            worst = worst.max((g.integrate(f) - h.integrate(f)).abs() - w);
            checked += 1;
        }
    }
    checks.push(SelfCheck::new("holder_dual", checked, worst.max(0.0), 1e-8));

    // worked distance records between two fixed measures
    let g = EmpiricalMeasure::uniform(1, vec![-1.0, 0.0, 2.0])?;
    let h = EmpiricalMeasure::new(1, vec![0.5, 1.5], vec![0.25, 0.75])?;
    let bins = BinningSpec::new(vec![-1.5], vec![2.5], 64)?;
    let bins_json = serde_json::to_value(&bins)?;
    let mut reports = Vec::new();
    for kappa in [0.5, 1.0, 1.2] {
        reports.push(DistanceReport {
            metric: "wasserstein".into(),
            kappa: Some(kappa),
            value: wasserstein(&g, &h, kappa)?,
            estimator_params: json!({ "solver": "exact" }),
        });
    }
    reports.push(DistanceReport {
        metric: "weighted_variation".into(),
        kappa: Some(1.2),
        value: weighted_variation(&g, &h, 1.2, &bins)?,
        estimator_params: json!({ "binning": bins_json }),
    });
    reports.push(DistanceReport {
        metric: "total_variation".into(),
        kappa: None,
        value: total_variation(&g, &h, &bins)?,
        estimator_params: json!({ "binning": bins_json }),
    });

    let pass = checks.iter().all(|c| c.pass);
    out.json("metrics_selftest.json", &json!({ "checks": checks, "reports": reports, "pass": pass }))?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    Ok(if pass {
        format!("{} checks pass", checks.len())
    } else {
        format!("FAIL: {}", failed.join(", "))
    })
}
