//! TOML experiment configuration. Every table rejects unknown keys.

use std::path::PathBuf;

use anyhow::{bail, Context};
use mvstable::appendix_limits::{LimitExperiment, Part};
use mvstable::coefficients::{BuiltinFamily, Coefficients, Constants, ConstantDrift};
use mvstable::kernel_checks::GradientMode;
use mvstable::measure::Binning;
use mvstable::solver::SolverConfig;
use mvstable::{EmpiricalMeasure, Execution, TimeGrid};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate,
    Counterexample,
    Limits,
    KernelCheck,
    MetricsSelftest,
    Contraction,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Simulate,
        Experiment::Counterexample,
        Experiment::Limits,
        Experiment::KernelCheck,
        Experiment::MetricsSelftest,
        Experiment::Contraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Counterexample => "counterexample",
            Experiment::Limits => "limits",
            Experiment::KernelCheck => "kernel-check",
            Experiment::MetricsSelftest => "metrics-selftest",
            Experiment::Contraction => "contraction",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Experiment::Simulate => "solve the particle system; flow.csv, iterations.json, laplace.csv",
            Experiment::Counterexample => "two solutions of the singular-sigma equation; counterexample.json, tail_ratio.csv",
            Experiment::Limits => "damped subordinator functionals over a delta ladder; limit_<part>.csv/json",
            Experiment::KernelCheck => "heat-kernel scaling, perturbation or Duhamel check; kernel_<check>.csv/json",
            Experiment::MetricsSelftest => "transport and variation metrics against exact oracles; metrics_selftest.json",
            Experiment::Contraction => "contraction of the noise-flow map over delta; contraction.csv/json",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required by `run`; the direct subcommands fill it in.
    #[serde(default)]
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub contraction: ContractionSection,
    #[serde(default)]
    pub counterexample: CounterexampleSection,
    #[serde(default)]
    pub limits: LimitsSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Builtin,
    Constant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub dim: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Defaults to `max(1, 0.8 alpha)` rounded to one decimal.
    pub k: Option<f64>,
    pub eta: f64,
    /// `(c1, c2, c3)` of the built-in family.
    pub c: [f64; 3],
    /// Drift vector of the constant family; zeros by default.
    pub drift: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Builtin,
            dim: 1,
            alpha: 1.5,
            beta: 0.6,
            k: None,
            eta: 0.5,
            c: [0.5, 0.5, 0.25],
            drift: None,
        }
    }
}

impl ModelConfig {
    pub fn k(&self) -> f64 {
        self.k.unwrap_or_else(|| BuiltinFamily::default_k(self.alpha))
    }

    fn drift(&self) -> Vec<f64> {
        self.drift.clone().unwrap_or_else(|| vec![0.0; self.dim])
    }

    pub fn constants(&self) -> Constants {
        match self.family {
            Family::Builtin => {
                BuiltinFamily::constants_for(self.alpha, self.beta, self.k(), self.eta, (self.c[0], self.c[1], self.c[2]))
            }
            Family::Constant => ConstantDrift::constants_for(&self.drift(), self.alpha, self.k(), self.eta),
        }
    }

    pub fn build(&self) -> mvstable::Result<Box<dyn Coefficients>> {
        Ok(match self.family {
            Family::Builtin => Box::new(BuiltinFamily::new(
                self.dim,
                self.alpha,
                self.beta,
                self.k(),
                self.eta,
                (self.c[0], self.c[1], self.c[2]),
            )?),
            Family::Constant => Box::new(ConstantDrift::new(self.drift(), self.alpha, self.k(), self.eta)?),
        })
    }

    fn check(&self, errors: &mut Vec<String>) {
        if !(1..=3).contains(&self.dim) {
            errors.push(format!("model.dim must be 1, 2 or 3, got {}", self.dim));
        }
        if self.family == Family::Builtin && self.c.iter().any(|c| !(*c >= 0.0)) {
            errors.push(format!("model.c must be nonnegative, got {:?}", self.c));
        }
        if self.family == Family::Constant && self.drift().len() != self.dim {
            errors.push(format!("model.drift has {} entries, expected dim = {}", self.drift().len(), self.dim));
        }
        errors.extend(self.constants().violations());
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 200 }
    }
}

impl GridConfig {
    pub fn build(&self) -> mvstable::Result<Arc<TimeGrid>> {
        Ok(Arc::new(TimeGrid::uniform(self.horizon, self.steps)?))
    }

    fn check(&self, errors: &mut Vec<String>) {
        if let Err(e) = TimeGrid::uniform(self.horizon, self.steps) {
            errors.push(format!("grid: {e}"));
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub particles: usize,
    pub delta: f64,
    pub tol_inner: f64,
    pub tol_outer: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub bins: usize,
    pub transport_atoms: usize,
    /// Atoms of the uniform initial law, each of length `model.dim`; the origin by default.
    pub initial: Option<Vec<Vec<f64>>>,
    pub write_ensemble: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            particles: 10_000,
            delta: 20.0,
            tol_inner: 1e-3,
            tol_outer: 1e-2,
            max_inner: 50,
            max_outer: 50,
            bins: 64,
            transport_atoms: 100,
            initial: None,
            write_ensemble: false,
        }
    }
}

impl SolverSection {
    fn initial_atoms(&self, dim: usize) -> Vec<Vec<f64>> {
        self.initial.clone().unwrap_or_else(|| vec![vec![0.0; dim]])
    }

    pub fn initial_law(&self, dim: usize) -> mvstable::Result<EmpiricalMeasure> {
        let mut atoms = Vec::new();
        for a in &self.initial_atoms(dim) {
            if a.len() != dim {
                return Err(mvstable::Error::Dimension { expected: dim, got: a.len() });
            }
            atoms.extend_from_slice(a);
        }
        EmpiricalMeasure::uniform(dim, atoms)
    }

    pub fn build(&self, grid: Arc<TimeGrid>, seed: u64) -> SolverConfig {
        let mut c = SolverConfig::new(self.particles, grid);
        c.delta = self.delta;
        c.tol_inner = self.tol_inner;
        c.tol_outer = self.tol_outer;
        c.max_inner = self.max_inner;
        c.max_outer = self.max_outer;
        c.binning = Binning::Auto { bins: self.bins };
        c.transport_atoms = self.transport_atoms;
        c.master_seed = seed;
        c.exec = Execution::Parallel;
        c
    }

    fn check(&self, dim: usize, errors: &mut Vec<String>) {
        let initial = self.initial_atoms(dim);
        if initial.is_empty() {
            errors.push("solver.initial needs at least one atom".into());
        }
        if let Some(a) = initial.iter().find(|a| a.len() != dim) {
            errors.push(format!("solver.initial atom {a:?} has length {}, expected dim = {dim}", a.len()));
        }
        if self.bins == 0 || self.transport_atoms < 2 || self.max_inner == 0 || self.max_outer == 0 {
            errors.push("solver.bins, solver.max_inner and solver.max_outer must be positive; transport_atoms at least 2".into());
        }
        if let Err(e) = self.build(Arc::new(TimeGrid::uniform(1.0, 1).expect("unit grid")), 0).validate() {
            errors.push(format!("solver: {e}"));
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractionSection {
    pub deltas: Vec<f64>,
    /// Translation of the perturbed noise flow; `0.5 e_1` by default.
    pub shift: Option<Vec<f64>>,
}

impl Default for ContractionSection {
    fn default() -> Self {
        Self {
            deltas: vec![5.0, 20.0, 80.0],
            shift: None,
        }
    }
}

impl ContractionSection {
    pub fn shift(&self, dim: usize) -> Vec<f64> {
        self.shift.clone().unwrap_or_else(|| {
            let mut v = vec![0.0; dim];
            v[0] = 0.5;
            v
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterexampleSection {
    pub alpha: f64,
    pub calibration_samples: usize,
    pub samples: usize,
    pub times: usize,
    pub horizon: f64,
    pub tail_x: Vec<f64>,
    pub tail_samples: usize,
}

impl Default for CounterexampleSection {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            calibration_samples: 1_000_000,
            samples: 1_000_000,
            times: 10,
            horizon: 1.0,
            tail_x: vec![2.0, 5.0, 10.0, 20.0, 50.0],
            tail_samples: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsSection {
    pub part: String,
    pub alpha: f64,
    /// Defaults to 0.3 for part i and 0.9 for part ii.
    pub kappa: Option<f64>,
    pub horizon: f64,
    pub deltas: Vec<f64>,
    pub epsilon: f64,
    pub paths: usize,
    pub steps: usize,
    pub theta: Option<f64>,
    pub refine: bool,
}

impl Default for LimitsSection {
    fn default() -> Self {
        let e = LimitExperiment::new(1.5, 0.3);
        Self {
            part: "i".into(),
            alpha: e.alpha,
            kappa: None,
            horizon: e.horizon,
            deltas: e.deltas,
            epsilon: e.epsilon,
            paths: e.n_paths,
            steps: e.steps,
            theta: None,
            refine: false,
        }
    }
}

impl LimitsSection {
    pub fn part(&self) -> mvstable::Result<Part> {
        Part::parse(&self.part)
    }

    pub fn experiment(&self, seed: u64) -> mvstable::Result<(Part, LimitExperiment)> {
        let part = self.part()?;
        let kappa = self.kappa.unwrap_or(match part {
            Part::I => 0.3,
            Part::Ii => 0.9,
        });
        let mut e = LimitExperiment::new(self.alpha, kappa);
        e.horizon = self.horizon;
        e.deltas = self.deltas.clone();
        e.epsilon = self.epsilon;
        e.n_paths = self.paths;
        e.steps = self.steps;
        e.theta = self.theta;
        e.refine = self.refine;
        e.seed = seed;
        e.exec = Execution::Parallel;
        Ok((part, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KernelCheck {
    Scaling,
    Perturbation,
    Duhamel,
}

impl KernelCheck {
    pub fn name(self) -> &'static str {
        match self {
            KernelCheck::Scaling => "scaling",
            KernelCheck::Perturbation => "perturbation",
            KernelCheck::Duhamel => "duhamel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientChoice {
    Analytic,
    IntegrationByParts,
    FiniteDifference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub check: KernelCheck,
    /// Subordinator paths for the scaling and perturbation checks.
    pub paths: usize,
    pub tau_min: f64,
    pub lags: usize,
    /// Exponents of the scaling check; `k` is appended when absent.
    pub epsilons: Vec<f64>,
    pub slope_tolerance: f64,
    /// Perturbation: `nu2 = (1 - lambda) nu1 + lambda target`.
    pub lambdas: Vec<f64>,
    pub base_atoms: Vec<f64>,
    pub target_atoms: Vec<f64>,
    pub s: f64,
    pub t: f64,
    pub epsilon: f64,
    /// Duhamel: start point (`0.3 e_1` by default), particle counts and gradient evaluation.
    pub x0: Option<Vec<f64>>,
    pub particles: usize,
    pub flow_particles: usize,
    pub gradient: GradientChoice,
    pub fd_step: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            check: KernelCheck::Scaling,
            paths: 100_000,
            tau_min: 1e-3,
            lags: 12,
            epsilons: vec![0.0, 1.0],
            slope_tolerance: 0.1,
            lambdas: vec![0.4, 0.1, 0.04, 0.01, 0.004],
            base_atoms: vec![-0.7, -0.2, 0.3, 0.8, 1.3],
            target_atoms: vec![1.0, 2.0, 3.0],
            s: 0.0,
            t: 1.0,
            epsilon: 0.5,
            x0: None,
            particles: 100_000,
            flow_particles: 10_000,
            gradient: GradientChoice::Analytic,
            fd_step: 1e-4,
        }
    }
}

impl KernelSection {
    pub fn x0(&self, dim: usize) -> Vec<f64> {
        self.x0.clone().unwrap_or_else(|| {
            let mut v = vec![0.0; dim.max(1)];
            v[0] = 0.3;
            v
        })
    }

    pub fn gradient_mode(&self) -> GradientMode {
        match self.gradient {
            GradientChoice::Analytic => GradientMode::Analytic,
            GradientChoice::IntegrationByParts => GradientMode::IntegrationByParts,
            GradientChoice::FiniteDifference => GradientMode::FiniteDifference { h: self.fd_step },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub instances: usize,
    pub dual_functions: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            instances: 60,
            dual_functions: 1000,
        }
    }
}

fn alpha_window(section: &str, alpha: f64, errors: &mut Vec<String>) {
    if !(alpha > 1.0 && alpha < 2.0) {
        errors.push(format!("(A1) requires α∈(1,2), got {section}.alpha = {alpha}"));
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("invalid configuration")
    }

    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn experiment(&self) -> anyhow::Result<Experiment> {
        match self.experiment {
            Some(e) => Ok(e),
            None => bail!("config does not name an experiment (set `experiment = \"...\"`)"),
        }
    }

    /// Canonical TOML of the resolved configuration; hashed into the manifest.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every schema and assumption-window violation for the chosen experiment.
    /// Checks the sections the named experiment reads, or every section when none is named.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        match self.experiment {
            Some(exp) => self.check(exp, &mut errors),
            None => Experiment::ALL.iter().for_each(|&e| self.check(e, &mut errors)),
        }
        let mut seen = std::collections::HashSet::new();
        errors.retain(|e| seen.insert(e.clone()));
        errors
    }

    fn check(&self, exp: Experiment, errors: &mut Vec<String>) {
        match exp {
            Experiment::Simulate | Experiment::Contraction => {
                self.model.check(errors);
                self.grid.check(errors);
                self.solver.check(self.model.dim, errors);
                if exp == Experiment::Contraction {
                    let c = &self.contraction;
                    if c.deltas.len() < 3 || c.deltas.iter().any(|d| !(*d > 0.0)) {
                        errors.push("contraction.deltas needs at least three positive values".into());
                    }
                    if c.shift(self.model.dim.max(1)).len() != self.model.dim {
                        errors.push(format!("contraction.shift must have length dim = {}", self.model.dim));
                    }
                }
            }
            Experiment::Counterexample => {
                let c = &self.counterexample;
                alpha_window("counterexample", c.alpha, errors);
                if c.calibration_samples < 100_000 || c.tail_samples < 100_000 {
                    errors.push("counterexample calibration and tail estimates need at least 1e5 samples".into());
                }
                if c.samples == 0 || c.times == 0 || !(c.horizon > 0.0) {
                    errors.push("counterexample.samples, times and horizon must be positive".into());
                }
                if c.tail_x.is_empty() || c.tail_x.iter().any(|x| !(*x > 0.0)) {
                    errors.push("counterexample.tail_x must be nonempty and positive".into());
                }
            }
            Experiment::Limits => {
                alpha_window("limits", self.limits.alpha, errors);
                match self.limits.experiment(self.seed) {
                    Ok((part, e)) => {
                        if let Err(err) = e.validate(part) {
                            errors.push(format!("limits: {err}"));
                        }
                    }
                    Err(err) => errors.push(format!("limits.part: {err}")),
                }
            }
            Experiment::KernelCheck => {
                self.model.check(errors);
                self.grid.check(errors);
                let k = &self.kernel;
                if self.model.dim > 2 {
                    errors.push("kernel checks support dim 1 or 2".into());
                }
                if k.paths < 1000 {
                    errors.push("kernel.paths must be at least 1e3".into());
                }
                match k.check {
                    KernelCheck::Scaling => {
                        if !(k.tau_min > 0.0 && k.tau_min < 1.0) || k.lags < 4 {
                            errors.push("kernel.tau_min must lie in (0,1) with at least 4 lags".into());
                        }
                        if k.epsilons.iter().any(|e| !(*e >= 0.0 && *e < self.model.alpha)) {
                            errors.push("kernel.epsilons must lie in [0, alpha)".into());
                        }
                    }
                    KernelCheck::Perturbation => {
                        if self.model.dim != 1 {
                            errors.push("the perturbation check is one-dimensional".into());
                        }
                        if k.lambdas.is_empty() || k.lambdas.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
                            errors.push("kernel.lambdas must lie in (0,1]".into());
                        }
                        if k.base_atoms.is_empty() || k.target_atoms.is_empty() {
                            errors.push("kernel.base_atoms and kernel.target_atoms must be nonempty".into());
                        }
                        if !(k.s >= 0.0 && k.s < k.t && k.t <= self.grid.horizon) {
                            errors.push("kernel.s and kernel.t need 0 <= s < t <= grid.horizon".into());
                        }
                        if !(k.epsilon >= 0.0 && k.epsilon < self.model.alpha) {
                            errors.push("kernel.epsilon must lie in [0, alpha)".into());
                        }
                    }
                    KernelCheck::Duhamel => {
                        if k.x0(self.model.dim).len() != self.model.dim {
                            errors.push(format!("kernel.x0 must have length dim = {}", self.model.dim));
                        }
                        if k.particles < 2 || k.flow_particles < 2 {
                            errors.push("kernel.particles and kernel.flow_particles must be at least 2".into());
                        }
                        if k.gradient == GradientChoice::FiniteDifference && !(k.fd_step > 0.0) {
                            errors.push("kernel.fd_step must be positive".into());
                        }
                    }
                }
            }
            Experiment::MetricsSelftest => {
                if self.metrics.instances == 0 || self.metrics.dual_functions == 0 {
                    errors.push("metrics.instances and metrics.dual_functions must be positive".into());
                }
            }
        }
    }
}
