//! Drift and noise coefficients, their declared constants, and a numerical
//! audit of the regularity assumptions.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{norm, wasserstein, weighted_variation_exact, EmpiricalMeasure};
use crate::rng::{Domain, RngKey};

/// Constants declared alongside a coefficient set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
    pub eta: f64,
    pub k1: f64,
    pub k2: f64,
    pub b_sup: f64,
}

impl Constants {
    /// Every violated assumption window, as human-readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.alpha > 1.0 && self.alpha < 2.0) {
            v.push(format!("(A1) requires α∈(1,2), got alpha = {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            v.push(format!("(A2) requires beta in (0,1), got {}", self.beta));
        }
        if !(2.0 * self.beta + self.alpha > 2.0) {
            v.push(format!(
                "(A2) requires β satisfying 2β+α>2, got 2*{}+{} = {}",
                self.beta,
                self.alpha,
                2.0 * self.beta + self.alpha
            ));
        }
        if !(self.k >= 1.0 && self.k < self.alpha) {
            v.push(format!("(A2) requires k∈[1,α), got k = {} with alpha = {}", self.k, self.alpha));
        }
        if !(self.k1 > 0.0) || !self.k1.is_finite() {
            v.push(format!("(A2) requires K1 > 0, got {}", self.k1));
        }
        if !(self.b_sup >= 0.0) || !self.b_sup.is_finite() {
            v.push(format!("(A2) requires a finite sup-norm bound for b, got {}", self.b_sup));
        }
        if !(self.k2 >= 1.0) || !self.k2.is_finite() {
            v.push(format!("(A3) requires constants K2>=1, got {}", self.k2));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            v.push(format!("(A3) requires eta in (0,1), got {}", self.eta));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some(msg) => Err(Error::Assumption {
                assumption: if msg.starts_with("(A1)") {
                    "(A1)"
                } else if msg.starts_with("(A2)") {
                    "(A2)"
                } else {
                    "(A3)"
                },
                detail: msg,
            }),
        }
    }
}

/// Drift `x -> b_t(x, mu)` with time and measure frozen; writes into `out`.
pub type DriftField<'a> = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync + 'a>;

/// Coefficients `b_t(x, mu)` and `sigma_t(mu)` of the McKean-Vlasov equation.
///
/// `sigma` has no space argument. Implementations return errors instead of
/// panicking; callers attach context.
pub trait Coefficients: Send + Sync {
    fn name(&self) -> &str;

    /// State dimension `d`.
    fn dim(&self) -> usize;

    /// Noise dimension `m`.
    fn noise_dim(&self) -> usize;

    fn constants(&self) -> &Constants;

    /// The drift with `(t, mu)` frozen, so per-measure work is done once.
    fn drift_field<'a>(&'a self, t: f64, mu: &'a EmpiricalMeasure) -> Result<DriftField<'a>>;

    /// `d x m` noise matrix.
    fn sigma(&self, t: f64, nu: &EmpiricalMeasure) -> Result<DMatrix<f64>>;

    /// True when `b` ignores its measure argument.
    fn drift_ignores_measure(&self) -> bool {
        false
    }

    /// True when `sigma` ignores its measure argument.
    fn sigma_ignores_measure(&self) -> bool {
        false
    }

    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        let field = self.drift_field(t, mu)?;
        let mut out = vec![0.0; self.dim()];
        field(x, &mut out);
        Ok(out)
    }
}

/// Eigenvalue range of `sigma sigma^*`.
pub fn ellipticity(sigma: &DMatrix<f64>) -> (f64, f64) {
    let a = sigma * sigma.transpose();
    let eig = a.symmetric_eigenvalues();
    (eig.min(), eig.max())
}

/// Evaluates `sigma` and enforces `K2^{-1} I <= sigma sigma^* <= K2 I`.
pub fn checked_sigma(coeffs: &dyn Coefficients, t: f64, nu: &EmpiricalMeasure) -> Result<DMatrix<f64>> {
    let s = coeffs.sigma(t, nu)?;
    if s.nrows() != coeffs.dim() || s.ncols() != coeffs.noise_dim() {
        return Err(Error::Dimension {
            expected: coeffs.dim() * coeffs.noise_dim(),
            got: s.nrows() * s.ncols(),
        });
    }
    let k2 = coeffs.constants().k2;
    let (lo, hi) = ellipticity(&s);
    let slack = 1e-12;
    if !(lo >= 1.0 / k2 - slack && hi <= k2 + slack) {
        return Err(Error::Assumption {
            assumption: "(A3)",
            detail: format!(
                "sigma sigma^* eigenvalues [{lo}, {hi}] at t = {t} leave [1/K2, K2] = [{}, {k2}]",
                1.0 / k2
            ),
        });
    }
    Ok(s)
}

fn check_dim(coeffs_dim: usize, x: &[f64]) -> Result<()> {
    if x.len() == coeffs_dim {
        Ok(())
    } else {
        Err(Error::Dimension {
            expected: coeffs_dim,
            got: x.len(),
        })
    }
}

/// Test family satisfying (A1)-(A3):
///
/// `b_t(x, mu) = c1 cos(t) x min(|x|,1)^beta / |x| + c2 mu(tanh|.|) e_1` and
/// `sigma_t(mu) = (1 + c3 tanh(min(|mean(mu)|, 1))) I`.
///
/// The space part is bounded by `c1` and `beta`-Hölder with constant at most
/// `2 c1`; `mu(tanh|.|)` is 1-Lipschitz under `W_1 <= W_k`, and the mean is
/// 1-Lipschitz under `W_1`.
#[derive(Debug, Clone)]
pub struct BuiltinFamily {
    dim: usize,
    c1: f64,
    c2: f64,
    c3: f64,
    constants: Constants,
}

/// Default `(c1, c2, c3)` of the built-in family.
pub const BUILTIN_DEFAULTS: (f64, f64, f64) = (0.5, 0.5, 0.25);

impl BuiltinFamily {
    /// Builds the family with constants derived from `(c1, c2, c3)`.
    pub fn new(dim: usize, alpha: f64, beta: f64, k: f64, eta: f64, c: (f64, f64, f64)) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("dim", 0.0, "dimension must be positive"));
        }
        let (c1, c2, c3) = c;
        if !(c1 >= 0.0 && c2 >= 0.0 && c3 >= 0.0) {
            return Err(Error::domain("c", c1.min(c2).min(c3), "family constants must be nonnegative"));
        }
        let constants = Self::constants_for(alpha, beta, k, eta, c);
        constants.validate()?;
        Ok(Self {
            dim,
            c1,
            c2,
            c3,
            constants,
        })
    }

    /// Constants the family declares for these parameters, before validation.
    pub fn constants_for(alpha: f64, beta: f64, k: f64, eta: f64, c: (f64, f64, f64)) -> Constants {
        let (c1, c2, c3) = c;
        Constants {
            alpha,
            beta,
            k,
            eta,
            k1: (2.0 * (c1 + c2)).max(1e-12),
            k2: (1.0 + c3).powi(2),
            b_sup: c1 + c2,
        }
    }

    /// `max(1, 0.8 alpha)` rounded to one decimal, inside `[1, alpha)` for `alpha > 1.05`.
    pub fn default_k(alpha: f64) -> f64 {
        1.0f64.max((alpha * 8.0).round() / 10.0)
    }

    pub fn standard(dim: usize, alpha: f64) -> Result<Self> {
        Self::new(dim, alpha, 0.6, Self::default_k(alpha), 0.5, BUILTIN_DEFAULTS)
    }
}

fn holder_part(x: &[f64], beta: f64, out: &mut [f64], scale: f64) {
    let r = norm(x);
    if r == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let f = scale * r.min(1.0).powf(beta) / r;
    out.iter_mut().zip(x).for_each(|(o, v)| *o = f * v);
}

impl Coefficients for BuiltinFamily {
    fn name(&self) -> &str {
        "builtin"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.dim
    }

    fn constants(&self) -> &Constants {
        &self.constants
    }

    fn drift_field<'a>(&'a self, t: f64, mu: &'a EmpiricalMeasure) -> Result<DriftField<'a>> {
        check_dim(self.dim, &vec![0.0; mu.dim()])?;
        let mean_phi = mu.integrate(|x| norm(x).tanh());
        let scale = self.c1 * t.cos();
        let shift = self.c2 * mean_phi;
        let beta = self.constants.beta;
        Ok(Box::new(move |x, out| {
            holder_part(x, beta, out, scale);
            out[0] += shift;
        }))
    }

    fn sigma(&self, _t: f64, nu: &EmpiricalMeasure) -> Result<DMatrix<f64>> {
        check_dim(self.dim, &vec![0.0; nu.dim()])?;
        let w = norm(&nu.mean()).min(1.0);
        Ok(DMatrix::identity(self.dim, self.dim) * (1.0 + self.c3 * w.tanh()))
    }

    fn drift_ignores_measure(&self) -> bool {
        self.c2 == 0.0
    }

    fn sigma_ignores_measure(&self) -> bool {
        self.c3 == 0.0
    }
}

/// `b = c` (constant vector), `sigma = I`. `c = 0` gives the pure-noise case.
#[derive(Debug, Clone)]
pub struct ConstantDrift {
    drift: Vec<f64>,
    constants: Constants,
}

impl ConstantDrift {
    pub fn new(drift: Vec<f64>, alpha: f64, k: f64, eta: f64) -> Result<Self> {
        if drift.is_empty() {
            return Err(Error::domain("dim", 0.0, "dimension must be positive"));
        }
        let constants = Self::constants_for(&drift, alpha, k, eta);
        constants.validate()?;
        Ok(Self { drift, constants })
    }

    /// Constants declared for a constant drift, before validation.
    pub fn constants_for(drift: &[f64], alpha: f64, k: f64, eta: f64) -> Constants {
        Constants {
            alpha,
            beta: 0.9,
            k,
            eta,
            k1: 1.0,
            k2: 1.0,
            b_sup: norm(drift),
        }
    }

    pub fn zero(dim: usize, alpha: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], alpha, 1.0, 0.5)
    }
}

impl Coefficients for ConstantDrift {
    fn name(&self) -> &str {
        if self.drift.iter().all(|&c| c == 0.0) {
            "zero"
        } else {
            "constant_drift"
        }
    }

    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn noise_dim(&self) -> usize {
        self.drift.len()
    }

    fn constants(&self) -> &Constants {
        &self.constants
    }

    fn drift_field<'a>(&'a self, _t: f64, _mu: &'a EmpiricalMeasure) -> Result<DriftField<'a>> {
        Ok(Box::new(move |_x, out| out.copy_from_slice(&self.drift)))
    }

    fn sigma(&self, _t: f64, _nu: &EmpiricalMeasure) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.dim(), self.dim()))
    }

    fn drift_ignores_measure(&self) -> bool {
        true
    }

    fn sigma_ignores_measure(&self) -> bool {
        true
    }
}

/// Coefficient families selectable by name from configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Builtin {
        #[serde(default = "default_c1")]
        c1: f64,
        #[serde(default = "default_c2")]
        c2: f64,
        #[serde(default = "default_c3")]
        c3: f64,
    },
    Zero,
    ConstantDrift {
        drift: Vec<f64>,
    },
}

fn default_c1() -> f64 {
    BUILTIN_DEFAULTS.0
}
fn default_c2() -> f64 {
    BUILTIN_DEFAULTS.1
}
fn default_c3() -> f64 {
    BUILTIN_DEFAULTS.2
}

impl Default for FamilySpec {
    fn default() -> Self {
        FamilySpec::Builtin {
            c1: BUILTIN_DEFAULTS.0,
            c2: BUILTIN_DEFAULTS.1,
            c3: BUILTIN_DEFAULTS.2,
        }
    }
}

/// Names accepted by [`FamilySpec`].
pub const FAMILY_NAMES: [&str; 3] = ["builtin", "zero", "constant_drift"];

impl FamilySpec {
    pub fn build(&self, dim: usize, alpha: f64, beta: f64, k: f64, eta: f64) -> Result<Arc<dyn Coefficients>> {
        Ok(match self {
            FamilySpec::Builtin { c1, c2, c3 } => Arc::new(BuiltinFamily::new(dim, alpha, beta, k, eta, (*c1, *c2, *c3))?),
            FamilySpec::Zero => Arc::new(ConstantDrift::new(vec![0.0; dim], alpha, k, eta)?),
            FamilySpec::ConstantDrift { drift } => {
                if drift.len() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        got: drift.len(),
                    });
                }
                Arc::new(ConstantDrift::new(drift.clone(), alpha, k, eta)?)
            }
        })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "builtin" => Ok(FamilySpec::default()),
            "zero" => Ok(FamilySpec::Zero),
            _ => Err(Error::UnknownFamily(name.to_string())),
        }
    }
}

/// Sampling plan for [`probe_assumptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePlan {
    pub probes: usize,
    pub seed: u64,
    /// Standard deviation of probe points and atoms.
    pub spread: f64,
    pub atoms_per_measure: usize,
    pub horizon: f64,
}

impl Default for ProbePlan {
    fn default() -> Self {
        Self {
            probes: 1000,
            seed: 0,
            spread: 2.0,
            atoms_per_measure: 5,
            horizon: 1.0,
        }
    }
}

/// Largest observed ratios against the declared constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `max |b(t,x,mu) - b(t,y,mu)| / |x-y|^beta`
    pub drift_holder_ratio: f64,
    /// `max |b(t,x,mu) - b(t,x,nu)| / (||mu-nu||_{k,var} + W_k)`
    pub drift_measure_ratio: f64,
    /// `max ||sigma(mu) - sigma(nu)|| / (W_eta + W_k)`
    pub sigma_measure_ratio: f64,
    pub drift_sup: f64,
    pub sigma_eig_min: f64,
    pub sigma_eig_max: f64,
    pub violations: Vec<String>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn random_measure(rng: &mut impl Rng, d: usize, atoms: usize, spread: f64) -> Result<EmpiricalMeasure> {
    let pts: Vec<f64> = (0..atoms * d).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect();
    let raw: Vec<f64> = (0..atoms).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let rest: f64 = w[..atoms - 1].iter().sum();
    w[atoms - 1] = 1.0 - rest;
    EmpiricalMeasure::new(d, pts, w)
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Random audit of the Hölder, Lipschitz and ellipticity constants.
pub fn probe_assumptions(coeffs: &dyn Coefficients, plan: &ProbePlan) -> Result<ProbeReport> {
    let c = *coeffs.constants();
    let d = coeffs.dim();
    let key = RngKey::new(plan.seed, Domain::Probe);
    let mut report = ProbeReport {
        drift_holder_ratio: 0.0,
        drift_measure_ratio: 0.0,
        sigma_measure_ratio: 0.0,
        drift_sup: 0.0,
        sigma_eig_min: f64::INFINITY,
        sigma_eig_max: 0.0,
        violations: c.violations(),
    };
    let ctx = |what: &str, e: Error| Error::Numerical(format!("coefficient callback failed while probing {what}: {e}"));
    for p in 0..plan.probes {
        let mut rng = key.stream(p as u64);
        let t = plan.horizon * rng.random::<f64>();
        let mu = random_measure(&mut rng, d, plan.atoms_per_measure, plan.spread)?;
        let nu = if p % 2 == 0 {
            random_measure(&mut rng, d, plan.atoms_per_measure, plan.spread)?
        } else {
            // small perturbations probe the local Lipschitz ratio
            let h: Vec<f64> = (0..d).map(|_| 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect();
            mu.translate(&h)?
        };
        let x: Vec<f64> = (0..d).map(|_| plan.spread * rng.sample::<f64, _>(StandardNormal)).collect();
        let scale = 10f64.powf(-4.0 * rng.random::<f64>());
        let y: Vec<f64> = x.iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();

        let field = coeffs.drift_field(t, &mu).map_err(|e| ctx("drift", e))?;
        let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
        field(&x, &mut bx);
        field(&y, &mut by);
        let dx = diff_norm(&x, &y);
        if dx > 0.0 {
            report.drift_holder_ratio = report.drift_holder_ratio.max(diff_norm(&bx, &by) / dx.powf(c.beta));
        }
        report.drift_sup = report.drift_sup.max(norm(&bx)).max(norm(&by));

        let field_nu = coeffs.drift_field(t, &nu).map_err(|e| ctx("drift", e))?;
        let mut bnu = vec![0.0; d];
        field_nu(&x, &mut bnu);
        let wk = wasserstein(&mu, &nu, c.k)?;
        let kvar = weighted_variation_exact(&mu, &nu, c.k)?;
        let wd = kvar + wk;
        if wd > 0.0 {
            report.drift_measure_ratio = report.drift_measure_ratio.max(diff_norm(&bx, &bnu) / wd);
        }

        let s_mu = coeffs.sigma(t, &mu).map_err(|e| ctx("sigma", e))?;
        let s_nu = coeffs.sigma(t, &nu).map_err(|e| ctx("sigma", e))?;
        for s in [&s_mu, &s_nu] {
            let (lo, hi) = ellipticity(s);
            report.sigma_eig_min = report.sigma_eig_min.min(lo);
            report.sigma_eig_max = report.sigma_eig_max.max(hi);
        }
        let ws = wasserstein(&mu, &nu, c.eta)? + wk;
        if ws > 0.0 {
            let op = (&s_mu - &s_nu).singular_values().max();
            report.sigma_measure_ratio = report.sigma_measure_ratio.max(op / ws);
        }
    }
    let tol = 1e-9;
    if report.drift_holder_ratio > c.k1 + tol {
        report.violations.push(format!(
            "(A2) Hölder ratio {} exceeds K1 = {}",
            report.drift_holder_ratio, c.k1
        ));
    }
    if report.drift_measure_ratio > c.k1 + tol {
        report.violations.push(format!(
            "(A2) measure-Lipschitz ratio {} exceeds K1 = {}",
            report.drift_measure_ratio, c.k1
        ));
    }
    if report.drift_sup > c.b_sup + tol {
        report
            .violations
            .push(format!("(A2) observed |b| = {} exceeds declared bound {}", report.drift_sup, c.b_sup));
    }
    if report.sigma_measure_ratio > c.k2 + tol {
        report.violations.push(format!(
            "(A3) sigma Lipschitz ratio {} exceeds K2 = {}",
            report.sigma_measure_ratio, c.k2
        ));
    }
    if report.sigma_eig_min < 1.0 / c.k2 - tol || report.sigma_eig_max > c.k2 + tol {
        report.violations.push(format!(
            "(A3) sigma sigma^* eigenvalues [{}, {}] leave [1/K2, K2]",
            report.sigma_eig_min, report.sigma_eig_max
        ));
    }
    Ok(report)
}
