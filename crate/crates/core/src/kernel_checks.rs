//! Monte Carlo checks of the Gaussian-mixture heat kernel of the frozen
//! equation and of the Duhamel formula relating the drifted and drift-free
//! semigroups.
//!
//! Given a subordinator path `S`, the drift-free transition from `x` over
//! `[s, t]` is Gaussian with covariance `a = int_s^t (sigma sigma^*)(nu_r) dS_r`;
//! the kernel is the average of these Gaussians over `S`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use statrs::function::gamma::gamma;

use crate::coefficients::{checked_sigma, Coefficients, DriftField};
use crate::error::{Error, Result};
use crate::exec::{Execution, PATH_BLOCK};
use crate::grid::TimeGrid;
use crate::measure::{wasserstein, MeasureFlow};
use crate::rng::{Domain, RngKey};
use crate::solver::{propagate, DrivingNoise};
use crate::stable_paths::{sample_stable_marginal, sample_subordinator_paths, StableParams, SubordinatorPath};
use crate::stats::{gauss_hermite, linear_fit, trapezoid, Estimate, LinearFit, Moments};

/// Noise flow and coefficients with `sigma sigma^*` cached per grid node.
pub struct KernelContext<'a> {
    coeffs: &'a dyn Coefficients,
    nu: &'a MeasureFlow,
    cov: Vec<DMatrix<f64>>,
}

impl<'a> KernelContext<'a> {
    pub fn new(coeffs: &'a dyn Coefficients, nu: &'a MeasureFlow) -> Result<Self> {
        let nodes = nu.grid().nodes();
        let cov = (0..nodes.len())
            .map(|j| checked_sigma(coeffs, nodes[j], nu.at(j)).map(|s| &s * s.transpose()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { coeffs, nu, cov })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.nu.grid()
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    /// `(sigma sigma^*)(t_j, nu_j)`.
    pub fn node_covariance(&self, j: usize) -> &DMatrix<f64> {
        &self.cov[j]
    }

    /// Left-point sum `sum_{s <= t_j < t} (sigma sigma^*)(nu_j) dS_j` from
    /// per-step increments, checked against the ellipticity sandwich.
    pub fn covariance_from_increments(&self, ds: &[f64], s: usize, t: usize) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let mut a = DMatrix::zeros(d, d);
        if s == t {
            return Ok(a);
        }
        if s > t || t > ds.len() {
            return Err(Error::domain("s", s as f64, "need s <= t within the grid"));
        }
        let mut total = 0.0;
        for j in s..t {
            a += &self.cov[j] * ds[j];
            total += ds[j];
        }
        self.check_sandwich(&a, total)?;
        Ok(a)
    }

    /// `a_{s,t}^{nu,S}` for one path; `s` and `t` must be grid nodes.
    pub fn covariance_functional(&self, path: &SubordinatorPath, s: f64, t: f64) -> Result<DMatrix<f64>> {
        if path.grid() != self.grid() {
            return Err(Error::GridMismatch("path and noise flow use different grids".into()));
        }
        let (i0, i1) = (self.grid().index_of(s)?, self.grid().index_of(t)?);
        let ds: Vec<f64> = (0..self.grid().steps()).map(|j| path.increment(j)).collect();
        self.covariance_from_increments(&ds, i0, i1)
    }

    fn check_sandwich(&self, a: &DMatrix<f64>, total: f64) -> Result<()> {
        if total <= 0.0 {
            return Ok(());
        }
        let k2 = self.coeffs.constants().k2;
        let eig = a.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        let slack = 1e-9 * total.max(f64::MIN_POSITIVE);
        if !(lo > 0.0) || lo < total / k2 - slack || hi > k2 * total + slack {
            return Err(Error::Numerical(format!(
                "covariance eigenvalues [{lo:e}, {hi:e}] leave [{:e}, {:e}]",
                total / k2,
                k2 * total
            )));
        }
        Ok(())
    }

    /// Covariances of every path over `[s, t]`.
    pub fn covariances(&self, paths: &[SubordinatorPath], s: f64, t: f64, exec: Execution) -> Result<Vec<DMatrix<f64>>> {
        exec.try_map(paths.len(), |i| self.covariance_functional(&paths[i], s, t))
    }
}

/// Density of `N(0, a)` at `z`.
pub fn gaussian_density(a: &DMatrix<f64>, z: &[f64]) -> Result<f64> {
    let d = z.len();
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let v = chol.solve(&DVector::from_column_slice(z));
    let quad: f64 = z.iter().zip(v.iter()).map(|(x, y)| x * y).sum();
    let det: f64 = chol.l().diagonal().iter().map(|l| l * l).product();
    Ok((-0.5 * quad).exp() / ((2.0 * PI).powi(d as i32) * det).sqrt())
}

/// Average over paths of `N(y; x, a)`.
pub fn mixed_density(covs: &[DMatrix<f64>], x: &[f64], y: &[f64]) -> Result<Estimate> {
    if covs.is_empty() {
        return Err(Error::EmptyData("mixed density needs paths"));
    }
    let z: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
    let mut m = Moments::default();
    for a in covs {
        m.push(gaussian_density(a, &z)?);
    }
    Ok(m.estimate())
}

/// Samples `n_paths` subordinator paths on `grid` with the kernel-check key.
pub fn path_bank(alpha: f64, grid: Arc<TimeGrid>, n_paths: usize, seed: u64, exec: Execution) -> Result<Vec<SubordinatorPath>> {
    if n_paths < 1000 {
        return Err(Error::domain("n_paths", n_paths as f64, "kernel checks need at least 1e3 paths"));
    }
    let params = StableParams::new(alpha, 1)?;
    Ok(sample_subordinator_paths(params, grid, &RngKey::new(seed, Domain::Subordinator), n_paths, exec))
}

/// Mixture probabilities of consecutive bins `[edges_i, edges_{i+1})` in `d = 1`.
pub fn mixed_bin_probabilities(covs: &[DMatrix<f64>], x: f64, edges: &[f64]) -> Result<Vec<f64>> {
    if covs.is_empty() || edges.len() < 2 {
        return Err(Error::EmptyData("bin probabilities need paths and at least one bin"));
    }
    let mut probs = vec![0.0; edges.len() - 1];
    for a in covs {
        if a.nrows() != 1 {
            return Err(Error::Dimension { expected: 1, got: a.nrows() });
        }
        let sd = a[(0, 0)].sqrt();
        let n = Normal::new(x, sd).map_err(|e| Error::Numerical(e.to_string()))?;
        let cdf: Vec<f64> = edges.iter().map(|&e| n.cdf(e)).collect();
        for (p, w) in probs.iter_mut().zip(cdf.windows(2)) {
            *p += w[1] - w[0];
        }
    }
    let n = covs.len() as f64;
    probs.iter_mut().for_each(|p| *p /= n);
    Ok(probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson test of samples of `x + Z_t` (pure noise, `d = 1`) against the
/// mixed density integrated over `bins` equal bins on `[x - width, x + width]`,
/// plus two tail bins.
pub fn stable_histogram_test(
    alpha: f64,
    t: f64,
    x: f64,
    width: f64,
    bins: usize,
    n_samples: usize,
    covs: &[DMatrix<f64>],
    seed: u64,
    exec: Execution,
) -> Result<ChiSquareReport> {
    let params = StableParams::new(alpha, 1)?;
    let key = RngKey::new(seed, Domain::Verification);
    let z = sample_stable_marginal(params, t, n_samples, &key, &key.child(1), exec)?;
    let mut edges = vec![f64::NEG_INFINITY];
    edges.extend((0..=bins).map(|i| x - width + 2.0 * width * i as f64 / bins as f64));
    edges.push(f64::INFINITY);
    let probs = mixed_bin_probabilities(covs, x, &edges)?;
    let mut counts = vec![0u64; probs.len()];
    for v in z {
        let y = x + v;
        let b = edges.partition_point(|&e| e <= y) - 1;
        counts[b.min(probs.len() - 1)] += 1;
    }
    let n = n_samples as f64;
    let mut stat = 0.0;
    let mut used = 0;
    for (c, p) in counts.iter().zip(&probs) {
        let e = n * p;
        if e >= 5.0 {
            stat += (*c as f64 - e).powi(2) / e;
            used += 1;
        }
    }
    let dof = used.max(2) - 1;
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(ChiSquareReport {
        statistic: stat,
        dof,
        p_value: 1.0 - chi.cdf(stat),
    })
}

/// `E|N_d|^p` for a standard `d`-dimensional Gaussian, `p > -d`.
pub fn chi_moment(d: usize, p: f64) -> f64 {
    let h = d as f64 / 2.0;
    2f64.powf(p / 2.0) * gamma(h + p / 2.0) / gamma(h)
}

/// `int |grad_x N(y; x, a)| |y - x|^eps dy = E[|a^{-1} Z| |Z|^eps]`, `Z ~ N(0, a)`.
///
/// Closed form for `d = 1` and for isotropic `a`; angular quadrature for
/// other `d = 2` covariances.
pub fn gradient_weighted_integral(a: &DMatrix<f64>, eps: f64) -> Result<f64> {
    let d = a.nrows();
    let diag = a[(0, 0)];
    let isotropic = (0..d).all(|i| {
        (0..d).all(|j| {
            let want = if i == j { diag } else { 0.0 };
            (a[(i, j)] - want).abs() <= 1e-12 * diag.abs()
        })
    });
    if isotropic {
        if !(diag > 0.0) {
            return Err(Error::Numerical("degenerate covariance".into()));
        }
        return Ok(diag.powf((eps - 1.0) / 2.0) * chi_moment(d, 1.0 + eps));
    }
    if d != 2 {
        return Err(Error::Dimension { expected: 2, got: d });
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let l = chol.l();
    let linv_t = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular covariance factor".into()))?
        .transpose();
    // Z = L G with G = r u; |a^{-1} Z| = |L^{-T} u| r and |Z| = |L u| r
    let m = 512;
    let angular: f64 = (0..m)
        .map(|i| {
            let th = 2.0 * PI * i as f64 / m as f64;
            let u = DVector::from_column_slice(&[th.cos(), th.sin()]);
            (&linv_t * &u).norm() * (&l * &u).norm().powf(eps)
        })
        .sum::<f64>()
        / m as f64;
    Ok(angular * chi_moment(2, 1.0 + eps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub tau: f64,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub epsilon: f64,
    pub rows: Vec<ScalingRow>,
    pub fit: LinearFit,
    pub expected_slope: f64,
    /// `exp(intercept)` of the log-log fit.
    pub constant: f64,
}

impl ScalingReport {
    pub fn slope_within(&self, tol: f64) -> bool {
        (self.fit.slope - self.expected_slope).abs() <= tol
    }
}

/// Log-log regression of `E int |grad q_{0,tau}(x,y)| |y-x|^eps dy` on `tau`.
///
/// `taus` must be nodes of the context grid, at least four of them.
pub fn gradient_scaling_check(
    ctx: &KernelContext<'_>,
    paths: &[SubordinatorPath],
    taus: &[f64],
    epsilon: f64,
    exec: Execution,
) -> Result<ScalingReport> {
    let alpha = ctx.coeffs.constants().alpha;
    if !(0.0..alpha).contains(&epsilon) {
        return Err(Error::domain("epsilon", epsilon, "requires 0 <= epsilon < alpha"));
    }
    if taus.len() < 4 {
        return Err(Error::domain("taus", taus.len() as f64, "need at least four time lags"));
    }
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let covs = ctx.covariances(paths, 0.0, tau, exec)?;
        let vals = exec.try_map(covs.len(), |i| gradient_weighted_integral(&covs[i], epsilon))?;
        let mut m = Moments::default();
        vals.into_iter().for_each(|v| m.push(v));
        rows.push(ScalingRow {
            tau,
            estimate: m.estimate(),
        });
    }
    let lx: Vec<f64> = rows.iter().map(|r| r.tau.ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.estimate.mean.ln()).collect();
    if ly.iter().any(|v| !v.is_finite()) {
        return Err(Error::IllConditioned("non-positive kernel integral".into()));
    }
    let fit = linear_fit(&lx, &ly)?;
    Ok(ScalingReport {
        epsilon,
        constant: fit.intercept.exp(),
        expected_slope: (epsilon - 1.0) / alpha,
        rows,
        fit,
    })
}

/// Log-spaced lags `tau_min .. 1` as a grid starting at 0.
pub fn log_lag_grid(tau_min: f64, count: usize) -> Result<TimeGrid> {
    if !(tau_min > 0.0 && tau_min < 1.0) || count < 2 {
        return Err(Error::domain("tau_min", tau_min, "need 0 < tau_min < 1 and at least two lags"));
    }
    let mut nodes = vec![0.0];
    nodes.extend((0..count).map(|i| tau_min.powf(1.0 - i as f64 / (count - 1) as f64)));
    TimeGrid::new(nodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    /// `int |q^{nu1} - q^{nu2}|(x, y) |y - x|^eps dy`
    pub lhs: f64,
    /// `E[(S_t - S_s)^{-1 + eps/2} int_s^t (W_eta + W_k)(nu1_r, nu2_r) dS_r]`
    pub rhs: f64,
    pub ratio: f64,
    /// Paths where `|a1 - a2| > 2 K2^{3/2} int (W_eta + W_k) dS`.
    pub path_bound_violations: usize,
    pub max_path_bound_ratio: f64,
}

/// Compares the kernels of two noise flows over `[s, t]` (`d = 1`).
pub fn kernel_perturbation_check(
    coeffs: &dyn Coefficients,
    nu1: &MeasureFlow,
    nu2: &MeasureFlow,
    paths: &[SubordinatorPath],
    s: f64,
    t: f64,
    epsilon: f64,
) -> Result<PerturbationReport> {
    if coeffs.dim() != 1 {
        return Err(Error::Dimension { expected: 1, got: coeffs.dim() });
    }
    nu1.check_aligned(nu2)?;
    let c = *coeffs.constants();
    let ctx1 = KernelContext::new(coeffs, nu1)?;
    let ctx2 = KernelContext::new(coeffs, nu2)?;
    let grid = nu1.grid();
    let (i0, i1) = (grid.index_of(s)?, grid.index_of(t)?);
    if i0 >= i1 {
        return Err(Error::domain("s", s, "need s < t"));
    }
    let dist = (i0..i1)
        .map(|j| {
            if nu1.at(j) == nu2.at(j) {
                Ok(0.0)
            } else {
                Ok(wasserstein(nu1.at(j), nu2.at(j), c.eta)? + wasserstein(nu1.at(j), nu2.at(j), c.k)?)
            }
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut a1 = Vec::with_capacity(paths.len());
    let mut a2 = Vec::with_capacity(paths.len());
    let mut rhs = Moments::default();
    let mut violations = 0;
    let mut max_bound_ratio: f64 = 0.0;
    let bound_const = 2.0 * c.k2.powf(1.5);
    for p in paths {
        let ds: Vec<f64> = (0..grid.steps()).map(|j| p.increment(j)).collect();
        let x1 = ctx1.covariance_from_increments(&ds, i0, i1)?[(0, 0)];
        let x2 = ctx2.covariance_from_increments(&ds, i0, i1)?[(0, 0)];
        let total: f64 = ds[i0..i1].iter().sum();
        let integral: f64 = dist.iter().zip(&ds[i0..i1]).map(|(d, s)| d * s).sum();
        rhs.push(total.powf(-1.0 + epsilon / 2.0) * integral);
        let bound = bound_const * integral;
        let diff = (x1 - x2).abs();
        if diff > bound * (1.0 + 1e-12) {
            violations += 1;
        }
        if bound > 0.0 {
            max_bound_ratio = max_bound_ratio.max(diff / bound);
        }
        a1.push(x1);
        a2.push(x2);
    }
    let rhs = rhs.estimate().mean;
    if rhs == 0.0 {
        return Ok(PerturbationReport {
            lhs: 0.0,
            rhs,
            ratio: 0.0,
            path_bound_violations: violations,
            max_path_bound_ratio: max_bound_ratio,
        });
    }

    // the integrand is even in y - x, so integrate over z >= 0 and double
    let mut sorted = a1.clone();
    sorted.sort_by(f64::total_cmp);
    let a_hi = sorted[((sorted.len() as f64 * 0.999) as usize).min(sorted.len() - 1)];
    let a_lo = sorted[0];
    let zmax = 12.0 * a_hi.max(a2.iter().cloned().fold(0.0, f64::max).min(a_hi * 4.0)).sqrt();
    let h0 = 0.02 * a_lo.sqrt();
    let nz = 4000;
    let umax = (zmax / h0).asinh();
    let zs: Vec<f64> = (0..=nz).map(|i| h0 * (umax * i as f64 / nz as f64).sinh()).collect();
    let mut diff = vec![0.0; zs.len()];
    for (x1, x2) in a1.iter().zip(&a2) {
        let (n1, n2) = (1.0 / (2.0 * PI * x1).sqrt(), 1.0 / (2.0 * PI * x2).sqrt());
        for (dv, z) in diff.iter_mut().zip(&zs) {
            *dv += n1 * (-0.5 * z * z / x1).exp() - n2 * (-0.5 * z * z / x2).exp();
        }
    }
    let n = paths.len() as f64;
    let integrand: Vec<f64> = diff.iter().zip(&zs).map(|(dv, z)| (dv / n).abs() * z.powf(epsilon)).collect();
    let lhs = 2.0 * trapezoid(&zs, &integrand);
    Ok(PerturbationReport {
        lhs,
        rhs,
        ratio: lhs / rhs,
        path_bound_violations: violations,
        max_path_bound_ratio: max_bound_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub lambda: f64,
    pub report: PerturbationReport,
}

/// Runs [`kernel_perturbation_check`] for `nu2 = (1 - lambda) nu1 + lambda target`.
pub fn perturbation_sweep(
    coeffs: &dyn Coefficients,
    nu1: &MeasureFlow,
    target: &MeasureFlow,
    lambdas: &[f64],
    paths: &[SubordinatorPath],
    s: f64,
    t: f64,
    epsilon: f64,
) -> Result<Vec<PerturbationRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let nu2 = MeasureFlow::new(
                nu1.shared_grid().clone(),
                nu1.measures()
                    .iter()
                    .zip(target.measures())
                    .map(|(a, b)| a.mix(b, lambda))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            Ok(PerturbationRow {
                lambda,
                report: kernel_perturbation_check(coeffs, nu1, &nu2, paths, s, t, epsilon)?,
            })
        })
        .collect()
}

/// Smooth test function with an analytic gradient.
pub trait TestFunction: Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
}

/// `f(x) = tanh(x_1)`.
#[derive(Debug, Clone, Copy)]
pub struct Tanh;

impl TestFunction for Tanh {
    fn value(&self, x: &[f64]) -> f64 {
        x[0].tanh()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[0] = 1.0 / x[0].cosh().powi(2);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl TestFunction for Constant {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }

    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// How `grad Q f` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// `E grad f(y + sqrt(a) N)`.
    #[default]
    Analytic,
    /// `E f(y + sqrt(a) N) a^{-1/2} N` (Gaussian integration by parts).
    IntegrationByParts,
    /// Central differences of `Q f` with step `h`.
    FiniteDifference { h: f64 },
}

/// Quadrature rule for `E g(N)`, `N ~ N(0, I_d)`, adapted to the spread `scale`
/// of the covariance so that `g` is resolved on unit length scales.
struct NormalRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

const GH_NODES: usize = 24;

impl NormalRule {
    fn for_scale(gh: &(Vec<f64>, Vec<f64>), scale: f64, d: usize) -> Self {
        if scale <= 1.0 {
            return Self {
                nodes: gh.0.clone(),
                weights: gh.1.clone(),
            };
        }
        // composite Simpson on [-8, 8] with spacing 0.1 in the original variable
        let cap = if d == 1 { 8000 } else { 200 };
        let mut m = ((16.0 * scale / 0.1).ceil() as usize).clamp(64, cap);
        m += m % 2;
        let h = 16.0 / m as f64;
        let (mut nodes, mut weights) = (Vec::with_capacity(m + 1), Vec::with_capacity(m + 1));
        let mut total = 0.0;
        for i in 0..=m {
            let x = -8.0 + h * i as f64;
            let c = if i == 0 || i == m {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let w = c * h / 3.0 * (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
            total += w;
            nodes.push(x);
            weights.push(w);
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self { nodes, weights }
    }

    /// `E g(y + L N)`, calling `g(point, normal)` on the product rule.
    fn expect<G: FnMut(&[f64], &[f64]) -> f64>(&self, y: &[f64], l: &DMatrix<f64>, mut g: G) -> f64 {
        let d = y.len();
        let k = self.nodes.len();
        let mut idx = vec![0usize; d];
        let mut normal = vec![0.0; d];
        let mut point = vec![0.0; d];
        let mut total = 0.0;
        loop {
            let mut w = 1.0;
            for c in 0..d {
                normal[c] = self.nodes[idx[c]];
                w *= self.weights[idx[c]];
            }
            for r in 0..d {
                point[r] = y[r] + (0..=r).map(|c| l[(r, c)] * normal[c]).sum::<f64>();
            }
            total += w * g(&point, &normal);
            let mut c = 0;
            loop {
                if c == d {
                    return total;
                }
                idx[c] += 1;
                if idx[c] < k {
                    break;
                }
                idx[c] = 0;
                c += 1;
            }
        }
    }
}

fn lower_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if a.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(d, d));
    }
    a.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))
}

/// Gradient of `Q f(y) = E f(y + sqrt(a) N)`, plus the value when `with_value`.
fn heat_value_and_gradient(
    f: &dyn TestFunction,
    y: &[f64],
    a: &DMatrix<f64>,
    mode: GradientMode,
    gh: &(Vec<f64>, Vec<f64>),
    grad: &mut [f64],
    with_value: bool,
) -> Result<f64> {
    let d = y.len();
    let l = lower_cholesky(a)?;
    let scale = a.diagonal().iter().cloned().fold(0.0, f64::max).sqrt();
    if scale == 0.0 {
        f.gradient(y, grad);
        return Ok(f.value(y));
    }
    let rule = NormalRule::for_scale(gh, scale, d);
    let mut tmp = vec![0.0; d];
    let value = if with_value {
        rule.expect(y, &l, |p, _| f.value(p))
    } else {
        f64::NAN
    };
    match mode {
        GradientMode::Analytic => {
            for (c, g) in grad.iter_mut().enumerate() {
                *g = rule.expect(y, &l, |p, _| {
                    f.gradient(p, &mut tmp);
                    tmp[c]
                });
            }
        }
        GradientMode::IntegrationByParts => {
            // grad E f(y + L N) = L^{-T} E[f(y + L N) N]
            let mut en = vec![0.0; d];
            for (c, e) in en.iter_mut().enumerate() {
                *e = rule.expect(y, &l, |p, n| f.value(p) * n[c]);
            }
            let lt = l.transpose();
            let sol = lt
                .solve_upper_triangular(&DVector::from_vec(en))
                .ok_or_else(|| Error::Numerical("singular covariance factor".into()))?;
            grad.copy_from_slice(sol.as_slice());
        }
        GradientMode::FiniteDifference { h } => {
            let mut yp = y.to_vec();
            for c in 0..d {
                yp[c] = y[c] + h;
                let up = rule.expect(&yp, &l, |p, _| f.value(p));
                yp[c] = y[c] - h;
                let dn = rule.expect(&yp, &l, |p, _| f.value(p));
                yp[c] = y[c];
                grad[c] = (up - dn) / (2.0 * h);
            }
        }
    }
    Ok(value)
}

/// Residual floor attributed to time discretization at 200 steps.
pub const DUHAMEL_FLOOR: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuhamelReport {
    /// `E f(X_t)` under the drifted dynamics.
    pub lhs: Estimate,
    /// `Q_{0,t} f(x)`.
    pub free_term: Estimate,
    /// `int_0^t P_{0,r} <b_r, grad Q_{r,t} f> dr`.
    pub integral_term: Estimate,
    /// Per-particle `lhs - free - integral`, averaged.
    pub residual: Estimate,
    pub floor: f64,
}

impl DuhamelReport {
    pub fn passes(&self, n_se: f64, floor: f64) -> bool {
        self.residual.mean.abs() < (n_se * self.residual.stderr).max(floor)
    }
}

/// Checks `P_{0,t} f(x) = Q_{0,t} f(x) + int_0^t P_{0,r} <b_r(., mu_r), grad Q_{r,t} f> dr`.
///
/// `P` comes from the Euler particles started at `x`; `Q_{r,t}` uses each
/// particle's own subordinator increments after `r` (independent of `X_r`),
/// with the Gaussian expectation done by quadrature. The time integral uses
/// the trapezoid rule on the grid of `mu`.
#[allow(clippy::too_many_arguments)]
pub fn duhamel_residual(
    f: &dyn TestFunction,
    coeffs: &dyn Coefficients,
    mu: &MeasureFlow,
    nu: &MeasureFlow,
    x: &[f64],
    n_particles: usize,
    seed: u64,
    mode: GradientMode,
    exec: Execution,
) -> Result<DuhamelReport> {
    let d = coeffs.dim();
    if !(1..=2).contains(&d) || x.len() != d {
        return Err(Error::Dimension { expected: d.clamp(1, 2), got: x.len() });
    }
    let grid = mu.shared_grid().clone();
    let noise = Arc::new(DrivingNoise::sample(
        coeffs.constants().alpha,
        coeffs.noise_dim(),
        grid.clone(),
        n_particles,
        seed,
        exec,
    )?);
    let x0 = x.repeat(n_particles);
    let ens = propagate(&x0, mu, nu, coeffs, &noise, exec)?;
    let ctx = KernelContext::new(coeffs, nu)?;
    let nodes = grid.nodes().to_vec();
    let steps = grid.steps();
    let fields: Vec<DriftField<'_>> = (0..=steps)
        .map(|j| coeffs.drift_field(nodes[j], mu.at(j)))
        .collect::<Result<Vec<_>>>()?;
    let gh = gauss_hermite(GH_NODES);

    let per_particle = |i: usize| -> Result<[f64; 3]> {
        let ds = noise.subordinator_increments(i);
        let mut a = DMatrix::zeros(d, d);
        let mut integrand = vec![0.0; steps + 1];
        let (mut b, mut g) = (vec![0.0; d], vec![0.0; d]);
        let mut free = 0.0;
        for j in (0..=steps).rev() {
            if j < steps {
                a += ctx.node_covariance(j) * ds[j];
            }
            let y = ens.state(j, i);
            fields[j](y, &mut b);
            if j > 0 && b.iter().all(|&v| v == 0.0) {
                continue;
            }
            let q = heat_value_and_gradient(f, y, &a, mode, &gh, &mut g, j == 0)?;
            if j == 0 {
                free = q;
            }
            integrand[j] = b.iter().zip(&g).map(|(u, v)| u * v).sum();
        }
        let integral = trapezoid(&nodes, &integrand);
        Ok([f.value(ens.state(steps, i)), free, integral])
    };
    let acc = exec.block_reduce(
        n_particles,
        PATH_BLOCK / 16,
        || Ok([Moments::default(); 4]),
        |acc: &mut Result<[Moments; 4]>, i| {
            if let Ok(m) = acc {
                match per_particle(i) {
                    Ok([l, q, integral]) => {
                        m[0].push(l);
                        m[1].push(q);
                        m[2].push(integral);
                        m[3].push(l - q - integral);
                    }
                    Err(e) => *acc = Err(e),
                }
            }
        },
        |a, b| match (a.as_mut(), b) {
            (Ok(x), Ok(y)) => x.iter_mut().zip(y).for_each(|(u, v)| u.merge(v)),
            (Ok(_), Err(e)) => *a = Err(e),
            _ => {}
        },
    )?;
    Ok(DuhamelReport {
        lhs: acc[0].estimate(),
        free_term: acc[1].estimate(),
        integral_term: acc[2].estimate(),
        residual: acc[3].estimate(),
        floor: DUHAMEL_FLOOR,
    })
}
