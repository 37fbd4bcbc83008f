//! Stable subordinators and subordinated Brownian motion.
//!
//! The subordinator `S` is the `alpha/2`-stable Lévy process with
//! `E exp(-r S_t) = exp(-t (2r)^{alpha/2} / 2)`, and `Z_t = W_{S_t}` is the
//! rotationally invariant `alpha`-stable process with
//! `E exp(i <xi, Z_t>) = exp(-t |xi|^alpha / 2)`.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::exec::{Execution, PATH_BLOCK};
use crate::grid::TimeGrid;
use crate::rng::RngKey;
use crate::stats::{self, Estimate, Moments};

/// Stability index and spatial dimension of the driving noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableParams {
    alpha: f64,
    dim: usize,
}

impl StableParams {
    pub fn new(alpha: f64, dim: usize) -> Result<Self> {
        if !(alpha > 1.0 && alpha < 2.0) {
            return Err(Error::domain("alpha", alpha, "(A1) requires α∈(1,2)"));
        }
        if dim == 0 {
            return Err(Error::domain("dim", 0.0, "dimension must be at least 1"));
        }
        Ok(Self { alpha, dim })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index of the subordinator, `alpha / 2`.
    pub fn rho(&self) -> f64 {
        self.alpha / 2.0
    }

    /// Self-similarity exponent of the subordinator: `S_t ~ t^{2/alpha} S_1`.
    pub fn time_exponent(&self) -> f64 {
        2.0 / self.alpha
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::domain("rho", rho, "one-sided stable index must lie in (0,1)"))
    }
}

/// Draws one sample of the unit one-sided `rho`-stable law normalised so that
/// `E exp(-r S) = exp(-(2r)^rho / 2)`.
///
/// Kanter's representation gives `X = (A(U)/E)^{(1-rho)/rho}` with
/// `E exp(-l X) = exp(-l^rho)`, where `U ~ Unif(0, pi)`, `E ~ Exp(1)` and
/// `A(u) = sin(rho u)^{rho/(1-rho)} sin((1-rho) u) / sin(u)^{1/(1-rho)}`.
/// For `S = c X` the exponent becomes `c^rho r^rho`; matching `2^{rho-1} r^rho`
/// forces `c = 2^{1 - 1/rho}`.
pub fn one_sided_stable<R: Rng + ?Sized>(rho: f64, rng: &mut R) -> f64 {
    let u = PI * rng.sample::<f64, _>(Open01);
    let e = -rng.sample::<f64, _>(Open01).ln();
    let a = (rho * u).sin().powf(rho / (1.0 - rho)) * ((1.0 - rho) * u).sin()
        / u.sin().powf(1.0 / (1.0 - rho));
    let x = (a / e).powf((1.0 - rho) / rho);
    x * one_sided_scale(rho)
}

/// Factor `c = 2^{1 - 1/rho}` mapping the `exp(-l^rho)` law onto `E exp(-r S_t) = exp(-t (2r)^{alpha/2} / 2)`.
pub fn one_sided_scale(rho: f64) -> f64 {
    2f64.powf(1.0 - 1.0 / rho)
}

/// `n` i.i.d. unit one-sided stable samples; sample `i` uses stream `i` of `key`.
pub fn sample_one_sided_stable(rho: f64, n: usize, key: &RngKey, exec: Execution) -> Result<Vec<f64>> {
    check_rho(rho)?;
    if n == 0 {
        return Err(Error::EmptyData("sample count must be positive"));
    }
    Ok(exec.map(n, |i| one_sided_stable(rho, &mut key.at(i as u64, 0))))
}

/// Nondecreasing subordinator values on a time grid, starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SubordinatorPath {
    grid: Arc<TimeGrid>,
    values: Vec<f64>,
}

impl SubordinatorPath {
    /// Builds a path from explicit node values, validating the invariants.
    pub fn from_values(grid: Arc<TimeGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Dimension {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values[0] != 0.0 {
            return Err(Error::Numerical("subordinator must start at 0".into()));
        }
        if values.windows(2).any(|w| !(w[1] >= w[0]) || !w[1].is_finite()) {
            return Err(Error::Numerical("subordinator path must be finite and nondecreasing".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shared_grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn increment(&self, step: usize) -> f64 {
        self.values[step + 1] - self.values[step]
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Restriction to the nodes of a coarser grid whose nodes are a subset of this one's.
    pub fn restrict(&self, coarse: Arc<TimeGrid>) -> Result<Self> {
        let values = coarse
            .nodes()
            .iter()
            .map(|&t| self.grid.index_of(t).map(|i| self.values[i]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(coarse, values)
    }
}

/// Samples one subordinator path; the increment over step `j` is
/// `dt_j^{2/alpha}` times a fresh unit draw from node window `j` of stream `path_index`.
pub fn sample_subordinator_path(
    params: StableParams,
    grid: Arc<TimeGrid>,
    key: &RngKey,
    path_index: u64,
) -> SubordinatorPath {
    let mut values = Vec::with_capacity(grid.len());
    values.push(0.0);
    subordinator_increments_into(params, &grid, key, path_index, |ds| {
        let last = *values.last().unwrap();
        values.push(last + ds);
    });
    SubordinatorPath { grid, values }
}

/// Streams the subordinator increments of one path to `sink` in step order.
pub fn subordinator_increments_into<F: FnMut(f64)>(
    params: StableParams,
    grid: &TimeGrid,
    key: &RngKey,
    path_index: u64,
    mut sink: F,
) {
    let rho = params.rho();
    let expo = params.time_exponent();
    let mut rng = key.stream(path_index);
    for j in 0..grid.steps() {
        crate::rng::seek_node(&mut rng, j as u64);
        sink(grid.dt(j).powf(expo) * one_sided_stable(rho, &mut rng));
    }
}

pub fn sample_subordinator_paths(
    params: StableParams,
    grid: Arc<TimeGrid>,
    key: &RngKey,
    n: usize,
    exec: Execution,
) -> Vec<SubordinatorPath> {
    exec.map(n, |i| sample_subordinator_path(params, grid.clone(), key, i as u64))
}

/// Samples of `S_t` for a single time `t`, one stream per sample.
pub fn sample_subordinator_at(params: StableParams, t: f64, n: usize, key: &RngKey, exec: Execution) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::domain("t", t, "time must be positive"));
    }
    let scale = t.powf(params.time_exponent());
    Ok(sample_one_sided_stable(params.rho(), n, key, exec)?
        .into_iter()
        .map(|s| s * scale)
        .collect())
}

/// Subordinated Brownian path `Z(t_i) = W(S(t_i))` in `R^m`, row-major by node.
#[derive(Debug, Clone, PartialEq)]
pub struct StablePath {
    subordinator: SubordinatorPath,
    dim: usize,
    values: Vec<f64>,
}

impl StablePath {
    pub fn subordinator(&self) -> &SubordinatorPath {
        &self.subordinator
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.node(self.subordinator.grid.steps())
    }
}

/// Draws Gaussian increments with covariance `(S(t_{j+1}) - S(t_j)) I` on top of `sub`.
pub fn sample_stable_path(params: StableParams, sub: SubordinatorPath, key: &RngKey, path_index: u64) -> StablePath {
    let m = params.dim();
    let steps = sub.grid.steps();
    let mut values = vec![0.0; (steps + 1) * m];
    let mut rng = key.stream(path_index);
    for j in 0..steps {
        crate::rng::seek_node(&mut rng, j as u64);
        let sd = sub.increment(j).sqrt();
        for c in 0..m {
            let z: f64 = rng.sample(StandardNormal);
            values[(j + 1) * m + c] = values[j * m + c] + sd * z;
        }
    }
    StablePath {
        subordinator: sub,
        dim: m,
        values,
    }
}

/// Samples of `Z_t` (flattened, `m` coordinates each) together with the
/// underlying `S_t`, from a single-interval grid `[0, t]`.
pub fn sample_stable_marginal(
    params: StableParams,
    t: f64,
    n: usize,
    sub_key: &RngKey,
    bm_key: &RngKey,
    exec: Execution,
) -> Result<Vec<f64>> {
    let s = sample_subordinator_at(params, t, n, sub_key, exec)?;
    let m = params.dim();
    let rows = exec.map(n, |i| {
        let mut rng = bm_key.at(i as u64, 0);
        let sd = s[i].sqrt();
        (0..m).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>()
    });
    Ok(rows.into_iter().flatten().collect())
}

/// Sample `index` of [`sample_stable_marginal`], drawn on its own.
pub fn stable_marginal_draw(
    params: StableParams,
    t: f64,
    index: u64,
    sub_key: &RngKey,
    bm_key: &RngKey,
    out: &mut [f64],
) -> f64 {
    let s = t.powf(params.time_exponent()) * one_sided_stable(params.rho(), &mut sub_key.at(index, 0));
    let sd = s.sqrt();
    let mut rng = bm_key.at(index, 0);
    for o in out.iter_mut() {
        *o = sd * rng.sample::<f64, _>(StandardNormal);
    }
    s
}

/// Left-point Riemann-Stieltjes sum of `e^{delta tau} dS_tau` over `[r, t]`.
pub fn stieltjes_exp_integral(path: &SubordinatorPath, delta: f64, r: f64, t: f64) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::domain("delta", delta, "damping must be nonnegative"));
    }
    let i0 = path.grid.index_of(r)?;
    let i1 = path.grid.index_of(t)?;
    if i0 > i1 {
        return Err(Error::domain("r", r, "lower limit exceeds upper limit"));
    }
    if delta == 0.0 {
        return Ok(path.values[i1] - path.values[i0]);
    }
    let nodes = path.grid.nodes();
    Ok((i0..i1).map(|j| (delta * nodes[j]).exp() * path.increment(j)).sum())
}

/// `E[S_t^p]` for the subordinator `S = c X`, valid for `p < alpha/2`.
///
/// With `S = c X`, `c = 2^{1-2/alpha}` and `E exp(-l X_t) = exp(-t l^{alpha/2})`,
/// `E X_1^p = Gamma(1 - 2p/alpha) / Gamma(1 - p)` and `X_t = t^{2/alpha} X_1`.
pub fn subordinator_moment(alpha: f64, p: f64, t: f64) -> Result<f64> {
    StableParams::new(alpha, 1)?;
    if !(p < alpha / 2.0) {
        return Err(Error::domain("p", p, "moments of S exist only for p < alpha/2"));
    }
    if !(t > 0.0) {
        return Err(Error::domain("t", t, "time must be positive"));
    }
    let c = one_sided_scale(alpha / 2.0);
    Ok(c.powf(p) * t.powf(2.0 * p / alpha) * gamma(1.0 - 2.0 * p / alpha) / gamma(1.0 - p))
}

/// Closed form `Gamma(1 - (eps-1)/alpha) / Gamma((3-eps)/2) * t^{(eps-1)/alpha}` for
/// `E[S_t^{(eps-1)/2}]` when the subordinator has Laplace exponent `t r^{alpha/2}`.
pub fn unit_negative_moment(alpha: f64, epsilon: f64, t: f64) -> Result<f64> {
    check_negative_moment_args(alpha, epsilon, t)?;
    let q = (epsilon - 1.0) / alpha;
    Ok(gamma(1.0 - q) / gamma((3.0 - epsilon) / 2.0) * t.powf(q))
}

/// `E[S_t^{(eps-1)/2}]` for the subordinator sampled here (Laplace exponent
/// `t (2r)^{alpha/2} / 2`). Differs from [`unit_negative_moment`] by the factor
/// `c^{(eps-1)/2}` with `c = 2^{1-2/alpha}`; the two agree at `eps = 1`.
pub fn subordinator_negative_moment(alpha: f64, epsilon: f64, t: f64) -> Result<f64> {
    let unit = unit_negative_moment(alpha, epsilon, t)?;
    let c = one_sided_scale(alpha / 2.0);
    Ok(unit * c.powf((epsilon - 1.0) / 2.0))
}

fn check_negative_moment_args(alpha: f64, epsilon: f64, t: f64) -> Result<()> {
    StableParams::new(alpha, 1)?;
    if !(0.0..alpha).contains(&epsilon) {
        return Err(Error::domain("epsilon", epsilon, "requires 0 <= epsilon < alpha"));
    }
    if !(t > 0.0) {
        return Err(Error::domain("t", t, "time must be positive"));
    }
    Ok(())
}

/// Sample mean of `exp(-r s)` with its standard error.
pub fn empirical_laplace(samples: &[f64], r: f64) -> Result<Estimate> {
    if samples.is_empty() {
        return Err(Error::EmptyData("Laplace estimator needs samples"));
    }
    if !(r > 0.0) {
        return Err(Error::domain("r", r, "Laplace argument must be positive"));
    }
    let mut m = Moments::default();
    samples.iter().for_each(|&s| m.push((-r * s).exp()));
    Ok(m.estimate())
}

/// Complex sample mean with the standard error `sqrt(E|X - EX|^2 / n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexEstimate {
    pub value: Complex64,
    pub stderr: f64,
    pub n: usize,
}

impl ComplexEstimate {
    pub fn z_score(&self, target: Complex64) -> f64 {
        let d = (self.value - target).norm();
        if self.stderr > 0.0 {
            d / self.stderr
        } else if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// Sample mean of `exp(i <xi, z>)` over row-major samples of dimension `xi.len()`.
pub fn empirical_charfn(samples: &[f64], xi: &[f64]) -> Result<ComplexEstimate> {
    let m = xi.len();
    if m == 0 || samples.is_empty() {
        return Err(Error::EmptyData("characteristic-function estimator needs samples"));
    }
    if samples.len() % m != 0 {
        return Err(Error::Dimension {
            expected: m,
            got: samples.len() % m,
        });
    }
    let (mut re, mut im) = (Moments::default(), Moments::default());
    for z in samples.chunks_exact(m) {
        let phase: f64 = z.iter().zip(xi).map(|(a, b)| a * b).sum();
        re.push(phase.cos());
        im.push(phase.sin());
    }
    let n = re.count();
    Ok(ComplexEstimate {
        value: Complex64::new(re.mean(), im.mean()),
        stderr: ((re.variance() + im.variance()) / n as f64).sqrt(),
        n,
    })
}

/// `exp(-t (2r)^{alpha/2} / 2)`.
pub fn laplace_transform(alpha: f64, r: f64, t: f64) -> f64 {
    (-0.5 * t * (2.0 * r).powf(alpha / 2.0)).exp()
}

/// `exp(-t |xi|^alpha / 2)`.
pub fn characteristic_function(alpha: f64, xi: &[f64], t: f64) -> f64 {
    let norm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
    (-0.5 * t * norm.powf(alpha)).exp()
}

/// Raw and winsorised estimates of a positive moment `E[s^p]`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PositiveMomentReport {
    pub order: f64,
    pub raw: Estimate,
    pub winsorized: Estimate,
    pub winsor_quantile: f64,
}

pub const WINSOR_QUANTILE: f64 = 0.9999;

pub fn positive_moment(samples: &[f64], p: f64) -> Result<PositiveMomentReport> {
    let powered: Vec<f64> = samples.iter().map(|s| s.powf(p)).collect();
    Ok(PositiveMomentReport {
        order: p,
        raw: stats::mean_estimate(&powered)?,
        winsorized: stats::winsorized_mean(&powered, WINSOR_QUANTILE)?,
        winsor_quantile: WINSOR_QUANTILE,
    })
}

/// Monte Carlo `E[S^p]` for any real `p` (no clipping).
pub fn moment_estimate(samples: &[f64], p: f64, exec: Execution) -> Result<Estimate> {
    if samples.is_empty() {
        return Err(Error::EmptyData("moment estimator needs samples"));
    }
    Ok(exec.block_reduce(
        samples.len(),
        PATH_BLOCK,
        Moments::default,
        |m, i| m.push(samples[i].powf(p)),
        |a, b| a.merge(b),
    )
    .estimate())
}

/// Writes paths as CSV with header `path_id,t,S,Z_1..Z_m`.
pub fn write_paths_csv<W: Write>(mut out: W, paths: &[StablePath]) -> Result<()> {
    let m = paths.first().map_or(1, |p| p.dim);
    let mut header = String::from("path_id,t,S");
    for c in 1..=m {
        header.push_str(&format!(",Z_{c}"));
    }
    writeln!(out, "{header}")?;
    for (id, p) in paths.iter().enumerate() {
        for (i, t) in p.subordinator.grid.nodes().iter().enumerate() {
            write!(out, "{id},{t},{}", p.subordinator.values[i])?;
            for z in p.node(i) {
                write!(out, ",{z}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
