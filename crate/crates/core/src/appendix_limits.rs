//! Monte Carlo estimates of the two damped subordinator functionals
//!
//! i)  `sup_t e^{-delta t} E[S_t^{kappa-1} int_0^t e^{delta r} dS_r]`
//! ii) `sup_t e^{-delta t} int_0^t E[(S_t - S_r)^{kappa-3/2} int_r^t e^{delta tau} dS_tau] dr`
//!
//! together with the explicit `epsilon`-bounds that drive both to zero as
//! `delta` grows. Expectations are taken per grid time, then the sup over
//! the grid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_li};

use crate::error::{Error, Result};
use crate::exec::{Execution, PATH_BLOCK};
use crate::grid::TimeGrid;
use crate::rng::{Domain, RngKey};
use crate::stable_paths::{subordinator_increments_into, subordinator_moment, StableParams};
use crate::stats::{Estimate, Moments};

/// `int_0^infty r^{-1/alpha} e^{-delta r} dr = Gamma(1 - 1/alpha) delta^{1/alpha - 1}`.
pub fn damped_expint(alpha: f64, delta: f64) -> Result<f64> {
    StableParams::new(alpha, 1)?;
    if !(delta > 0.0) {
        return Err(Error::domain("delta", delta, "damping must be positive"));
    }
    Ok(gamma(1.0 - 1.0 / alpha) * delta.powf(1.0 / alpha - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    I,
    Ii,
}

impl Part {
    pub fn label(self) -> &'static str {
        match self {
            Part::I => "i",
            Part::Ii => "ii",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "i" | "1" => Ok(Part::I),
            "ii" | "2" => Ok(Part::Ii),
            _ => Err(Error::Parse(format!("unknown part {s:?}, expected i or ii"))),
        }
    }
}

/// Largest `delta` for which the refined grid is also evaluated.
pub const REFINE_DELTA_MAX: f64 = 16.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitExperiment {
    pub alpha: f64,
    pub kappa: f64,
    pub horizon: f64,
    pub deltas: Vec<f64>,
    pub epsilon: f64,
    pub n_paths: usize,
    pub steps: usize,
    /// Part ii only; defaults to the midpoint of its window.
    pub theta: Option<f64>,
    /// Also evaluate on the twice-refined grid (for `delta <= REFINE_DELTA_MAX`).
    pub refine: bool,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Execution,
}

impl LimitExperiment {
    pub fn new(alpha: f64, kappa: f64) -> Self {
        Self {
            alpha,
            kappa,
            horizon: 1.0,
            deltas: vec![1.0, 4.0, 16.0, 64.0, 256.0],
            epsilon: 0.5,
            n_paths: 100_000,
            steps: 200,
            theta: None,
            refine: false,
            seed: 0,
            exec: Execution::default(),
        }
    }

    /// Admissible `theta` interval `(1 - alpha/2, min(1, 3/2 - kappa))`.
    pub fn theta_window(&self) -> (f64, f64) {
        (1.0 - self.alpha / 2.0, (1.5 - self.kappa).min(1.0))
    }

    pub fn theta(&self) -> f64 {
        let (lo, hi) = self.theta_window();
        self.theta.unwrap_or(0.5 * (lo + hi))
    }

    pub fn validate(&self, part: Part) -> Result<()> {
        StableParams::new(self.alpha, 1)?;
        let a = self.alpha;
        match part {
            Part::I if !(self.kappa > 0.0 && self.kappa < a / 2.0) => {
                return Err(Error::domain("kappa", self.kappa, "part i requires 0 < kappa < alpha/2"));
            }
            Part::Ii if !(self.kappa > (1.0 - a) / 2.0 && self.kappa < (1.0 + a) / 2.0) => {
                return Err(Error::domain(
                    "kappa",
                    self.kappa,
                    "part ii requires (1 - alpha)/2 < kappa < (1 + alpha)/2",
                ));
            }
            Part::Ii => {
                let (lo, hi) = self.theta_window();
                let th = self.theta();
                if !(th > lo && th < hi) {
                    return Err(Error::domain("theta", th, "theta must lie in (1 - alpha/2, min(1, 3/2 - kappa))"));
                }
            }
            _ => {}
        }
        if !(self.horizon > 0.0) {
            return Err(Error::domain("horizon", self.horizon, "horizon must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::domain("epsilon", self.epsilon, "epsilon must lie in (0, 1)"));
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d > 0.0)) || self.deltas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("deltas", f64::NAN, "deltas must be positive and increasing"));
        }
        if self.steps < 2 || self.n_paths < 2 {
            return Err(Error::domain("steps", self.steps as f64, "need at least two steps and two paths"));
        }
        Ok(())
    }

    /// Proof bound for part i at `(delta, eps)`.
    pub fn envelope_i(&self, delta: f64, eps: f64) -> Result<f64> {
        let (a, k) = (self.alpha, self.kappa);
        let m = subordinator_moment(a, k, 1.0)?;
        let q = 2.0 * k / a;
        Ok(m * ((2.0 * k / (a * std::f64::consts::E * eps * delta)).powf(q) + (eps * self.horizon).powf(q)))
    }

    /// Proof bound for part ii at `(delta, eps)`.
    pub fn envelope_ii(&self, delta: f64, eps: f64) -> Result<f64> {
        let (a, k, t) = (self.alpha, self.kappa, self.horizon);
        let th = self.theta();
        let p = (2.0 * k - 1.0) / a;
        let first = subordinator_moment(a, k - 0.5, 1.0)? * (delta * eps).powf(-(p + 1.0)) * gamma_li(p + 1.0, delta * eps * t);
        let second = eps.powf(2.0 * (1.0 - th) / a)
            * (1.0 - eps).powf((2.0 * th + 2.0 * k - 3.0) / a)
            * subordinator_moment(a, th + k - 1.5, 1.0)?
            * subordinator_moment(a, 1.0 - th, 1.0)?
            * t.powf(p + 1.0)
            / (p + 1.0);
        Ok(first + second)
    }

    pub fn envelope(&self, part: Part, delta: f64, eps: f64) -> Result<f64> {
        match part {
            Part::I => self.envelope_i(delta, eps),
            Part::Ii => self.envelope_ii(delta, eps),
        }
    }

    /// Minimum of the bound over `eps` in `{0.005, 0.01, ..., 0.995}`.
    pub fn best_envelope(&self, part: Part, delta: f64) -> Result<(f64, f64)> {
        let mut best = (f64::INFINITY, f64::NAN);
        for i in 1..200 {
            let eps = i as f64 / 200.0;
            let v = self.envelope(part, delta, eps)?;
            if v < best.0 {
                best = (v, eps);
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitRow {
    pub delta: f64,
    /// Sup over grid times of the per-time Monte Carlo mean.
    pub estimate: Estimate,
    /// Grid time attaining the sup.
    pub argmax: f64,
    pub envelope: f64,
    pub envelope_user_eps: f64,
    pub envelope_eps: f64,
    /// Same estimate on the twice-refined grid, when evaluated.
    pub refined: Option<Estimate>,
}

impl LimitRow {
    pub fn refinement_change(&self) -> Option<f64> {
        self.refined.map(|r| (r.mean - self.estimate.mean).abs() / self.estimate.mean.abs().max(f64::MIN_POSITIVE))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitTable {
    pub part: Part,
    pub alpha: f64,
    pub kappa: f64,
    pub theta: Option<f64>,
    pub epsilon: f64,
    pub n_paths: usize,
    pub steps: usize,
    pub rows: Vec<LimitRow>,
    /// Monte Carlo `E[S_1^p]` for the moment exponents in the bound, next to
    /// the closed forms actually used.
    pub moments: Vec<MomentCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub p: f64,
    pub closed_form: f64,
    pub monte_carlo: Estimate,
}

impl LimitTable {
    /// Each estimate is at most its predecessor plus `n_se` joint standard errors.
    pub fn nonincreasing(&self, n_se: f64) -> bool {
        self.rows.windows(2).all(|w| {
            let se = w[0].estimate.stderr.hypot(w[1].estimate.stderr);
            w[1].estimate.mean <= w[0].estimate.mean + n_se * se
        })
    }

    /// Largest-delta estimate below half the smallest-delta estimate.
    pub fn decays_by_half(&self) -> bool {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.estimate.mean < 0.5 * a.estimate.mean,
            _ => false,
        }
    }

    /// Every estimate below its best envelope plus `n_se` standard errors.
    pub fn dominated(&self, n_se: f64) -> bool {
        self.rows.iter().all(|r| r.estimate.mean <= r.envelope + n_se * r.estimate.stderr)
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.estimate.mean.is_finite() && r.estimate.mean >= 0.0)
    }

    pub fn max_refinement_change(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.refinement_change()).reduce(f64::max)
    }

    /// `delta,estimate,stderr,envelope,envelope_eps` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,estimate,stderr,envelope,envelope_eps,envelope_user_eps,argmax_t,refined,refined_stderr\n");
        for r in &self.rows {
            let (rf, rse) = r
                .refined
                .map(|e| (format!("{:e}", e.mean), format!("{:e}", e.stderr)))
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{},{:e},{},{},{}\n",
                r.delta, r.estimate.mean, r.estimate.stderr, r.envelope, r.envelope_eps, r.envelope_user_eps, r.argmax, rf, rse
            ));
        }
        s
    }
}

/// Per-time values of the part i functional along one path, for every delta.
///
/// `s` holds the subordinator at uniformly spaced nodes, `decay[d] = e^{-delta_d dt}`;
/// the Stieltjes integral is a left-point sum.
fn part_i_values(s: &[f64], decay: &[f64], kappa: f64, out: &mut [Vec<f64>]) {
    for (d, row) in out.iter_mut().enumerate() {
        // damped sum D_j = e^{-delta t_j} sum_{i<j} e^{delta t_i} dS_i
        let mut damped = 0.0;
        row[0] = 0.0;
        for j in 1..s.len() {
            damped = decay[d] * (damped + (s[j] - s[j - 1]));
            row[j] = if s[j] > 0.0 { s[j].powf(kappa - 1.0) * damped } else { 0.0 };
        }
    }
}

/// Per-time values of the part ii functional along one path, for every delta.
///
/// The outer `dr` integral is the trapezoid rule on the nodes with the
/// integrand set to zero at `r = t`; `lag[d][l] = e^{-delta l dt}`.
fn part_ii_values(s: &[f64], dt: f64, lag: &[Vec<f64>], kappa: f64, inner: &mut [f64], out: &mut [Vec<f64>]) {
    let expo = kappa - 1.5;
    let nd = lag.len();
    let mut acc = vec![0.0; nd];
    for row in out.iter_mut() {
        row[0] = 0.0;
    }
    for j in 1..s.len() {
        // inner[d] = sum_{m=i}^{j-1} e^{-delta (t_j - t_m)} dS_m, built for i = j-1 down to 0
        inner.iter_mut().for_each(|v| *v = 0.0);
        acc.iter_mut().for_each(|v| *v = 0.0);
        for i in (0..j).rev() {
            let ds = s[i + 1] - s[i];
            let gap = s[j] - s[i];
            let w = if gap > 0.0 { gap.powf(expo) } else { 0.0 };
            let half = if i == 0 { 0.5 } else { 1.0 };
            for d in 0..nd {
                inner[d] += lag[d][j - i] * ds;
                acc[d] += half * w * inner[d];
            }
        }
        for d in 0..nd {
            out[d][j] = acc[d] * dt;
        }
    }
}

struct Evaluator<'a> {
    part: Part,
    kappa: f64,
    deltas: &'a [f64],
}

impl Evaluator<'_> {
    fn values(&self, s: &[f64], dt: f64, inner: &mut [f64], out: &mut [Vec<f64>]) {
        match self.part {
            Part::I => {
                let decay: Vec<f64> = self.deltas.iter().map(|d| (-d * dt).exp()).collect();
                part_i_values(s, &decay, self.kappa, out)
            }
            Part::Ii => {
                let lag: Vec<Vec<f64>> = self
                    .deltas
                    .iter()
                    .map(|d| (0..s.len()).map(|l| (-d * dt * l as f64).exp()).collect())
                    .collect();
                part_ii_values(s, dt, &lag, self.kappa, inner, out)
            }
        }
    }
}

struct Accumulator {
    coarse: Vec<Vec<Moments>>,
    fine: Vec<Vec<Moments>>,
}

impl Accumulator {
    fn new(nd: usize, coarse_len: usize, fine_len: usize) -> Self {
        Self {
            coarse: vec![vec![Moments::default(); coarse_len]; nd],
            fine: vec![vec![Moments::default(); fine_len]; nd],
        }
    }

    fn merge(&mut self, other: Self) {
        for (a, b) in self.coarse.iter_mut().zip(other.coarse) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
        }
        for (a, b) in self.fine.iter_mut().zip(other.fine) {
            a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y));
        }
    }
}

fn sup_over_times(moments: &[Moments], nodes: &[f64]) -> (Estimate, f64) {
    let mut best = (moments[0].estimate(), nodes[0]);
    for (m, &t) in moments.iter().zip(nodes).skip(1) {
        let e = m.estimate();
        if e.mean > best.0.mean {
            best = (e, t);
        }
    }
    best
}

/// Runs one part over the delta ladder.
pub fn limit_table(exp: &LimitExperiment, part: Part) -> Result<LimitTable> {
    exp.validate(part)?;
    let params = StableParams::new(exp.alpha, 1)?;
    let coarse = TimeGrid::uniform(exp.horizon, exp.steps)?;
    let refine_count = if exp.refine {
        exp.deltas.iter().filter(|&&d| d <= REFINE_DELTA_MAX).count()
    } else {
        0
    };
    let sample_grid = Arc::new(if refine_count > 0 { coarse.refine(2)? } else { coarse.clone() });
    let stride = sample_grid.steps() / coarse.steps();
    let dt = exp.horizon / exp.steps as f64;
    let nd = exp.deltas.len();
    let key = RngKey::new(exp.seed, Domain::Subordinator).child(part as u64);

    let coarse_eval = Evaluator {
        part,
        kappa: exp.kappa,
        deltas: &exp.deltas,
    };
    let fine_eval = Evaluator {
        part,
        kappa: exp.kappa,
        deltas: &exp.deltas[..refine_count],
    };
    let (clen, flen) = (coarse.len(), if refine_count > 0 { sample_grid.len() } else { 0 });

    let acc = exp.exec.block_reduce(
        exp.n_paths,
        PATH_BLOCK / 16,
        || Accumulator::new(nd, clen, flen),
        |acc, i| {
            let mut path = Vec::with_capacity(sample_grid.len());
            path.push(0.0);
            subordinator_increments_into(params, &sample_grid, &key, i as u64, |ds| {
                let last = *path.last().unwrap();
                path.push(last + ds);
            });
            let s: Vec<f64> = path.iter().step_by(stride).copied().collect();
            let mut inner = vec![0.0; nd];
            let mut out = vec![vec![0.0; clen]; nd];
            coarse_eval.values(&s, dt, &mut inner, &mut out);
            for (m, v) in acc.coarse.iter_mut().zip(&out) {
                m.iter_mut().zip(v).for_each(|(m, &x)| m.push(x));
            }
            if refine_count > 0 {
                let mut out = vec![vec![0.0; flen]; refine_count];
                fine_eval.values(&path, dt / stride as f64, &mut inner[..refine_count], &mut out);
                for (m, v) in acc.fine.iter_mut().zip(&out) {
                    m.iter_mut().zip(v).for_each(|(m, &x)| m.push(x));
                }
            }
        },
        |a, b| a.merge(b),
    );

    let mut rows = Vec::with_capacity(nd);
    for (d, &delta) in exp.deltas.iter().enumerate() {
        let (estimate, argmax) = sup_over_times(&acc.coarse[d], coarse.nodes());
        if !estimate.mean.is_finite() {
            return Err(Error::NonFinite { particle: 0, step: d });
        }
        let refined = (d < refine_count).then(|| sup_over_times(&acc.fine[d], sample_grid.nodes()).0);
        let (envelope, envelope_eps) = exp.best_envelope(part, delta)?;
        rows.push(LimitRow {
            delta,
            estimate,
            argmax,
            envelope,
            envelope_user_eps: exp.envelope(part, delta, exp.epsilon)?,
            envelope_eps,
            refined,
        });
    }
    Ok(LimitTable {
        part,
        alpha: exp.alpha,
        kappa: exp.kappa,
        theta: (part == Part::Ii).then(|| exp.theta()),
        epsilon: exp.epsilon,
        n_paths: exp.n_paths,
        steps: exp.steps,
        rows,
        moments: moment_checks(exp, part)?,
    })
}

fn moment_exponents(exp: &LimitExperiment, part: Part) -> Vec<f64> {
    match part {
        Part::I => vec![exp.kappa],
        Part::Ii => {
            let th = exp.theta();
            vec![exp.kappa - 0.5, th + exp.kappa - 1.5, 1.0 - th]
        }
    }
}

/// Monte Carlo `E[S_1^p]` next to the closed form for each exponent in the bound.
pub fn moment_checks(exp: &LimitExperiment, part: Part) -> Result<Vec<MomentCheck>> {
    let params = StableParams::new(exp.alpha, 1)?;
    let key = RngKey::new(exp.seed, Domain::Auxiliary).child(17);
    let ps = moment_exponents(exp, part);
    let unit = TimeGrid::uniform(1.0, 1)?;
    let acc = exp.exec.block_reduce(
        exp.n_paths,
        PATH_BLOCK,
        || vec![Moments::default(); ps.len()],
        |acc, i| {
            subordinator_increments_into(params, &unit, &key, i as u64, |s1| {
                for (m, p) in acc.iter_mut().zip(&ps) {
                    m.push(s1.powf(*p));
                }
            });
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| x.merge(y)),
    );
    ps.iter()
        .zip(acc)
        .map(|(&p, m)| {
            Ok(MomentCheck {
                p,
                closed_form: subordinator_moment(exp.alpha, p, 1.0)?,
                monte_carlo: m.estimate(),
            })
        })
        .collect()
}
