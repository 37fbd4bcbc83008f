//! A noise coefficient that is Lipschitz only in total variation, for which
//! `dX_t = sigma_t(L_{X_t}) dZ_t`, `X_0 = 0`, has the two solutions `Z` and `2Z`.
//!
//! `sigma_t(g) = a + b g([2 M t^{1/alpha}, inf))` with
//! `a = (P(M <= Z_1 < 2M) - P(Z_1 >= 2M)) / P(M <= Z_1 < 2M)` and
//! `b = 1 / P(M <= Z_1 < 2M)`. Self-similarity `Z_t ~ t^{1/alpha} Z_1` then
//! gives `sigma_t(L_{Z_t}) = 1` and `sigma_t(L_{2 Z_t}) = 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{Execution, PATH_BLOCK};
use crate::measure::EmpiricalMeasure;
use crate::rng::{Domain, RngKey};
use crate::stable_paths::{stable_marginal_draw, StableParams};
use crate::stats::Estimate;

/// Thresholds tried by [`calibrate`]: `2, 4, ..., 2^14`.
pub const M_GRID: [f64; 14] = [
    2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0, 4096.0, 8192.0, 16384.0,
];

/// Minimum hit count for each tail probability at the chosen `M`.
pub const MIN_HITS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleParams {
    pub alpha: f64,
    pub m: f64,
    pub a: f64,
    pub b_coef: f64,
    pub horizon: f64,
    /// Calibration estimate of `P(M <= Z_1 < 2M)`.
    pub p_band: f64,
    /// Calibration estimate of `P(Z_1 >= 2M)`.
    pub p_tail: f64,
    pub n_calibration: usize,
}

impl CounterexampleParams {
    /// Builds the parameters from the two probabilities.
    pub fn from_probabilities(alpha: f64, m: f64, p_band: f64, p_tail: f64, n_calibration: usize) -> Result<Self> {
        StableParams::new(alpha, 1)?;
        if !(m > 1.0) {
            return Err(Error::domain("M", m, "threshold must exceed 1"));
        }
        if !(p_band > 0.0 && p_tail >= 0.0 && p_tail < p_band) {
            return Err(Error::Calibration(format!(
                "need P(Z_1 >= 2M) < P(M <= Z_1 < 2M), got {p_tail} vs {p_band}"
            )));
        }
        Ok(Self {
            alpha,
            m,
            a: (p_band - p_tail) / p_band,
            b_coef: 1.0 / p_band,
            horizon: 1.0,
            p_band,
            p_tail,
            n_calibration,
        })
    }

    pub fn threshold(&self, t: f64) -> f64 {
        2.0 * self.m * t.powf(1.0 / self.alpha)
    }
}

/// Monte Carlo estimate of `P(Z_1 >= 2x) / P(x <= Z_1 < 2x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRatio {
    pub x: f64,
    pub estimate: Estimate,
    pub tail_hits: u64,
    pub band_hits: u64,
    /// `1 / (2^alpha - 1)`
    pub limit: f64,
}

/// The large-`x` limit `1 / (2^alpha - 1)` of the tail ratio.
pub fn tail_ratio_limit(alpha: f64) -> f64 {
    1.0 / (2f64.powf(alpha) - 1.0)
}

/// Counts of `x <= z < 2x` and `z >= 2x` for each `x`, over `n` draws of `Z_t`.
fn band_and_tail_counts(alpha: f64, t: f64, xs: &[f64], n: usize, sub_key: RngKey, exec: Execution) -> Result<Vec<(u64, u64)>> {
    let params = StableParams::new(alpha, 1)?;
    let bm_key = sub_key.child(1);
    let k = xs.len();
    let counts = exec.block_reduce(
        n,
        PATH_BLOCK,
        || vec![(0u64, 0u64); k],
        |acc, i| {
            let mut z = [0.0];
            stable_marginal_draw(params, t, i as u64, &sub_key, &bm_key, &mut z);
            let z = z[0];
            for (c, &x) in acc.iter_mut().zip(xs) {
                if z >= 2.0 * x {
                    c.1 += 1;
                } else if z >= x {
                    c.0 += 1;
                }
            }
        },
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| {
            x.0 += y.0;
            x.1 += y.1;
        }),
    );
    Ok(counts)
}

/// Delta-method standard error of `pU / pB` for multinomial proportions.
fn ratio_stderr(pb: f64, pu: f64, n: f64) -> f64 {
    let var = pu * (1.0 - pu) / (pb * pb) + pu * pu * (1.0 - pb) / pb.powi(3) + 2.0 * pu * pu / (pb * pb);
    (var / n).max(0.0).sqrt()
}

/// Tail ratios at several `x` from one sample of size `n`.
pub fn tail_ratios(alpha: f64, xs: &[f64], n: usize, seed: u64, exec: Execution) -> Result<Vec<TailRatio>> {
    if n < 100_000 {
        return Err(Error::domain("n_samples", n as f64, "tail ratios need at least 1e5 samples"));
    }
    if let Some(&x) = xs.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::domain("x", x, "threshold must be positive"));
    }
    let counts = band_and_tail_counts(alpha, 1.0, xs, n, RngKey::new(seed, Domain::Auxiliary), exec)?;
    let nf = n as f64;
    xs.iter()
        .zip(counts)
        .map(|(&x, (band, tail))| {
            if band == 0 {
                return Err(Error::InsufficientSamples(format!("no samples in [{x}, {}) out of {n}", 2.0 * x)));
            }
            let (pb, pu) = (band as f64 / nf, tail as f64 / nf);
            Ok(TailRatio {
                x,
                estimate: Estimate {
                    mean: pu / pb,
                    stderr: ratio_stderr(pb, pu, nf),
                    n,
                },
                tail_hits: tail,
                band_hits: band,
                limit: tail_ratio_limit(alpha),
            })
        })
        .collect()
}

pub fn tail_ratio(alpha: f64, x: f64, n: usize, seed: u64, exec: Execution) -> Result<TailRatio> {
    Ok(tail_ratios(alpha, &[x], n, seed, exec)?.remove(0))
}

/// Picks the smallest `M` in [`M_GRID`] with `P(Z_1 >= 2M)` below
/// `P(M <= Z_1 < 2M)` by more than three joint standard errors, both
/// probabilities having at least [`MIN_HITS`] hits.
pub fn calibrate(alpha: f64, n: usize, seed: u64, exec: Execution) -> Result<CounterexampleParams> {
    let counts = band_and_tail_counts(alpha, 1.0, &M_GRID, n, RngKey::new(seed, Domain::Calibration), exec)?;
    let nf = n as f64;
    let mut diagnostics = Vec::new();
    for (&m, &(band, tail)) in M_GRID.iter().zip(&counts) {
        let (pb, pu) = (band as f64 / nf, tail as f64 / nf);
        let gap = pb - pu;
        let se = ((pb + pu - gap * gap) / nf).sqrt();
        diagnostics.push(format!("M={m}: band {band}, tail {tail}, gap {gap:.3e} (se {se:.1e})"));
        if band >= MIN_HITS && tail >= MIN_HITS && gap > 3.0 * se {
            return CounterexampleParams::from_probabilities(alpha, m, pb, pu, n);
        }
    }
    Err(Error::Calibration(format!(
        "no admissible M on the grid with n = {n}: {}",
        diagnostics.join("; ")
    )))
}

/// `a + b * law([2 M t^{1/alpha}, inf))` for a law on the real line.
pub fn sigma_of_law(params: &CounterexampleParams, t: f64, law: &EmpiricalMeasure) -> Result<f64> {
    if law.dim() != 1 {
        return Err(Error::Dimension { expected: 1, got: law.dim() });
    }
    if !(t > 0.0 && t <= params.horizon) {
        return Err(Error::domain("t", t, "time must lie in (0, T]"));
    }
    let thr = params.threshold(t);
    let mass: f64 = law.iter().filter(|(x, _)| x[0] >= thr).map(|(_, w)| w).sum();
    Ok(params.a + params.b_coef * mass)
}

/// Residual of `sigma_t(L_{c Z_t}) = c` at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub t: f64,
    pub c: f64,
    pub sigma: f64,
    pub residual: f64,
    pub stderr: f64,
}

impl ResidualRow {
    pub fn z_score(&self) -> f64 {
        if self.stderr > 0.0 {
            self.residual.abs() / self.stderr
        } else if self.residual == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSolutionReport {
    pub params: CounterexampleParams,
    pub n_samples: usize,
    pub rows: Vec<ResidualRow>,
}

impl TwoSolutionReport {
    /// True when every residual for scale `c` is within `n_se` standard errors of zero.
    pub fn passes(&self, c: f64, n_se: f64) -> bool {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.c == c).collect();
        !rows.is_empty() && rows.iter().all(|r| r.z_score() <= n_se)
    }
}

/// Scales checked by [`verify_two_solutions`]; 3 is a negative control.
pub const SOLUTION_SCALES: [f64; 3] = [1.0, 2.0, 3.0];

/// For each `t` and `c` in [`SOLUTION_SCALES`], estimates `sigma_t(L_{c Z_t}) - c`
/// from fresh samples of `Z_t`. Standard errors combine the verification
/// sample with the calibration noise in `a` and `b`.
pub fn verify_two_solutions(params: &CounterexampleParams, n: usize, times: &[f64], seed: u64, exec: Execution) -> Result<TwoSolutionReport> {
    if n == 0 {
        return Err(Error::EmptyData("verification needs samples"));
    }
    let (pb, pu) = (params.p_band, params.p_tail);
    let nc = params.n_calibration as f64;
    let nf = n as f64;
    let mut rows = Vec::new();
    for (ti, &t) in times.iter().enumerate() {
        if !(t > 0.0 && t <= params.horizon) {
            return Err(Error::domain("t", t, "verification times must lie in (0, T]"));
        }
        let thr = params.threshold(t);
        // c Z_t >= thr  <=>  Z_t >= thr / c
        let xs: Vec<f64> = SOLUTION_SCALES.iter().map(|c| thr / c).collect();
        let counts = band_and_tail_counts(params.alpha, t, &xs, n, RngKey::new(seed, Domain::Verification).child(ti as u64), exec)?;
        for (&c, &(band, tail)) in SOLUTION_SCALES.iter().zip(&counts) {
            let pv = (band + tail) as f64 / nf;
            let sigma = params.a + params.b_coef * pv;
            // g = 1 - pU/pB + pv/pB - c
            let (g_pu, g_pb, g_pv) = (-1.0 / pb, (pu - pv) / (pb * pb), 1.0 / pb);
            let var_cal = (g_pb * g_pb * pb * (1.0 - pb) + g_pu * g_pu * pu * (1.0 - pu) - 2.0 * g_pb * g_pu * pb * pu) / nc;
            let var_ver = g_pv * g_pv * pv * (1.0 - pv) / nf;
            rows.push(ResidualRow {
                t,
                c,
                sigma,
                residual: sigma - c,
                stderr: (var_cal + var_ver).max(0.0).sqrt(),
            });
        }
    }
    Ok(TwoSolutionReport {
        params: *params,
        n_samples: n,
        rows,
    })
}

/// `t_j = j / points`, `j = 1..=points`: the verification grid without `t = 0`.
pub fn verification_times(points: usize, horizon: f64) -> Vec<f64> {
    (1..=points).map(|j| horizon * j as f64 / points as f64).collect()
}
