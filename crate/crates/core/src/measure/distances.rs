use serde::{Deserialize, Serialize};

use super::{norm, transport, BinningSpec, EmpiricalMeasure, MeasureFlow};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{Domain, RngKey};

/// Default cap on the total atom count handed to the exact transport solver.
pub const DEFAULT_TRANSPORT_CAP: usize = 4096;

fn check_dims(g: &EmpiricalMeasure, h: &EmpiricalMeasure) -> Result<()> {
    if g.dim() == h.dim() {
        Ok(())
    } else {
        Err(Error::Dimension {
            expected: g.dim(),
            got: h.dim(),
        })
    }
}

/// `W_kappa(g, h)`: optimal transport with cost `|x - y|^kappa`, raised to
/// `1/kappa` only when `kappa > 1`.
pub fn wasserstein(g: &EmpiricalMeasure, h: &EmpiricalMeasure, kappa: f64) -> Result<f64> {
    wasserstein_with_cap(g, h, kappa, DEFAULT_TRANSPORT_CAP)
}

pub fn wasserstein_with_cap(g: &EmpiricalMeasure, h: &EmpiricalMeasure, kappa: f64, cap: usize) -> Result<f64> {
    check_dims(g, h)?;
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::domain("kappa", kappa, "Wasserstein exponent must be positive"));
    }
    // monotone coupling is optimal for convex costs on the line only
    let cost = if g.dim() == 1 && kappa >= 1.0 {
        monotone_cost(g, h, kappa)
    } else {
        let atoms = g.len() + h.len();
        if atoms > cap {
            return Err(Error::Capacity { atoms, cap });
        }
        let d = g.dim();
        let mut c = Vec::with_capacity(g.len() * h.len());
        for x in g.atoms().chunks_exact(d) {
            for y in h.atoms().chunks_exact(d) {
                let dist = if d == 1 {
                    (x[0] - y[0]).abs()
                } else {
                    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                };
                c.push(dist.powf(kappa));
            }
        }
        transport::solve(g.weights(), h.weights(), &c)?.cost
    };
    let cost = cost.max(0.0);
    Ok(if kappa > 1.0 { cost.powf(1.0 / kappa) } else { cost })
}

/// `int_0^1 |G^{-1}(u) - H^{-1}(u)|^kappa du` for one-dimensional measures.
fn monotone_cost(g: &EmpiricalMeasure, h: &EmpiricalMeasure, kappa: f64) -> f64 {
    let sorted = |m: &EmpiricalMeasure| {
        let mut v: Vec<(f64, f64)> = m.atoms().iter().copied().zip(m.weights().iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, b) = (sorted(g), sorted(h));
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    loop {
        let step = ra.min(rb);
        if step > 0.0 {
            let d = (a[i].0 - b[j].0).abs();
            cost += step * if kappa == 1.0 { d } else { d.powf(kappa) };
        }
        ra -= step;
        rb -= step;
        if ra <= 0.0 {
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1;
        }
        if rb <= 0.0 {
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    cost
}

fn binned_difference(g: &EmpiricalMeasure, h: &EmpiricalMeasure, bins: &BinningSpec) -> Result<Vec<f64>> {
    check_dims(g, h)?;
    if bins.dim() != g.dim() {
        return Err(Error::Dimension {
            expected: g.dim(),
            got: bins.dim(),
        });
    }
    let mut diff = vec![0.0; bins.cell_count()];
    for (m, sign) in [(g, 1.0), (h, -1.0)] {
        for (x, w) in m.iter() {
            let c = bins.cell(x).ok_or_else(|| Error::OutsideBox { atom: x.to_vec() })?;
            diff[c] += sign * w;
        }
    }
    Ok(diff)
}

/// Histogram estimator of `||g - h||_{k,var}`: `sum_b (1 + |c_b|^k) |g(b) - h(b)|`
/// with `c_b` the cell centre.
pub fn weighted_variation(g: &EmpiricalMeasure, h: &EmpiricalMeasure, k: f64, bins: &BinningSpec) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::domain("k", k, "weight exponent must be positive"));
    }
    let diff = binned_difference(g, h, bins)?;
    Ok(diff
        .iter()
        .enumerate()
        .filter(|(_, d)| **d != 0.0)
        .map(|(c, d)| (1.0 + norm(&bins.center(c)).powf(k)) * d.abs())
        .sum())
}

/// Histogram estimator of `||g - h||_var = sup_{|f| <= 1} |g(f) - h(f)|`.
pub fn total_variation(g: &EmpiricalMeasure, h: &EmpiricalMeasure, bins: &BinningSpec) -> Result<f64> {
    Ok(binned_difference(g, h, bins)?.iter().map(|d| d.abs()).sum())
}

/// Exact `||g - h||_{k,var}` for discrete measures:
/// `sum_x (1 + |x|^k) |g({x}) - h({x})|` over the union of atoms.
pub fn weighted_variation_exact(g: &EmpiricalMeasure, h: &EmpiricalMeasure, k: f64) -> Result<f64> {
    check_dims(g, h)?;
    if !(k >= 0.0) {
        return Err(Error::domain("k", k, "weight exponent must be nonnegative"));
    }
    let mut items: Vec<(&[f64], f64)> = g.iter().chain(h.iter().map(|(x, w)| (x, -w))).collect();
    items.sort_by(|a, b| {
        a.0.iter()
            .zip(b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut total = 0.0;
    let mut i = 0;
    while i < items.len() {
        let x = items[i].0;
        let mut mass = 0.0;
        while i < items.len() && items[i].0 == x {
            mass += items[i].1;
            i += 1;
        }
        total += (1.0 + norm(x).powf(k)) * mass.abs();
    }
    Ok(total)
}

/// Which pair of distances the damped sup metric adds up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowCombo {
    /// `W_eta + W_k`, the metric of the noise-flow fixed point.
    EtaPlusK,
    /// `||.||_{k,var} + W_k`, the metric of the drift-flow fixed point.
    KvarPlusK,
}

/// Histogram box policy for the weighted variation term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// One shared box; atoms outside it are an error.
    Fixed(BinningSpec),
    /// Per node, the box covering both measures' atoms.
    Auto { bins: usize },
}

impl Binning {
    fn spec_for(&self, g: &EmpiricalMeasure, h: &EmpiricalMeasure) -> Result<BinningSpec> {
        match self {
            Binning::Fixed(spec) => Ok(spec.clone()),
            Binning::Auto { bins } => BinningSpec::covering(g, h, *bins, 1e-6),
        }
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

/// Exponents and estimator settings of the flow metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub eta: f64,
    pub k: f64,
    pub binning: Binning,
    /// Measures larger than this are stratified-subsampled before any
    /// transport problem that has no monotone fast path.
    pub transport_atoms: usize,
    pub subsample_seed: u64,
}

impl MetricParams {
    pub fn new(eta: f64, k: f64) -> Self {
        Self {
            eta,
            k,
            binning: Binning::Auto { bins: 64 },
            transport_atoms: 200,
            subsample_seed: 0,
        }
    }

    fn transport_distance(&self, g: &EmpiricalMeasure, h: &EmpiricalMeasure, kappa: f64) -> Result<f64> {
        if g.dim() == 1 && kappa >= 1.0 {
            return wasserstein_with_cap(g, h, kappa, usize::MAX);
        }
        let key = RngKey::new(self.subsample_seed, Domain::Subsample);
        let gs = g.stratified_subsample(self.transport_atoms, &key)?;
        let hs = h.stratified_subsample(self.transport_atoms, &key)?;
        wasserstein_with_cap(&gs, &hs, kappa, usize::MAX)
    }
}

/// Sum of the two distances selected by `combo` between two node measures.
pub fn node_distance(g: &EmpiricalMeasure, h: &EmpiricalMeasure, combo: FlowCombo, params: &MetricParams) -> Result<f64> {
    let wk = params.transport_distance(g, h, params.k)?;
    let first = match combo {
        FlowCombo::EtaPlusK => params.transport_distance(g, h, params.eta)?,
        FlowCombo::KvarPlusK => weighted_variation(g, h, params.k, &params.binning.spec_for(g, h)?)?,
    };
    Ok(first + wk)
}

/// `max_j e^{-delta t_j} (D_1 + D_2)(F_j, G_j)` over the grid nodes.
pub fn damped_sup_distance(
    f: &MeasureFlow,
    g: &MeasureFlow,
    delta: f64,
    combo: FlowCombo,
    params: &MetricParams,
    exec: Execution,
) -> Result<f64> {
    f.check_aligned(g)?;
    if !(delta >= 0.0) {
        return Err(Error::domain("delta", delta, "damping must be nonnegative"));
    }
    let nodes = f.grid().nodes();
    let values = exec.try_map(nodes.len(), |j| {
        if f.at(j) == g.at(j) {
            return Ok(0.0);
        }
        node_distance(f.at(j), g.at(j), combo, params).map(|d| (-delta * nodes[j]).exp() * d)
    })?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

/// JSON record describing one computed distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceReport {
    pub metric: String,
    pub kappa: Option<f64>,
    pub value: f64,
    pub estimator_params: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    use crate::grid::TimeGrid;

    fn dirac(x: f64) -> EmpiricalMeasure {
        EmpiricalMeasure::dirac(&[x]).unwrap()
    }

    #[test]
    fn single_coupling_values() {
        assert_relative_eq!(wasserstein(&dirac(0.0), &dirac(1.0), 1.0).unwrap(), 1.0);
        assert_relative_eq!(wasserstein(&dirac(0.0), &dirac(2.0), 0.5).unwrap(), 2f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(wasserstein(&dirac(0.0), &dirac(2.0), 2.0).unwrap(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn monotone_path_agrees_with_general_solver() {
        let g = EmpiricalMeasure::new(1, vec![0.3, -1.0, 2.0], vec![0.2, 0.5, 0.3]).unwrap();
        let h = EmpiricalMeasure::new(1, vec![1.0, 0.0, -0.5, 4.0], vec![0.1, 0.4, 0.25, 0.25]).unwrap();
        for kappa in [1.0, 1.5, 2.0] {
            let fast = monotone_cost(&g, &h, kappa);
            let d = 1;
            let mut c = Vec::new();
            for x in g.atoms().chunks(d) {
                for y in h.atoms().chunks(d) {
                    c.push((x[0] - y[0]).abs().powf(kappa));
                }
            }
            let lp = transport::solve(g.weights(), h.weights(), &c).unwrap().cost;
            assert_relative_eq!(fast, lp, epsilon = 1e-12);
        }
    }

    #[test]
    fn capacity_error() {
        let big = EmpiricalMeasure::uniform(1, (0..3000).map(|i| i as f64).collect()).unwrap();
        assert!(matches!(
            wasserstein(&big, &big, 0.5),
            Err(Error::Capacity { atoms: 6000, cap: 4096 })
        ));
        // the monotone path has no cap
        assert_eq!(wasserstein(&big, &big, 1.2).unwrap(), 0.0);
    }

    #[test]
    fn variation_examples() {
        let bins = BinningSpec::new(vec![-0.5], vec![1.5], 2).unwrap();
        let (a, b) = (dirac(0.0), dirac(1.0));
        assert_eq!(weighted_variation(&a, &a, 1.0, &bins).unwrap(), 0.0);
        assert_relative_eq!(weighted_variation(&a, &b, 1.0, &bins).unwrap(), 3.0);
        assert_relative_eq!(total_variation(&a, &b, &bins).unwrap(), 2.0);
        assert_relative_eq!(weighted_variation_exact(&a, &b, 1.0).unwrap(), 3.0);
        let outside = dirac(5.0);
        match weighted_variation(&a, &outside, 1.0, &bins) {
            Err(Error::OutsideBox { atom }) => assert_eq!(atom, vec![5.0]),
            other => panic!("expected OutsideBox, got {other:?}"),
        }
    }

    #[test]
    fn exact_variation_merges_shared_atoms() {
        let g = EmpiricalMeasure::new(1, vec![0.0, 1.0, 2.0], vec![0.5, 0.25, 0.25]).unwrap();
        let h = EmpiricalMeasure::new(1, vec![2.0, 0.0], vec![0.5, 0.5]).unwrap();
        // |0.25| at 1 (weight 2) + |0.25 - 0.5| at 2 (weight 3)
        assert_relative_eq!(weighted_variation_exact(&g, &h, 1.0).unwrap(), 0.5 + 0.75);
    }

    #[test]
    fn damped_sup_trivial_cases() {
        let grid = Arc::new(TimeGrid::uniform(1.0, 4).unwrap());
        let params = MetricParams::new(0.5, 1.2);
        let f = MeasureFlow::constant(grid.clone(), dirac(0.0));
        let g = MeasureFlow::constant(grid.clone(), dirac(1.0));
        for combo in [FlowCombo::EtaPlusK, FlowCombo::KvarPlusK] {
            assert_eq!(damped_sup_distance(&f, &f, 3.0, combo, &params, Execution::Sequential).unwrap(), 0.0);
        }
        // constant flows: the sup sits at t = 0 whatever the damping
        let v = damped_sup_distance(&f, &g, 2.0, FlowCombo::EtaPlusK, &params, Execution::Sequential).unwrap();
        assert_relative_eq!(v, 2.0, epsilon = 1e-12);
        let other = MeasureFlow::constant(Arc::new(TimeGrid::uniform(1.0, 5).unwrap()), dirac(0.0));
        assert!(damped_sup_distance(&f, &other, 1.0, FlowCombo::EtaPlusK, &params, Execution::Sequential).is_err());
    }
}
