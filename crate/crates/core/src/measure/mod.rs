//! Empirical measures, measure flows, and the distances between them.

mod distances;
pub mod io;
pub mod transport;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::RngKey;

pub use distances::{
    damped_sup_distance, node_distance, total_variation, wasserstein, wasserstein_with_cap, weighted_variation,
    weighted_variation_exact, Binning, DistanceReport, FlowCombo, MetricParams, DEFAULT_TRANSPORT_CAP,
};

const WEIGHT_TOL: f64 = 1e-12;

/// Weighted atoms in `R^d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be positive".into()));
        }
        if weights.is_empty() {
            return Err(Error::EmptyData("measure needs at least one atom"));
        }
        if atoms.len() != dim * weights.len() {
            return Err(Error::Dimension {
                expected: dim * weights.len(),
                got: atoms.len(),
            });
        }
        if let Some(k) = atoms.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidMeasure(format!("atom {} is not finite", k / dim)));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidMeasure("weights must be nonnegative".into()));
        }
        let total = compensated_sum(weights.iter().copied());
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { dim, atoms, weights })
    }

    /// Equal weights on the given atoms.
    pub fn uniform(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 || atoms.is_empty() || atoms.len() % dim != 0 {
            return Err(Error::InvalidMeasure("atom buffer does not split into points".into()));
        }
        let n = atoms.len() / dim;
        Self::new(dim, atoms, vec![1.0 / n as f64; n])
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(point.len(), point.to_vec(), vec![1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.atoms.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    /// `sum_i w_i |x_i|^p`.
    pub fn moment(&self, p: f64) -> f64 {
        self.iter().map(|(x, w)| w * norm(x).powf(p)).sum()
    }

    /// Integral of `f` against the measure.
    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.iter().map(|(x, w)| w * f(x)).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            m.iter_mut().zip(x).for_each(|(a, b)| *a += w * b);
        }
        m
    }

    /// Every atom shifted by `h`.
    pub fn translate(&self, h: &[f64]) -> Result<Self> {
        if h.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: h.len(),
            });
        }
        let atoms = self
            .atoms
            .chunks_exact(self.dim)
            .flat_map(|x| x.iter().zip(h).map(|(a, b)| a + b))
            .collect();
        Ok(Self {
            dim: self.dim,
            atoms,
            weights: self.weights.clone(),
        })
    }

    /// `(1 - lambda) self + lambda other`, keeping both atom sets.
    pub fn mix(&self, other: &Self, lambda: f64) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: other.dim,
            });
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::domain("lambda", lambda, "mixing weight must lie in [0,1]"));
        }
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        let weights = self
            .weights
            .iter()
            .map(|w| w * (1.0 - lambda))
            .chain(other.weights.iter().map(|w| w * lambda))
            .collect();
        Self::new(self.dim, atoms, weights)
    }

    /// Deterministic stratified subsample with at most `max_atoms` equally
    /// weighted atoms; returns `self` unchanged if it is already small enough.
    ///
    /// Strata are consecutive `1/max_atoms` slices of cumulative weight. In
    /// one dimension atoms are sorted first and each stratum contributes its
    /// midpoint quantile, so no randomness is involved. In higher dimensions
    /// atoms keep their index order and a single offset drawn from `key`
    /// picks one atom per stratum (systematic resampling).
    pub fn stratified_subsample(&self, max_atoms: usize, key: &RngKey) -> Result<Self> {
        if max_atoms == 0 {
            return Err(Error::domain("max_atoms", 0.0, "subsample size must be positive"));
        }
        if self.len() <= max_atoms {
            return Ok(self.clone());
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let offset = if self.dim == 1 {
            order.sort_by(|&a, &b| self.atoms[a].total_cmp(&self.atoms[b]));
            0.5
        } else {
            key.at(self.len() as u64, 0).random::<f64>()
        };
        let mut atoms = Vec::with_capacity(max_atoms * self.dim);
        let mut cum = 0.0;
        let mut pos = 0usize;
        for k in 0..max_atoms {
            let u = (k as f64 + offset) / max_atoms as f64;
            while pos + 1 < order.len() && cum + self.weights[order[pos]] <= u {
                cum += self.weights[order[pos]];
                pos += 1;
            }
            atoms.extend_from_slice(self.atom(order[pos]));
        }
        Self::uniform(self.dim, atoms)
    }
}

pub fn norm(x: &[f64]) -> f64 {
    if x.len() == 1 {
        x[0].abs()
    } else {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One empirical measure per node of a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    grid: Arc<TimeGrid>,
    measures: Vec<EmpiricalMeasure>,
}

impl MeasureFlow {
    pub fn new(grid: Arc<TimeGrid>, measures: Vec<EmpiricalMeasure>) -> Result<Self> {
        if measures.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} measures for a grid of {} nodes",
                measures.len(),
                grid.len()
            )));
        }
        let d = measures[0].dim();
        if let Some(m) = measures.iter().find(|m| m.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                got: m.dim(),
            });
        }
        Ok(Self { grid, measures })
    }

    /// The same measure at every node.
    pub fn constant(grid: Arc<TimeGrid>, measure: EmpiricalMeasure) -> Self {
        let measures = vec![measure; grid.len()];
        Self { grid, measures }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shared_grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn measures(&self) -> &[EmpiricalMeasure] {
        &self.measures
    }

    pub fn at(&self, node: usize) -> &EmpiricalMeasure {
        &self.measures[node]
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    /// Applies `f` to every node measure.
    pub fn map<F: Fn(usize, &EmpiricalMeasure) -> Result<EmpiricalMeasure>>(&self, f: F) -> Result<Self> {
        let measures = self
            .measures
            .iter()
            .enumerate()
            .map(|(i, m)| f(i, m))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.grid.clone(), measures)
    }

    pub(crate) fn check_aligned(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch("flows are defined on different grids".into()))
        }
    }
}

/// Axis-aligned box split into `bins` equal cells per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    bins: usize,
}

/// Largest supported dimension for histogram binning.
pub const MAX_BINNING_DIM: usize = 3;

impl BinningSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, bins: usize) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() || lower.len() > MAX_BINNING_DIM {
            return Err(Error::InvalidMeasure(format!(
                "binning supports 1..={MAX_BINNING_DIM} dimensions, got {}",
                lower.len()
            )));
        }
        if bins == 0 {
            return Err(Error::domain("bins", 0.0, "need at least one bin per axis"));
        }
        if let Some(k) = (0..lower.len()).find(|&k| !(lower[k] < upper[k]) || !upper[k].is_finite() || !lower[k].is_finite()) {
            return Err(Error::InvalidMeasure(format!(
                "box axis {k}: lower {} must be below upper {}",
                lower[k], upper[k]
            )));
        }
        Ok(Self { lower, upper, bins })
    }

    /// Smallest box covering the atoms of both measures, padded by `pad`
    /// times the extent on each side (at least `1e-9` absolute).
    pub fn covering(g: &EmpiricalMeasure, h: &EmpiricalMeasure, bins: usize, pad: f64) -> Result<Self> {
        if g.dim() != h.dim() {
            return Err(Error::Dimension {
                expected: g.dim(),
                got: h.dim(),
            });
        }
        let d = g.dim();
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for x in g.atoms().chunks_exact(d).chain(h.atoms().chunks_exact(d)) {
            for k in 0..d {
                lower[k] = lower[k].min(x[k]);
                upper[k] = upper[k].max(x[k]);
            }
        }
        for k in 0..d {
            let w = ((upper[k] - lower[k]) * pad).max(1e-9);
            lower[k] -= w;
            upper[k] += w;
        }
        Self::new(lower, upper, bins)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Same box with `factor` times more bins per axis.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.lower.clone(), self.upper.clone(), self.bins * factor)
    }

    /// Flat cell index of `x`, or `None` outside the box. The upper faces
    /// are closed so the box is `[lower, upper]`.
    pub fn cell(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0usize;
        for k in 0..self.dim() {
            if !(x[k] >= self.lower[k] && x[k] <= self.upper[k]) {
                return None;
            }
            let w = (self.upper[k] - self.lower[k]) / self.bins as f64;
            let c = (((x[k] - self.lower[k]) / w) as usize).min(self.bins - 1);
            idx = idx * self.bins + c;
        }
        Some(idx)
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d];
        let mut rest = cell;
        for k in (0..d).rev() {
            let i = rest % self.bins;
            rest /= self.bins;
            let w = (self.upper[k] - self.lower[k]) / self.bins as f64;
            c[k] = self.lower[k] + (i as f64 + 0.5) * w;
        }
        c
    }

    pub fn cell_count(&self) -> usize {
        self.bins.pow(self.dim() as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Domain;

    #[test]
    fn validation() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.4]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![f64::NAN], vec![1.0]).is_err());
        assert!(EmpiricalMeasure::new(2, vec![0.0, 1.0, 2.0], vec![1.0]).is_err());
        let atoms: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
        assert!(EmpiricalMeasure::uniform(1, atoms).is_ok());
    }

    #[test]
    fn moments() {
        assert_eq!(EmpiricalMeasure::dirac(&[0.0]).unwrap().moment(1.7), 0.0);
        assert!((EmpiricalMeasure::dirac(&[-2.0]).unwrap().moment(1.5) - 2f64.powf(1.5)).abs() < 1e-15);
        let m = EmpiricalMeasure::uniform(1, vec![-1.0, 1.0]).unwrap();
        assert_eq!(m.moment(2.0), 1.0);
        let m = EmpiricalMeasure::dirac(&[3.0, 4.0]).unwrap();
        assert!((m.moment(1.0) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn subsample_quantiles_in_one_dimension() {
        let atoms: Vec<f64> = (0..1000).rev().map(|i| i as f64).collect();
        let m = EmpiricalMeasure::uniform(1, atoms).unwrap();
        let s = m.stratified_subsample(10, &RngKey::new(1, Domain::Subsample)).unwrap();
        assert_eq!(s.len(), 10);
        for (k, &x) in s.atoms().iter().enumerate() {
            assert!((x - (k * 100 + 50) as f64).abs() <= 1.0, "stratum {k} gave {x}");
        }
    }

    #[test]
    fn binning_cells_and_centers() {
        let b = BinningSpec::new(vec![-0.5], vec![1.5], 2).unwrap();
        assert_eq!(b.cell(&[0.0]), Some(0));
        assert_eq!(b.cell(&[1.0]), Some(1));
        assert_eq!(b.cell(&[1.5]), Some(1));
        assert_eq!(b.cell(&[1.6]), None);
        assert_eq!(b.center(0), vec![0.0]);
        assert_eq!(b.center(1), vec![1.0]);
        let b2 = BinningSpec::new(vec![0.0, 0.0], vec![2.0, 4.0], 2).unwrap();
        assert_eq!(b2.cell(&[1.5, 0.5]), Some(2));
        assert_eq!(b2.center(2), vec![1.5, 1.0]);
        assert!(BinningSpec::new(vec![1.0], vec![0.0], 4).is_err());
        assert!(BinningSpec::new(vec![0.0; 4], vec![1.0; 4], 4).is_err());
    }
}
