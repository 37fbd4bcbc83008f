use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when matching a time against grid nodes.
const NODE_TOL: f64 = 1e-12;

/// Strictly increasing time nodes `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::InvalidGrid("a grid needs at least two nodes".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("first node must be 0, got {}", nodes[0])));
        }
        if let Some(w) = nodes.windows(2).find(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::InvalidGrid(format!("nodes not strictly increasing at {} -> {}", w[0], w[1])));
        }
        Ok(Self { nodes })
    }

    /// `steps` equal steps on `[0, horizon]`; the last node is exactly `horizon`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::domain("horizon", horizon, "must be positive and finite"));
        }
        if steps == 0 {
            return Err(Error::InvalidGrid("at least one step is required".into()));
        }
        let mut nodes: Vec<f64> = (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect();
        nodes[steps] = horizon;
        Self::new(nodes)
    }

    /// Grid with each step of `self` split into `factor` equal sub-steps.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidGrid("refinement factor must be positive".into()));
        }
        let mut nodes = Vec::with_capacity(self.steps() * factor + 1);
        for w in self.nodes.windows(2) {
            for k in 0..factor {
                nodes.push(w[0] + (w[1] - w[0]) * k as f64 / factor as f64);
            }
        }
        nodes.push(self.horizon());
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.nodes[step + 1] - self.nodes[step]
    }

    /// Index of the node equal to `t` (within a relative tolerance).
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = NODE_TOL * self.horizon().max(1.0);
        let pos = self.nodes.partition_point(|&x| x < t - tol);
        match self.nodes.get(pos) {
            Some(&x) if (x - t).abs() <= tol => Ok(pos),
            _ => Err(Error::GridAlignment { time: t }),
        }
    }

    /// Truncation of the grid at node `last` (inclusive).
    pub fn prefix(&self, last: usize) -> Result<Self> {
        Self::new(self.nodes[..=last].to_vec())
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.nodes
    }
}
