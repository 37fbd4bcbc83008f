//! Exact discrete optimal transport.
//!
//! Min-cost flow on the complete bipartite graph by successive shortest
//! augmenting paths. Dijkstra runs on reduced costs with node potentials, so
//! every intermediate flow is optimal for the mass routed so far and the
//! final plan is an exact optimum (up to floating-point rounding).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Masses below this are treated as exhausted.
const MASS_EPS: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub cost: f64,
    /// Row-major `supply.len() x demand.len()` flows.
    pub flow: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Copy, PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Solves `min sum c_ij x_ij` over couplings of `supply` and `demand`.
///
/// `cost` is row-major with `supply.len() * demand.len()` nonnegative entries.
/// Supplies and demands must have equal totals (within `1e-9`).
pub fn solve(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<TransportPlan> {
    let (m, n) = (supply.len(), demand.len());
    if m == 0 || n == 0 {
        return Err(Error::EmptyData("transport problem needs atoms on both sides"));
    }
    if cost.len() != m * n {
        return Err(Error::Dimension {
            expected: m * n,
            got: cost.len(),
        });
    }
    if supply.iter().chain(demand).any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidMeasure("masses must be finite and nonnegative".into()));
    }
    let (ts, td) = (supply.iter().sum::<f64>(), demand.iter().sum::<f64>());
    if (ts - td).abs() > 1e-9 * ts.max(td).max(1.0) {
        return Err(Error::InvalidMeasure(format!("unbalanced masses {ts} vs {td}")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("non-finite transport cost".into()));
    }

    let mut sup = supply.to_vec();
    let mut dem = demand.to_vec();
    let mut flow = vec![0.0; m * n];
    // potentials: reduced cost of arc i -> j is c_ij + pu_i - pv_j >= 0
    let mut pu = vec![0.0; m];
    let mut pv: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| cost[i * n + j]).fold(f64::INFINITY, f64::min))
        .collect();

    // node ids: sources 0..m, sinks m..m+n
    let total = m + n;
    let mut dist = vec![f64::INFINITY; total];
    let mut pred = vec![usize::MAX; total];
    let mut done = vec![false; total];
    let mut heap = BinaryHeap::new();
    // columns with positive flow per row, for backward arcs
    let mut col_rows: Vec<Vec<usize>> = vec![Vec::new(); n];

    let max_rounds = 4 * (m + n) * (m + n) + 16;
    for _ in 0..max_rounds {
        let remaining: f64 = sup.iter().sum();
        if remaining <= MASS_EPS * m as f64 || sup.iter().all(|&s| s <= MASS_EPS) {
            break;
        }
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        pred.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        heap.clear();
        for i in 0..m {
            if sup[i] > MASS_EPS {
                dist[i] = 0.0;
                heap.push(Entry(0.0, i));
            }
        }
        let mut target = None;
        while let Some(Entry(d, u)) = heap.pop() {
            if done[u] || d > dist[u] {
                continue;
            }
            done[u] = true;
            if u < m {
                let row = &cost[u * n..(u + 1) * n];
                for j in 0..n {
                    let v = m + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (row[j] + pu[u] - pv[j]).max(0.0);
                    let nd = d + rc;
                    if nd < dist[v] {
                        dist[v] = nd;
                        pred[v] = u;
                        heap.push(Entry(nd, v));
                    }
                }
            } else {
                let j = u - m;
                if dem[j] > MASS_EPS {
                    target = Some(u);
                    break;
                }
                for &i in &col_rows[j] {
                    if done[i] || flow[i * n + j] <= MASS_EPS {
                        continue;
                    }
                    let rc = (-(cost[i * n + j] + pu[i] - pv[j])).max(0.0);
                    let nd = d + rc;
                    if nd < dist[i] {
                        dist[i] = nd;
                        pred[i] = u;
                        heap.push(Entry(nd, i));
                    }
                }
            }
        }
        let Some(target) = target else {
            break;
        };
        let cap = dist[target];
        for i in 0..m {
            pu[i] += dist[i].min(cap);
        }
        for j in 0..n {
            pv[j] += dist[m + j].min(cap);
        }

        // bottleneck along the path
        let mut delta = dem[target - m];
        let mut v = target;
        loop {
            let u = pred[v];
            if v >= m {
                // forward arc u -> v, unbounded
                if pred[u] == usize::MAX {
                    delta = delta.min(sup[u]);
                    break;
                }
            } else {
                // backward arc u(sink) -> v(source) cancels flow on (v, u)
                delta = delta.min(flow[v * n + (u - m)]);
            }
            v = u;
        }
        let mut v = target;
        loop {
            let u = pred[v];
            if v >= m {
                let (i, j) = (u, v - m);
                if flow[i * n + j] <= MASS_EPS {
                    col_rows[j].push(i);
                }
                flow[i * n + j] += delta;
                if pred[u] == usize::MAX {
                    sup[u] -= delta;
                    break;
                }
            } else {
                let (i, j) = (v, u - m);
                flow[i * n + j] -= delta;
                if flow[i * n + j] <= MASS_EPS {
                    flow[i * n + j] = 0.0;
                    col_rows[j].retain(|&r| r != i);
                }
            }
            v = u;
        }
        dem[target - m] -= delta;
    }

    let cost_total = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
    Ok(TransportPlan {
        cost: cost_total,
        flow,
        rows: m,
        cols: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_coupling() {
        let p = solve(&[1.0], &[1.0], &[3.5]).unwrap();
        assert_relative_eq!(p.cost, 3.5);
    }

    #[test]
    fn assignment_picks_cheaper_matching() {
        // |x - y| with x = {0, 1}, y = {0.1, 1.1}
        let cost = [0.1, 1.1, 0.9, 0.1];
        let p = solve(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert_relative_eq!(p.cost, 0.1, epsilon = 1e-15);
        assert_relative_eq!(p.flow[0], 0.5);
        assert_relative_eq!(p.flow[3], 0.5);
    }

    #[test]
    fn marginals_are_respected() {
        let supply = [0.2, 0.5, 0.3];
        let demand = [0.6, 0.1, 0.1, 0.2];
        let cost: Vec<f64> = (0..12).map(|k| ((k * 37 % 11) as f64).sqrt()).collect();
        let p = solve(&supply, &demand, &cost).unwrap();
        for i in 0..3 {
            let row: f64 = (0..4).map(|j| p.flow[i * 4 + j]).sum();
            assert_relative_eq!(row, supply[i], epsilon = 1e-12);
        }
        for j in 0..4 {
            let col: f64 = (0..3).map(|i| p.flow[i * 4 + j]).sum();
            assert_relative_eq!(col, demand[j], epsilon = 1e-12);
        }
        assert!(p.flow.iter().all(|&f| f >= 0.0));
    }

    #[test]
    fn rejects_unbalanced() {
        assert!(solve(&[1.0], &[0.5], &[1.0]).is_err());
    }
}
