#![allow(dead_code)]

use mvstable::measure::wasserstein;
use mvstable::EmpiricalMeasure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cost of the best vertex of the transportation polytope, by enumerating
/// every 9-cell subset of the 5x5 table that forms a spanning tree of K_{5,5}
/// and solving its (unique) flow by leaf elimination.
pub fn brute_force_lp(supply: &[f64], demand: &[f64], cost: &[f64]) -> f64 {
    let (m, n) = (supply.len(), demand.len());
    let cells = m * n;
    let basis = m + n - 1;
    let mut best = f64::INFINITY;
    let mut pick: Vec<usize> = (0..basis).collect();
    loop {
        if let Some(c) = tree_cost(&pick, supply, demand, cost, n) {
            best = best.min(c);
        }
        // next combination in lexicographic order
        let mut i = basis;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if pick[i] < cells - basis + i {
                break;
            }
        }
        pick[i] += 1;
        for j in i + 1..basis {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

fn tree_cost(pick: &[usize], supply: &[f64], demand: &[f64], cost: &[f64], n: usize) -> Option<f64> {
    let m = supply.len();
    let nodes = m + n;
    let mut deg = vec![0usize; nodes];
    for &c in pick {
        deg[c / n] += 1;
        deg[m + c % n] += 1;
    }
    if deg.contains(&0) {
        return None;
    }
    let mut residual: Vec<f64> = supply.iter().chain(demand).copied().collect();
    let mut alive = vec![true; pick.len()];
    let mut total = 0.0;
    for _ in 0..pick.len() {
        let (e, leaf) = pick.iter().enumerate().filter(|(e, _)| alive[*e]).find_map(|(e, &c)| {
            let (r, s) = (c / n, m + c % n);
            if deg[r] == 1 {
                Some((e, r))
            } else if deg[s] == 1 {
                Some((e, s))
            } else {
                None
            }
        })?;
        let c = pick[e];
        let (r, s) = (c / n, m + c % n);
        let other = if leaf == r { s } else { r };
        let x = residual[leaf];
        if x < -1e-12 {
            return None;
        }
        residual[other] -= x;
        residual[leaf] = 0.0;
        deg[r] -= 1;
        deg[s] -= 1;
        alive[e] = false;
        total += x * cost[c];
    }
    // a cycle leaves edges without leaves; the loop above then returns None
    residual.iter().all(|r| r.abs() < 1e-9).then_some(total)
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn random_measure(rng: &mut ChaCha8Rng, n: usize, d: usize, uniform: bool) -> EmpiricalMeasure {
    let atoms: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    if uniform {
        EmpiricalMeasure::uniform(d, atoms).unwrap()
    } else {
        EmpiricalMeasure::new(d, atoms, random_weights(rng, n)).unwrap()
    }
}

pub fn cost_matrix(g: &EmpiricalMeasure, h: &EmpiricalMeasure, kappa: f64) -> Vec<f64> {
    let mut c = Vec::new();
    for (x, _) in g.iter() {
        for (y, _) in h.iter() {
            let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            c.push(d.powf(kappa));
        }
    }
    c
}

pub fn finish(cost: f64, kappa: f64) -> f64 {
    if kappa > 1.0 {
        cost.powf(1.0 / kappa)
    } else {
        cost
    }
}

/// Largest gap between the exact solver and vertex enumeration over `cases`
/// random 5-atom instances with mixed dimensions and exponents.
pub fn lp_oracle_max_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for &(d, kappa) in [(2, 1.5), (2, 0.5), (1, 0.7), (1, 2.0), (2, 1.0), (3, 1.2)].iter().cycle().take(cases) {
        let g = random_measure(&mut rng, 5, d, false);
        let h = random_measure(&mut rng, 5, d, false);
        let lp = brute_force_lp(g.weights(), h.weights(), &cost_matrix(&g, &h, kappa));
        let got = wasserstein(&g, &h, kappa).unwrap();
        worst = worst.max((got - finish(lp, kappa)).abs());
    }
    worst
}

/// Checks `|int f dg - int f dh| <= W_kappa(g, h)` for 1-Holder-constant
/// test functions `x -> +-min_i (c_i + |x - z_i|^kappa)`, `kappa <= 1`.
/// Returns the number of functions checked and the largest excess.
pub fn holder_dual_check(seed: u64, measures: usize, per_pair: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut excess = f64::NEG_INFINITY;
    for _ in 0..measures {
        let kappa = rng.random_range(0.2..=1.0);
        let d = rng.random_range(1..=2);
        let g = random_measure(&mut rng, 8, d, false);
        let h = random_measure(&mut rng, 6, d, false);
        let w = wasserstein(&g, &h, kappa).unwrap();
        for _ in 0..per_pair {
            let centres: Vec<(Vec<f64>, f64)> = (0..rng.random_range(1..5))
                .map(|_| ((0..d).map(|_| rng.random_range(-3.0..3.0)).collect(), rng.random_range(-1.0..1.0)))
                .collect();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let f = |x: &[f64]| {
                sign * centres
                    .iter()
                    .map(|(z, c)| c + x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt().powf(kappa))
                    .fold(f64::INFINITY, f64::min)
            };
            excess = excess.max((g.integrate(f) - h.integrate(f)).abs() - w);
            checked += 1;
        }
    }
    (checked, excess)
}
