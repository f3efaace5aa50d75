//! Partitioning around medoids: greedy BUILD initialization followed by
//! best-improvement SWAP sweeps. SWAP can stall on plateaus that need two
//! simultaneous exchanges, so small instances are finished by an exact
//! search over all medoid subsets.

use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::error::{Error, Result};

/// Medoid indices, labels and cost of a clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Medoid indices in selection order.
    pub medoids: Vec<usize>,
    /// `assignment[m]` is the position in `medoids` of point `m`'s cluster.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
    pub build_cost: f64,
    /// Total cost after BUILD and after every accepted swap.
    pub cost_trace: Vec<f64>,
}

/// Search settings for [`k_medoids`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMedoidsOptions {
    pub max_sweeps: usize,
    /// Run the exact subset search when `C(M, K)` is at most this.
    pub exact_budget: u64,
}

impl Default for KMedoidsOptions {
    fn default() -> Self {
        KMedoidsOptions {
            max_sweeps: super::DEFAULT_MAX_SWEEPS,
            exact_budget: 50_000,
        }
    }
}

/// `C(m, k)`, saturating at `u64::MAX`.
pub fn binomial(m: usize, k: usize) -> u64 {
    let k = k.min(m - k.min(m));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (m - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Lowest-cost medoid subset by enumeration in lexicographic order; the
/// first subset reaching the minimum wins.
fn exhaustive_medoids(d: &DistanceMatrix, k: usize) -> (Vec<usize>, f64) {
    let m = d.size();
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best = (subset.clone(), total_cost(d, &subset));
    loop {
        let Some(i) = (0..k).rev().find(|&i| subset[i] < m - k + i) else { break };
        subset[i] += 1;
        for j in i + 1..k {
            subset[j] = subset[j - 1] + 1;
        }
        let cost = total_cost(d, &subset);
        if cost < best.1 {
            best = (subset.clone(), cost);
        }
    }
    best
}

/// Index of the nearest medoid for every point (lowest index on ties) and
/// the resulting total cost.
pub fn assign(d: &DistanceMatrix, medoids: &[usize]) -> (Vec<usize>, f64) {
    let m = d.size();
    let mut labels = Vec::with_capacity(m);
    let mut total = 0.0;
    for p in 0..m {
        let (best, dist) = medoids
            .iter()
            .enumerate()
            .map(|(k, &c)| (k, d.get(p, c)))
            .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
        labels.push(best);
        total += dist;
    }
    (labels, total)
}

fn total_cost(d: &DistanceMatrix, medoids: &[usize]) -> f64 {
    (0..d.size())
        .map(|p| medoids.iter().map(|&c| d.get(p, c)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Cluster `M` points into `K` groups around medoids drawn from the points
/// themselves.
pub fn k_medoids(d: &DistanceMatrix, k: usize, opts: &KMedoidsOptions) -> Result<Clustering> {
    let m = d.size();
    if k == 0 || k > m {
        return Err(Error::arg(format!("K = {k} must lie in 1..={m}")));
    }

    // BUILD: start from the most central point, then add the point that
    // lowers the total cost the most.
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; m];
    let mut is_medoid = vec![false; m];
    while medoids.len() < k {
        let mut best = None;
        let mut best_cost = f64::INFINITY;
        for c in (0..m).filter(|&c| !is_medoid[c]) {
            let cost: f64 = (0..m).map(|p| nearest[p].min(d.get(p, c))).sum();
            if cost < best_cost {
                best_cost = cost;
                best = Some(c);
            }
        }
        let c = best.expect("a non-medoid candidate exists while medoids < m");
        is_medoid[c] = true;
        medoids.push(c);
        for p in 0..m {
            nearest[p] = nearest[p].min(d.get(p, c));
        }
    }
    let build_cost = total_cost(d, &medoids);
    let mut current = build_cost;
    let mut trace = vec![current];

    // SWAP: take the best (medoid, non-medoid) exchange while it strictly
    // lowers the cost.
    for _ in 0..opts.max_sweeps {
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..k {
            for h in (0..m).filter(|&h| !is_medoid[h]) {
                let mut trial = medoids.clone();
                trial[slot] = h;
                let cost = total_cost(d, &trial);
                let threshold = best.map_or(current, |b| b.2);
                if cost < threshold && current - cost > 1e-12 * current.abs().max(1.0) {
                    best = Some((slot, h, cost));
                }
            }
        }
        let Some((slot, h, cost)) = best else { break };
        is_medoid[medoids[slot]] = false;
        is_medoid[h] = true;
        medoids[slot] = h;
        current = cost;
        trace.push(current);
    }

    if binomial(m, k) <= opts.exact_budget {
        let (subset, cost) = exhaustive_medoids(d, k);
        if current - cost > 1e-12 * current.abs().max(1.0) {
            medoids = subset;
            trace.push(cost);
        }
    }

    let (assignment, total) = assign(d, &medoids);
    Ok(Clustering {
        medoids,
        assignment,
        total_cost: total,
        build_cost,
        cost_trace: trace,
    })
}
