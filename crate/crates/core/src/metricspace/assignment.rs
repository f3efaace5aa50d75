//! Dense linear assignment by shortest augmenting paths.
//!
//! Rows are inserted one at a time; each insertion runs a Dijkstra search
//! over reduced costs `c[i][j] - u[i] - v[j]` and then updates the dual
//! variables so every reduced cost stays nonnegative.

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Minimum-cost perfect matching of a square `n x n` row-major cost matrix.
/// Returns `assignment[row] = column`.
pub fn solve(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::arg("assignment cost matrix must be square"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::arg("assignment costs must be finite"));
    }
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col_for_row = vec![NONE; n];
    let mut row_for_col = vec![NONE; n];
    let mut path = vec![NONE; n];
    let mut shortest = vec![f64::INFINITY; n];
    let mut visited_rows = vec![false; n];
    let mut visited_cols = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);

    for start in 0..n {
        shortest.iter_mut().for_each(|s| *s = f64::INFINITY);
        visited_rows.iter_mut().for_each(|s| *s = false);
        visited_cols.iter_mut().for_each(|s| *s = false);
        remaining.clear();
        remaining.extend((0..n).rev());

        let mut min_val = 0.0;
        let mut row = start;
        let sink = loop {
            visited_rows[row] = true;
            let mut lowest = f64::INFINITY;
            let mut best = NONE;
            let base = min_val - u[row];
            let costs = &cost[row * n..(row + 1) * n];
            for (k, &j) in remaining.iter().enumerate() {
                let reduced = base + costs[j] - v[j];
                if reduced < shortest[j] {
                    path[j] = row;
                    shortest[j] = reduced;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row_for_col[j] == NONE) {
                    lowest = shortest[j];
                    best = k;
                }
            }
            min_val = lowest;
            let j = remaining.swap_remove(best);
            visited_cols[j] = true;
            if row_for_col[j] == NONE {
                break j;
            }
            row = row_for_col[j];
        };

        u[start] += min_val;
        for i in 0..n {
            if visited_rows[i] && i != start {
                u[i] += min_val - shortest[col_for_row[i]];
            }
        }
        for j in 0..n {
            if visited_cols[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let i = path[j];
            row_for_col[j] = i;
            let previous = std::mem::replace(&mut col_for_row[i], j);
            if i == start {
                break;
            }
            j = previous;
        }
    }
    Ok(col_for_row)
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[f64], n: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn matches_brute_force_on_small_matrices() {
        let mut rng = rng_from_seed(17);
        for trial in 0..300 {
            let n = 1 + trial % 7;
            let cost: Vec<f64> = (0..n * n)
                .map(|_| if rng.random_bool(0.2) { rng.random_range(0..3) as f64 } else { rng.random::<f64>() * 10.0 })
                .collect();
            let a = solve(&cost, n).unwrap();
            let mut sorted = a.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!((assignment_cost(&cost, n, &a) - brute_force(&cost, n)).abs() < 1e-12);
        }
    }

    #[test]
    fn handles_negative_costs_and_rejects_nan() {
        let cost = [-1.0, 5.0, 3.0, -2.0];
        assert_eq!(solve(&cost, 2).unwrap(), vec![0, 1]);
        assert!(solve(&[f64::NAN], 1).is_err());
        assert!(solve(&[1.0, 2.0], 2).is_err());
        assert!(solve(&[], 0).unwrap().is_empty());
    }
}
