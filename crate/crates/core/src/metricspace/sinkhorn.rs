//! Entropic optimal transport between uniform point clouds (log-domain
//! Sinkhorn), an approximate fast path for W2.

use crate::error::{Error, Result};

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Transport cost `<P, C>` of the entropic plan between two uniform clouds
/// under squared Euclidean cost. `relative_eps` is scaled by the mean cost.
pub fn sinkhorn_cost(a: &[f64], b: &[f64], dim: usize, relative_eps: f64, max_iter: usize, tol: f64) -> Result<f64> {
    if dim == 0 || a.is_empty() || b.is_empty() || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::arg("Sinkhorn needs two nonempty clouds of equal dimension"));
    }
    if !(relative_eps > 0.0) {
        return Err(Error::arg("entropic regularization must be positive"));
    }
    let (n, m) = (a.len() / dim, b.len() / dim);
    let mut cost = Vec::with_capacity(n * m);
    for x in a.chunks_exact(dim) {
        for y in b.chunks_exact(dim) {
            cost.push(x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>());
        }
    }
    let mean_cost = cost.iter().sum::<f64>() / cost.len() as f64;
    if mean_cost == 0.0 {
        return Ok(0.0);
    }
    let eps = relative_eps * mean_cost;
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..max_iter {
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            f[i] = eps * log_a - eps * log_sum_exp(row.iter().zip(&g).map(|(c, gj)| (gj - c) / eps));
        }
        for j in 0..m {
            g[j] = eps * log_b - eps * log_sum_exp((0..n).map(|i| (f[i] - cost[i * m + j]) / eps));
        }
        // Column marginals are exact after the g update; check the rows.
        let err: f64 = (0..n)
            .map(|i| {
                let s: f64 = (0..m).map(|j| ((f[i] + g[j] - cost[i * m + j]) / eps).exp()).sum();
                (s - 1.0 / n as f64).abs()
            })
            .sum();
        if err < tol {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost[i * m + j];
            total += ((f[i] + g[j] - c) / eps).exp() * c;
        }
    }
    Ok(total)
}
