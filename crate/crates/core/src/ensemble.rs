//! Particle ensembles, joint samples and the empirical utilities every
//! filter shares.

use std::path::Path;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::rng::{permutation, rng_from_seed};

/// `N` particles in `R^n`, stored row-major, with optional importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEnsemble {
    dim: usize,
    particles: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl StateEnsemble {
    /// Equally-weighted ensemble from a row-major particle buffer.
    pub fn new(dim: usize, particles: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("ensemble dimension must be positive"));
        }
        if particles.is_empty() || !particles.len().is_multiple_of(dim) {
            return Err(Error::arg(format!(
                "particle buffer of length {} does not hold a whole number of {dim}-dimensional rows",
                particles.len()
            )));
        }
        Ok(StateEnsemble {
            dim,
            particles,
            weights: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim("ensemble row", dim, r.len())?;
            flat.extend_from_slice(r);
        }
        Self::new(dim, flat)
    }

    /// Attach importance weights; they must form a probability simplex.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_dim("ensemble weights", self.len(), weights.len())?;
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::arg("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::arg(format!("weights sum to {total}, not 1")));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.particles.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.particles.chunks_exact(self.dim)
    }

    pub fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.particles.chunks_exact_mut(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.particles
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.particles
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Weight of particle `i` (uniform when no weights are attached).
    pub fn weight(&self, i: usize) -> f64 {
        match &self.weights {
            Some(w) => w[i],
            None => 1.0 / self.len() as f64,
        }
    }

    /// Values of coordinate `j` across all particles.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Rows selected by `indices`, equally weighted.
    pub fn select(&self, indices: &[usize]) -> StateEnsemble {
        let mut flat = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            flat.extend_from_slice(self.row(i));
        }
        StateEnsemble {
            dim: self.dim,
            particles: flat,
            weights: None,
        }
    }

    /// Coordinates `range` of every particle, as a new ensemble.
    pub fn columns(&self, range: std::ops::Range<usize>) -> Result<StateEnsemble> {
        if range.end > self.dim || range.is_empty() {
            return Err(Error::arg("column range out of bounds"));
        }
        let mut flat = Vec::with_capacity(self.len() * range.len());
        for r in self.rows() {
            flat.extend_from_slice(&r[range.clone()]);
        }
        StateEnsemble::new(range.len(), flat)
    }

    /// Concatenate ensembles of equal size column-wise.
    pub fn hstack(parts: &[StateEnsemble]) -> Result<StateEnsemble> {
        let first = parts.first().ok_or_else(|| Error::arg("nothing to stack"))?;
        let n = first.len();
        let dim: usize = parts.iter().map(|p| p.dim).sum();
        let mut flat = Vec::with_capacity(n * dim);
        for p in parts {
            check_dim("stacked ensemble size", n, p.len())?;
        }
        for i in 0..n {
            for p in parts {
                flat.extend_from_slice(p.row(i));
            }
        }
        StateEnsemble::new(dim, flat)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (1..=self.dim).map(|j| format!("x_{j}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for r in self.rows() {
            out.push_str(&crate::io::join_floats(r));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<StateEnsemble> {
        let table = crate::io::read_table(path)?;
        StateEnsemble::new(table.header.len(), table.values)
    }
}

/// Weighted empirical mean of the ensemble.
pub fn empirical_mean(e: &StateEnsemble) -> Vec<f64> {
    let mut mean = vec![0.0; e.dim()];
    for (i, r) in e.rows().enumerate() {
        let w = e.weight(i);
        for (m, v) in mean.iter_mut().zip(r) {
            *m += w * v;
        }
    }
    mean
}

/// Weighted per-coordinate variance (population convention).
pub fn empirical_variance(e: &StateEnsemble) -> Vec<f64> {
    let mean = empirical_mean(e);
    let mut var = vec![0.0; e.dim()];
    for (i, r) in e.rows().enumerate() {
        let w = e.weight(i);
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += w * (v - m) * (v - m);
        }
    }
    var
}

/// Copy indices produced by systematic resampling of `weights`.
///
/// A single uniform offset `u ~ U[0, 1/N)` is shared by the `N` evenly spaced
/// pointers, so particle `i` is copied either `floor(N w_i)` or `ceil(N w_i)`
/// times.
pub fn systematic_indices<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::arg("cannot resample an empty ensemble"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate(format!(
            "resampling weights sum to {total}"
        )));
    }
    let step = 1.0 / n as f64;
    let offset = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0] / total;
    let mut j = 0;
    for k in 0..n {
        let pointer = offset + k as f64 * step;
        while pointer >= cumulative && j + 1 < n {
            j += 1;
            cumulative += weights[j] / total;
        }
        out.push(j);
    }
    Ok(out)
}

/// Systematic (low-variance) resampling to an equally weighted ensemble.
pub fn systematic_resample<R: Rng + ?Sized>(e: &StateEnsemble, rng: &mut R) -> Result<StateEnsemble> {
    let weights: Vec<f64> = (0..e.len()).map(|i| e.weight(i)).collect();
    let idx = systematic_indices(&weights, rng)?;
    Ok(e.select(&idx))
}

/// Row-aligned samples from the joint law of `(X, Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub x: StateEnsemble,
    pub y: StateEnsemble,
}

impl JointSample {
    pub fn new(x: StateEnsemble, y: StateEnsemble) -> Result<Self> {
        check_dim("joint sample rows", x.len(), y.len())?;
        Ok(JointSample { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.x.dim()
    }

    pub fn y_dim(&self) -> usize {
        self.y.dim()
    }

    /// CSV with columns `x_1..x_n, y_1..y_{n_y}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header: Vec<String> = (1..=self.x_dim()).map(|j| format!("x_{j}")).collect();
        header.extend((1..=self.y_dim()).map(|j| format!("y_{j}")));
        let mut out = header.join(",");
        out.push('\n');
        for (xr, yr) in self.x.rows().zip(self.y.rows()) {
            out.push_str(&crate::io::join_floats(xr));
            out.push(',');
            out.push_str(&crate::io::join_floats(yr));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<JointSample> {
        let table = crate::io::read_table(path)?;
        let nx = table.header.iter().filter(|h| h.starts_with("x_")).count();
        let ny = table.header.iter().filter(|h| h.starts_with("y_")).count();
        if nx == 0 || ny == 0 || nx + ny != table.header.len() {
            return Err(Error::format(format!(
                "{}: expected columns x_1..x_n,y_1..y_m",
                path.display()
            )));
        }
        let width = nx + ny;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for row in table.values.chunks_exact(width) {
            xs.extend_from_slice(&row[..nx]);
            ys.extend_from_slice(&row[nx..]);
        }
        JointSample::new(StateEnsemble::new(nx, xs)?, StateEnsemble::new(ny, ys)?)
    }
}

/// Permute the `y` rows by a uniform random permutation, realizing samples
/// from the independence coupling of the two marginals.
pub fn shuffle_pairing(j: &JointSample, seed: u64) -> JointSample {
    let mut rng = rng_from_seed(seed);
    let perm = permutation(j.len(), &mut rng);
    JointSample {
        x: j.x.clone(),
        y: j.y.select(&perm),
    }
}

/// Per-coordinate affine standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and std of a row-major `rows x dim` cloud; constant
    /// coordinates get std 1.
    pub fn fit(cloud: &[f64], dim: usize) -> Self {
        let n = (cloud.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in cloud.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in cloud.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 * (1.0 + m.abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { mean, std }
    }

    pub fn apply(&self, cloud: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        let mut out = Vec::with_capacity(cloud.len());
        for r in cloud.chunks_exact(dim) {
            for ((v, m), s) in r.iter().zip(&self.mean).zip(&self.std) {
                out.push((v - m) / s);
            }
        }
        out
    }

    pub fn invert(&self, cloud: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        let mut out = Vec::with_capacity(cloud.len());
        for r in cloud.chunks_exact(dim) {
            for ((v, m), s) in r.iter().zip(&self.mean).zip(&self.std) {
                out.push(v * s + m);
            }
        }
        out
    }
}

/// Standardize a row-major cloud to zero mean and unit population std per
/// coordinate. Returns the standardized cloud and the fitted transform.
pub fn standardize(cloud: &[f64], dim: usize) -> Result<(Vec<f64>, Standardization)> {
    if dim == 0 || !cloud.len().is_multiple_of(dim) {
        return Err(Error::arg("cloud is not a whole number of rows"));
    }
    if cloud.len() / dim < 2 {
        return Err(Error::arg("standardize needs at least two rows"));
    }
    let t = Standardization::fit(cloud, dim);
    Ok((t.apply(cloud), t))
}
