//! Distances between pre-trained records, the pairwise distance matrix and
//! K-medoids selection of representative records.

pub mod assignment;
pub mod kmedoids;
pub mod library;
pub mod sinkhorn;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::Standardization;
use crate::error::{check_dim, Error, Result};
use crate::io::{join_floats, read_text, write_text};
use crate::rng::{derive_seed_path, permutation, rng_from_seed, subsample_indices};

pub use kmedoids::{k_medoids, Clustering, KMedoidsOptions};
pub use library::{MedoidLibrary, PretrainedRecord, Provenance};

/// Point clouds above this size are subsampled before a distance solve.
pub const DEFAULT_CLOUD_CAP: usize = 512;
/// Sweep budget for the K-medoids SWAP phase.
pub const DEFAULT_MAX_SWEEPS: usize = 100;

/// Which distance compares two records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Wasserstein-2 between state samples.
    W2,
    /// RBF-kernel maximum mean discrepancy between state samples.
    Mmd,
    /// Mean distance between the two maps' transported particles.
    TDist,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::W2 => "w2",
            MetricKind::Mmd => "mmd",
            MetricKind::TDist => "tdist",
        }
    }

    /// Whether the metric only needs state samples (and so can compare a
    /// live ensemble against a record).
    pub fn uses_samples_only(self) -> bool {
        !matches!(self, MetricKind::TDist)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w2" => Ok(MetricKind::W2),
            "mmd" => Ok(MetricKind::Mmd),
            "tdist" | "t" => Ok(MetricKind::TDist),
            other => Err(Error::arg(format!("unknown metric '{other}' (expected w2, mmd or tdist)"))),
        }
    }
}

/// Tuning shared by the sample-based distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceOptions {
    /// Subsample clouds larger than this before solving.
    pub cloud_cap: usize,
    pub mmd_lengthscale: f64,
    /// Compare `(x, y)` samples instead of `x` alone.
    pub use_joint: bool,
    /// Use entropic transport with this relative regularization instead of
    /// the exact assignment for W2.
    pub sinkhorn_eps: Option<f64>,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions {
            cloud_cap: DEFAULT_CLOUD_CAP,
            mmd_lengthscale: 1.0,
            use_joint: false,
            sinkhorn_eps: None,
        }
    }
}

fn check_cloud(cloud: &[f64], dim: usize, what: &str) -> Result<usize> {
    if dim == 0 || cloud.is_empty() {
        return Err(Error::arg(format!("{what} is empty")));
    }
    if !cloud.len().is_multiple_of(dim) {
        return Err(Error::arg(format!("{what} is not a whole number of {dim}-d rows")));
    }
    Ok(cloud.len() / dim)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Exact W2 between two equal-size uniform clouds (row-major, `dim` columns).
pub fn w2_exact(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    let n = check_cloud(a, dim, "first cloud")?;
    check_dim("W2 cloud size", n, check_cloud(b, dim, "second cloud")?)?;
    let mut cost = Vec::with_capacity(n * n);
    for x in a.chunks_exact(dim) {
        for y in b.chunks_exact(dim) {
            cost.push(squared_distance(x, y));
        }
    }
    let matching = assignment::solve(&cost, n)?;
    Ok((assignment::assignment_cost(&cost, n, &matching) / n as f64).max(0.0).sqrt())
}

fn pick_rows(cloud: &[f64], dim: usize, indices: &[usize]) -> Vec<f64> {
    indices.iter().flat_map(|&i| cloud[i * dim..(i + 1) * dim].iter().copied()).collect()
}

/// Bring two clouds to a common size no larger than `cap` by uniform
/// subsampling without replacement.
pub fn equalize<R: Rng + ?Sized>(a: &[f64], b: &[f64], dim: usize, cap: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let na = check_cloud(a, dim, "first cloud")?;
    let nb = check_cloud(b, dim, "second cloud")?;
    let size = na.min(nb).min(cap.max(1));
    let ia = subsample_indices(na, size, rng);
    let ib = subsample_indices(nb, size, rng);
    Ok((pick_rows(a, dim, &ia), pick_rows(b, dim, &ib)))
}

/// Empirical W2 between two clouds. The larger cloud (and both, above
/// `cap`) is subsampled with a generator seeded by `seed`.
pub fn w2_empirical(a: &[f64], b: &[f64], dim: usize, cap: usize, seed: u64) -> Result<f64> {
    let (a, b) = equalize(a, b, dim, cap, &mut rng_from_seed(seed))?;
    w2_exact(&a, &b, dim)
}

/// Entropic approximation of W2 (square root of the regularized plan cost).
pub fn w2_sinkhorn(a: &[f64], b: &[f64], dim: usize, cap: usize, relative_eps: f64, seed: u64) -> Result<f64> {
    let (a, b) = equalize(a, b, dim, cap, &mut rng_from_seed(seed))?;
    Ok(sinkhorn::sinkhorn_cost(&a, &b, dim, relative_eps, 1000, 1e-9)?.max(0.0).sqrt())
}

/// Biased (V-statistic) RBF-kernel MMD after pooled standardization.
pub fn mmd_rbf(a: &[f64], b: &[f64], dim: usize, lengthscale: f64) -> Result<f64> {
    if !(lengthscale > 0.0) {
        return Err(Error::arg("MMD lengthscale must be positive"));
    }
    let na = check_cloud(a, dim, "first cloud")?;
    let nb = check_cloud(b, dim, "second cloud")?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let scaling = Standardization::fit(&pooled, dim);
    let (sa, sb) = (scaling.apply(a), scaling.apply(b));
    let gamma = 1.0 / (2.0 * lengthscale * lengthscale);
    let mean_kernel = |p: &[f64], q: &[f64]| {
        let mut s = 0.0;
        for u in p.chunks_exact(dim) {
            for v in q.chunks_exact(dim) {
                s += (-gamma * squared_distance(u, v)).exp();
            }
        }
        s / ((p.len() / dim) * (q.len() / dim)) as f64
    };
    let kaa = mean_kernel(&sa, &sa);
    let kbb = mean_kernel(&sb, &sb);
    let kab = mean_kernel(&sa, &sb);
    debug_assert!(na > 0 && nb > 0);
    Ok((kaa + kbb - 2.0 * kab).max(0.0).sqrt())
}

/// Seed for the random quantities of the pair `(u, v)`, independent of the
/// order in which the pair is given.
pub fn pair_seed(seed: u64, u: u64, v: u64) -> u64 {
    derive_seed_path(seed, &[u.min(v), u.max(v)])
}

/// Average distance between the particles transported by the two records'
/// maps, evaluated on both records' samples with one shared permutation of
/// the observation rows.
pub fn t_dist(u: &PretrainedRecord, v: &PretrainedRecord, seed: u64) -> Result<f64> {
    check_dim("record state dim", u.map.x_dim(), v.map.x_dim())?;
    check_dim("record observation dim", u.map.y_dim(), v.map.y_dim())?;
    let n = u.samples.len().min(v.samples.len());
    if n == 0 {
        return Err(Error::arg("records hold no samples"));
    }
    let sigma = permutation(n, &mut rng_from_seed(pair_seed(seed, u.id, v.id)));
    let dim = u.map.x_dim();
    let mut total = 0.0;
    for rec in [u, v] {
        let xs = pick_rows(rec.samples.x.as_slice(), dim, &(0..n).collect::<Vec<_>>());
        let ys = pick_rows(rec.samples.y.as_slice(), rec.samples.y_dim(), &sigma);
        let tu = u.map.transport_batch(&xs, &ys)?;
        let tv = v.map.transport_batch(&xs, &ys)?;
        total += tu.chunks_exact(dim).zip(tv.chunks_exact(dim)).map(|(p, q)| squared_distance(p, q).sqrt()).sum::<f64>();
    }
    Ok(total / (2 * n) as f64)
}

/// The cloud a sample-based metric compares for a record.
pub fn record_cloud(record: &PretrainedRecord, use_joint: bool) -> (Vec<f64>, usize) {
    if use_joint {
        let s = &record.samples;
        let mut out = Vec::with_capacity(s.len() * (s.x_dim() + s.y_dim()));
        for (x, y) in s.x.rows().zip(s.y.rows()) {
            out.extend_from_slice(x);
            out.extend_from_slice(y);
        }
        (out, s.x_dim() + s.y_dim())
    } else {
        (record.samples.x.as_slice().to_vec(), record.samples.x_dim())
    }
}

/// Distance between a sample-only cloud and another cloud under a
/// sample-based metric. Clouds above the cap are subsampled first.
pub fn cloud_distance(a: &[f64], b: &[f64], dim: usize, kind: MetricKind, opts: &DistanceOptions, seed: u64) -> Result<f64> {
    match kind {
        MetricKind::W2 => match opts.sinkhorn_eps {
            Some(eps) => w2_sinkhorn(a, b, dim, opts.cloud_cap, eps, seed),
            None => w2_empirical(a, b, dim, opts.cloud_cap, seed),
        },
        MetricKind::Mmd => {
            let mut rng = rng_from_seed(seed);
            let na = check_cloud(a, dim, "first cloud")?;
            let nb = check_cloud(b, dim, "second cloud")?;
            let a = pick_rows(a, dim, &subsample_indices(na, opts.cloud_cap, &mut rng));
            let b = pick_rows(b, dim, &subsample_indices(nb, opts.cloud_cap, &mut rng));
            mmd_rbf(&a, &b, dim, opts.mmd_lengthscale)
        }
        MetricKind::TDist => Err(Error::arg("the transported-particle distance needs two maps, not clouds")),
    }
}

/// Distance between two records.
pub fn record_distance(u: &PretrainedRecord, v: &PretrainedRecord, kind: MetricKind, opts: &DistanceOptions, seed: u64) -> Result<f64> {
    if kind == MetricKind::TDist {
        return t_dist(u, v, seed);
    }
    let (a, da) = record_cloud(u, opts.use_joint);
    let (b, db) = record_cloud(v, opts.use_joint);
    check_dim("record cloud dim", da, db)?;
    cloud_distance(&a, &b, da, kind, opts, pair_seed(seed, u.id, v.id))
}

/// Symmetric matrix of pairwise record distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    metric: MetricKind,
    size: usize,
    entries: Vec<f64>,
    seed: u64,
}

impl DistanceMatrix {
    /// Validate and wrap a row-major `size x size` matrix.
    pub fn from_entries(metric: MetricKind, size: usize, entries: Vec<f64>, seed: u64) -> Result<Self> {
        check_dim("distance matrix entries", size * size, entries.len())?;
        for i in 0..size {
            if entries[i * size + i] != 0.0 {
                return Err(Error::arg(format!("distance matrix diagonal entry {i} is not zero")));
            }
            for j in 0..size {
                let (a, b) = (entries[i * size + j], entries[j * size + i]);
                if !(a >= 0.0) || !a.is_finite() {
                    return Err(Error::arg(format!("distance matrix entry ({i}, {j}) = {a} is not a finite nonnegative value")));
                }
                if (a - b).abs() > 1e-9 {
                    return Err(Error::arg(format!("distance matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix { metric, size, entries, seed })
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// First line `metric_kind=<kind>,M=<size>,seed=<seed>`, then one CSV
    /// row per record.
    pub fn to_csv(&self) -> String {
        let mut out = format!("metric_kind={},M={},seed={}\n", self.metric, self.size, self.seed);
        for row in self.entries.chunks_exact(self.size.max(1)) {
            out.push_str(&join_floats(row));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let bad = |msg: String| Error::format(format!("{origin}: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let (mut metric, mut size, mut seed) = (None, None, None);
        for field in header.split(',') {
            let (key, value) = field.split_once('=').ok_or_else(|| bad(format!("bad header field '{field}'")))?;
            match key.trim() {
                "metric_kind" => metric = Some(value.trim().parse::<MetricKind>()?),
                "M" => size = Some(value.trim().parse::<usize>().map_err(|e| bad(e.to_string()))?),
                "seed" => seed = Some(value.trim().parse::<u64>().map_err(|e| bad(e.to_string()))?),
                other => return Err(bad(format!("unknown header key '{other}'"))),
            }
        }
        let (Some(metric), Some(size), Some(seed)) = (metric, size, seed) else {
            return Err(bad("header needs metric_kind, M and seed".into()));
        };
        let mut entries = Vec::with_capacity(size * size);
        for line in lines {
            for cell in line.split(',') {
                entries.push(cell.trim().parse::<f64>().map_err(|e| bad(format!("'{cell}': {e}")))?);
            }
        }
        DistanceMatrix::from_entries(metric, size, entries, seed).map_err(|e| e.context(origin.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&read_text(path)?, &path.display().to_string())
    }
}

/// All pairwise distances between records; upper triangle computed and
/// mirrored.
pub fn distance_matrix(records: &[PretrainedRecord], kind: MetricKind, opts: &DistanceOptions, seed: u64) -> Result<DistanceMatrix> {
    let m = records.len();
    if m < 2 {
        return Err(Error::arg("a distance matrix needs at least two records"));
    }
    let mut entries = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let d = record_distance(&records[i], &records[j], kind, opts, seed)
                .map_err(|e| e.context(format!("distance between records {} and {}", records[i].id, records[j].id)))?;
            entries[i * m + j] = d;
            entries[j * m + i] = d;
        }
    }
    DistanceMatrix::from_entries(kind, m, entries, seed)
}
