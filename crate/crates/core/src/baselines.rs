//! Reference filters: perturbed-observation EnKF and bootstrap SIR, plus the
//! large-ensemble SIR used as ground truth.

use rand::Rng;

use crate::ensemble::{empirical_mean, systematic_indices, StateEnsemble};
use crate::error::{check_dim, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normal};
use crate::ssm::{log_likelihood, propagate, sample_prior, ModelKind, ModelSpec};
use crate::timing::Stopwatch;

/// Posterior ensembles and per-step timings of one filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub method: String,
    pub posteriors: Vec<StateEnsemble>,
    pub per_step_ms: Vec<f64>,
    /// Serialized settings the run used.
    pub config: String,
}

impl FilterResult {
    pub fn new(method: impl Into<String>, config: String) -> Self {
        FilterResult {
            method: method.into(),
            posteriors: Vec::new(),
            per_step_ms: Vec::new(),
            config,
        }
    }

    pub fn push(&mut self, posterior: StateEnsemble, ms: f64) {
        self.posteriors.push(posterior);
        self.per_step_ms.push(ms);
    }

    pub fn steps(&self) -> usize {
        self.posteriors.len()
    }

    pub fn total_ms(&self) -> f64 {
        self.per_step_ms.iter().sum()
    }

    /// Per-step posterior means.
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.posteriors.iter().map(empirical_mean).collect()
    }
}

/// Solve `A X = B` for symmetric positive definite `A` (`d x d`) and `B`
/// (`d x k`, row-major) by Cholesky factorization.
fn cholesky_solve(a: &[f64], d: usize, b: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= l[i * d + p] * l[j * d + p];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Numerical("innovation covariance is not positive definite".into()));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut x = b.to_vec();
    for c in 0..k {
        for i in 0..d {
            let mut s = x[i * k + c];
            for p in 0..i {
                s -= l[i * d + p] * x[p * k + c];
            }
            x[i * k + c] = s / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = x[i * k + c];
            for p in i + 1..d {
                s -= l[p * d + i] * x[p * k + c];
            }
            x[i * k + c] = s / l[i * d + i];
        }
    }
    Ok(x)
}

/// Stochastic EnKF analysis with empirical covariances of perturbed
/// predicted observations.
pub fn enkf_step<R: Rng + ?Sized>(prior: &StateEnsemble, y: &[f64], spec: &ModelSpec, rng: &mut R) -> Result<StateEnsemble> {
    let (n, ny) = (spec.state_dim, spec.obs_dim);
    check_dim("EnKF state dim", n, prior.dim())?;
    check_dim("EnKF observation dim", ny, y.len())?;
    let count = prior.len();
    if count < 2 {
        return Err(Error::arg("EnKF needs at least two particles"));
    }
    let noise = spec.obs_noise_std();
    let mut yhat = vec![0.0; count * ny];
    for (row, out) in prior.rows().zip(yhat.chunks_exact_mut(ny)) {
        spec.observe_mean(row, out);
        for v in out.iter_mut() {
            *v += noise * standard_normal(rng);
        }
    }
    let xm = empirical_mean(prior);
    let mut ym = vec![0.0; ny];
    for r in yhat.chunks_exact(ny) {
        ym.iter_mut().zip(r).for_each(|(m, v)| *m += v / count as f64);
    }
    let mut cxy = vec![0.0; n * ny];
    let mut cyy = vec![0.0; ny * ny];
    for (x, yr) in prior.rows().zip(yhat.chunks_exact(ny)) {
        for a in 0..ny {
            let dy = yr[a] - ym[a];
            for i in 0..n {
                cxy[i * ny + a] += (x[i] - xm[i]) * dy;
            }
            for b in 0..ny {
                cyy[a * ny + b] += dy * (yr[b] - ym[b]);
            }
        }
    }
    let denom = (count - 1) as f64;
    cxy.iter_mut().for_each(|v| *v /= denom);
    cyy.iter_mut().for_each(|v| *v /= denom);
    let trace: f64 = (0..ny).map(|a| cyy[a * ny + a]).sum();
    let ridge = 1e-9 * trace.max(f64::MIN_POSITIVE);
    for a in 0..ny {
        cyy[a * ny + a] += ridge;
    }
    // G^T (ny x n) = C_yy^{-1} C_xy^T
    let mut cxy_t = vec![0.0; ny * n];
    for i in 0..n {
        for a in 0..ny {
            cxy_t[a * n + i] = cxy[i * ny + a];
        }
    }
    let gain_t = cholesky_solve(&cyy, ny, &cxy_t, n)?;
    let mut out = prior.as_slice().to_vec();
    for (x, yr) in out.chunks_exact_mut(n).zip(yhat.chunks_exact(ny)) {
        for a in 0..ny {
            let innovation = y[a] - yr[a];
            for i in 0..n {
                x[i] += gain_t[a * n + i] * innovation;
            }
        }
    }
    StateEnsemble::new(n, out)
}

/// Normalized importance weights from log-likelihoods (log-sum-exp).
pub fn normalized_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate("every particle has zero likelihood".into()));
    }
    let unnorm: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

/// Importance weighting by the likelihood followed by systematic resampling.
pub fn sir_step<R: Rng + ?Sized>(prior: &StateEnsemble, y: &[f64], spec: &ModelSpec, rng: &mut R) -> Result<StateEnsemble> {
    check_dim("SIR state dim", spec.state_dim, prior.dim())?;
    let log_w = prior
        .rows()
        .map(|x| log_likelihood(spec, x, y))
        .collect::<Result<Vec<f64>>>()?;
    let weights = normalized_weights(&log_w)?;
    let idx = systematic_indices(&weights, rng)?;
    Ok(prior.select(&idx))
}

fn run_filter<F>(method: &str, spec: &ModelSpec, observations: &[Vec<f64>], particles: usize, seed: u64, mut analysis: F) -> Result<FilterResult>
where
    F: FnMut(&StateEnsemble, &[f64], &mut crate::rng::FilterRng) -> Result<StateEnsemble>,
{
    if observations.is_empty() {
        return Err(Error::arg("no observations to filter"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0x0_7F));
    let mut current = sample_prior(spec, particles, derive_seed(seed, 0x0_1))?;
    let mut result = FilterResult::new(method, format!("particles = {particles}\nseed = {seed}\n"));
    for (t, y) in observations.iter().enumerate() {
        let clock = Stopwatch::start();
        let prior = propagate(spec, &current, &mut rng)?;
        current = analysis(&prior, y, &mut rng).map_err(|e| e.context(format!("{method} at step {}", t + 1)))?;
        result.push(current.clone(), clock.elapsed_ms());
    }
    Ok(result)
}

pub fn enkf_filter(spec: &ModelSpec, observations: &[Vec<f64>], particles: usize, seed: u64) -> Result<FilterResult> {
    run_filter("enkf", spec, observations, particles, seed, |p, y, rng| enkf_step(p, y, spec, rng))
}

pub fn sir_filter(spec: &ModelSpec, observations: &[Vec<f64>], particles: usize, seed: u64) -> Result<FilterResult> {
    run_filter("sir", spec, observations, particles, seed, |p, y, rng| sir_step(p, y, spec, rng))
}

/// Large-ensemble SIR reference. For the block-rotation model each 2-d block
/// is filtered independently and the block ensembles are concatenated.
pub fn ground_truth(spec: &ModelSpec, observations: &[Vec<f64>], particles: usize, seed: u64) -> Result<FilterResult> {
    let guidance = |e: Error| match e {
        Error::Context { .. } | Error::Degenerate(_) => {
            e.context(format!("ground truth with {particles} particles degenerated; raise the particle count"))
        }
        other => other,
    };
    let blocks = match &spec.model {
        ModelKind::LinQuad(p) if p.half_blocks > 1 => p.half_blocks,
        _ => {
            let mut r = sir_filter(spec, observations, particles, seed).map_err(guidance)?;
            r.method = "truth".into();
            return Ok(r);
        }
    };
    let ModelKind::LinQuad(params) = &spec.model else { unreachable!() };
    let mut runs = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let block_spec = ModelSpec::linquad(1, params.alpha, params.noise_std, 0.0, spec.prior_std)?
            .with_prior(spec.prior_mean[2 * b..2 * b + 2].to_vec(), spec.prior_std)?;
        let block_obs: Vec<Vec<f64>> = observations.iter().map(|y| y[2 * b..2 * b + 2].to_vec()).collect();
        runs.push(sir_filter(&block_spec, &block_obs, particles, derive_seed(seed, b as u64)).map_err(guidance)?);
    }
    let mut result = FilterResult::new("truth", format!("particles = {particles}\nseed = {seed}\nblocks = {blocks}\n"));
    for t in 0..observations.len() {
        let parts: Vec<StateEnsemble> = runs.iter().map(|r| r.posteriors[t].clone()).collect();
        let ms = runs.iter().map(|r| r.per_step_ms[t]).sum();
        result.push(StateEnsemble::hstack(&parts)?, ms);
    }
    Ok(result)
}
