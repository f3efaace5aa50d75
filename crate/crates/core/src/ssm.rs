//! State-space models: hidden-state dynamics, observation models and
//! synthetic trajectory generation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::StateEnsemble;
use crate::error::{check_dim, Error, Result};
use crate::io::{join_floats, read_table, write_text};
use crate::rng::{rng_from_seed, standard_normal};

/// Drift coefficients, time step and noise levels of the stochastic Lorenz 63
/// model observed through its third coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lorenz63Params {
    #[serde(default = "default_sigma_l")]
    pub sigma_l: f64,
    #[serde(default = "default_rho_l")]
    pub rho_l: f64,
    #[serde(default = "default_beta_l")]
    pub beta_l: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Diffusion coefficient; the per-step noise std is `process_std * sqrt(dt)`.
    #[serde(default = "default_l63_process_std")]
    pub process_std: f64,
    #[serde(default = "default_l63_obs_std")]
    pub obs_std: f64,
}

fn default_sigma_l() -> f64 {
    10.0
}
fn default_rho_l() -> f64 {
    28.0
}
fn default_beta_l() -> f64 {
    8.0 / 3.0
}
fn default_dt() -> f64 {
    0.01
}
fn default_l63_process_std() -> f64 {
    10f64.sqrt()
}
fn default_l63_obs_std() -> f64 {
    10f64.sqrt()
}

impl Default for Lorenz63Params {
    fn default() -> Self {
        Lorenz63Params {
            sigma_l: default_sigma_l(),
            rho_l: default_rho_l(),
            beta_l: default_beta_l(),
            dt: default_dt(),
            process_std: default_l63_process_std(),
            obs_std: default_l63_obs_std(),
        }
    }
}

/// Block-rotation dynamics with elementwise-square observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinQuadParams {
    /// Number of 2x2 rotation blocks; the state has dimension `2 * half_blocks`.
    pub half_blocks: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Shared std of the process and observation noise.
    #[serde(default = "default_linquad_noise")]
    pub noise_std: f64,
}

fn default_alpha() -> f64 {
    0.9
}
fn default_linquad_noise() -> f64 {
    0.1
}

/// Scalar-gain linear Gaussian model `x' = a x + q ξ`, `y = x + r ξ`, applied
/// coordinatewise. Used for analytic Kalman checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    #[serde(default = "one")]
    pub a: f64,
    pub process_std: f64,
    pub obs_std: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Lorenz63(Lorenz63Params),
    LinQuad(LinQuadParams),
    Linear(LinearParams),
}

/// A complete model: dimensions, Gaussian prior and dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub prior_mean: Vec<f64>,
    pub prior_std: f64,
    #[serde(flatten)]
    pub model: ModelKind,
}

impl ModelSpec {
    pub fn lorenz63(params: Lorenz63Params, prior_mean: Vec<f64>, prior_std: f64) -> Result<Self> {
        let spec = ModelSpec {
            state_dim: 3,
            obs_dim: 1,
            prior_mean,
            prior_std,
            model: ModelKind::Lorenz63(params),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The stochastic Lorenz 63 setting with `N(0, 10 I)` prior.
    pub fn lorenz63_default() -> Self {
        Self::lorenz63(Lorenz63Params::default(), vec![0.0; 3], 10f64.sqrt()).unwrap()
    }

    pub fn linquad(half_blocks: usize, alpha: f64, noise_std: f64, prior_mean: f64, prior_std: f64) -> Result<Self> {
        let spec = ModelSpec {
            state_dim: 2 * half_blocks,
            obs_dim: 2 * half_blocks,
            prior_mean: vec![prior_mean; 2 * half_blocks],
            prior_std,
            model: ModelKind::LinQuad(LinQuadParams {
                half_blocks,
                alpha,
                noise_std,
            }),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear(dim: usize, params: LinearParams, prior_mean: f64, prior_std: f64) -> Result<Self> {
        let spec = ModelSpec {
            state_dim: dim,
            obs_dim: dim,
            prior_mean: vec![prior_mean; dim],
            prior_std,
            model: ModelKind::Linear(params),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.obs_dim == 0 {
            return Err(Error::arg("state_dim and obs_dim must be positive"));
        }
        check_dim("prior_mean", self.state_dim, self.prior_mean.len())?;
        if !(self.prior_std >= 0.0) || !self.prior_std.is_finite() {
            return Err(Error::arg("prior_std must be finite and nonnegative"));
        }
        match &self.model {
            ModelKind::Lorenz63(p) => {
                check_dim("Lorenz63 state_dim", 3, self.state_dim)?;
                check_dim("Lorenz63 obs_dim", 1, self.obs_dim)?;
                if !(p.dt > 0.0) {
                    return Err(Error::arg("dt must be positive"));
                }
                if !(p.obs_std > 0.0) {
                    return Err(Error::arg("obs_std must be positive"));
                }
                if !(p.process_std >= 0.0) {
                    return Err(Error::arg("process_std must be nonnegative"));
                }
            }
            ModelKind::LinQuad(p) => {
                if p.half_blocks == 0 {
                    return Err(Error::arg("half_blocks must be positive"));
                }
                check_dim("LinQuad state_dim", 2 * p.half_blocks, self.state_dim)?;
                check_dim("LinQuad obs_dim", 2 * p.half_blocks, self.obs_dim)?;
                if !(p.alpha.abs() <= 1.0) {
                    return Err(Error::arg("alpha must lie in [-1, 1]"));
                }
                if !(p.noise_std >= 0.0) {
                    return Err(Error::arg("noise_std must be nonnegative"));
                }
            }
            ModelKind::Linear(p) => {
                check_dim("Linear obs_dim", self.state_dim, self.obs_dim)?;
                if !(p.obs_std > 0.0) || !(p.process_std >= 0.0) {
                    return Err(Error::arg("linear model noise levels invalid"));
                }
            }
        }
        Ok(())
    }

    /// Copy of the spec with a different Gaussian prior.
    pub fn with_prior(&self, prior_mean: Vec<f64>, prior_std: f64) -> Result<Self> {
        let mut spec = self.clone();
        spec.prior_mean = prior_mean;
        spec.prior_std = prior_std;
        spec.validate()?;
        Ok(spec)
    }

    /// Std of the additive Gaussian observation noise.
    pub fn obs_noise_std(&self) -> f64 {
        match &self.model {
            ModelKind::Lorenz63(p) => p.obs_std,
            ModelKind::LinQuad(p) => p.noise_std,
            ModelKind::Linear(p) => p.obs_std,
        }
    }

    /// Noise-free observation `h(x)`.
    pub fn observe_mean(&self, state: &[f64], out: &mut [f64]) {
        match &self.model {
            ModelKind::Lorenz63(_) => out[0] = state[2],
            ModelKind::LinQuad(_) => {
                for (o, x) in out.iter_mut().zip(state) {
                    *o = x * x;
                }
            }
            ModelKind::Linear(_) => out.copy_from_slice(state),
        }
    }

    /// Propagate one state in place by one step of the dynamics.
    pub fn propagate_state<R: Rng + ?Sized>(&self, state: &mut [f64], rng: &mut R) {
        match &self.model {
            ModelKind::Lorenz63(p) => {
                let (x1, x2, x3) = (state[0], state[1], state[2]);
                let drift = [
                    p.sigma_l * (x2 - x1),
                    x1 * (p.rho_l - x3) - x2,
                    x1 * x2 - p.beta_l * x3,
                ];
                let diffusion = p.process_std * p.dt.sqrt();
                for (s, d) in state.iter_mut().zip(drift) {
                    *s += p.dt * d;
                    if diffusion > 0.0 {
                        *s += diffusion * standard_normal(rng);
                    }
                }
            }
            ModelKind::LinQuad(p) => {
                let (a, b) = rotation_coefficients(p.alpha);
                for block in state.chunks_exact_mut(2) {
                    let (u, v) = (block[0], block[1]);
                    block[0] = a * u + b * v;
                    block[1] = -b * u + a * v;
                }
                if p.noise_std > 0.0 {
                    for s in state.iter_mut() {
                        *s += p.noise_std * standard_normal(rng);
                    }
                }
            }
            ModelKind::Linear(p) => {
                for s in state.iter_mut() {
                    *s *= p.a;
                    if p.process_std > 0.0 {
                        *s += p.process_std * standard_normal(rng);
                    }
                }
            }
        }
    }
}

/// Entries `(α, sqrt(1-α²))` of the rotation block `F = [[α, s], [-s, α]]`.
pub fn rotation_coefficients(alpha: f64) -> (f64, f64) {
    (alpha, (1.0 - alpha * alpha).max(0.0).sqrt())
}

/// The 2x2 rotation block as a row-major array.
pub fn rotation_block(alpha: f64) -> [[f64; 2]; 2] {
    let (a, s) = rotation_coefficients(alpha);
    [[a, s], [-s, a]]
}

/// `count` i.i.d. draws from `N(μ0, σ0² I)`.
pub fn sample_prior(spec: &ModelSpec, count: usize, seed: u64) -> Result<StateEnsemble> {
    let mut rng = rng_from_seed(seed);
    sample_prior_with(spec, count, &mut rng)
}

pub fn sample_prior_with<R: Rng + ?Sized>(spec: &ModelSpec, count: usize, rng: &mut R) -> Result<StateEnsemble> {
    if count == 0 {
        return Err(Error::arg("prior sample count must be at least 1"));
    }
    let n = spec.state_dim;
    let mut flat = Vec::with_capacity(count * n);
    for _ in 0..count {
        for m in &spec.prior_mean {
            let noise = if spec.prior_std > 0.0 {
                spec.prior_std * standard_normal(rng)
            } else {
                0.0
            };
            flat.push(m + noise);
        }
    }
    StateEnsemble::new(n, flat)
}

/// Push every particle through one step of the dynamics.
pub fn propagate<R: Rng + ?Sized>(spec: &ModelSpec, ensemble: &StateEnsemble, rng: &mut R) -> Result<StateEnsemble> {
    check_dim("propagate state dimension", spec.state_dim, ensemble.dim())?;
    let mut out = ensemble.clone();
    for row in out.rows_mut() {
        spec.propagate_state(row, rng);
    }
    StateEnsemble::new(out.dim(), out.into_vec())
}

/// Draw `Y ~ h(·|x)`.
pub fn sample_observation<R: Rng + ?Sized>(spec: &ModelSpec, state: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    check_dim("observation state dimension", spec.state_dim, state.len())?;
    let mut y = vec![0.0; spec.obs_dim];
    spec.observe_mean(state, &mut y);
    let s = spec.obs_noise_std();
    if s > 0.0 {
        for v in y.iter_mut() {
            *v += s * standard_normal(rng);
        }
    }
    Ok(y)
}

/// One synthetic observation per particle, row-aligned with the ensemble.
pub fn sample_observations<R: Rng + ?Sized>(spec: &ModelSpec, ensemble: &StateEnsemble, rng: &mut R) -> Result<StateEnsemble> {
    check_dim("observation state dimension", spec.state_dim, ensemble.dim())?;
    let mut flat = Vec::with_capacity(ensemble.len() * spec.obs_dim);
    for row in ensemble.rows() {
        flat.extend(sample_observation(spec, row, rng)?);
    }
    StateEnsemble::new(spec.obs_dim, flat)
}

/// Gaussian log-density of the observation noise at `y - h(x)`.
pub fn log_likelihood(spec: &ModelSpec, state: &[f64], observation: &[f64]) -> Result<f64> {
    check_dim("likelihood state dimension", spec.state_dim, state.len())?;
    check_dim("likelihood observation dimension", spec.obs_dim, observation.len())?;
    let mut h = vec![0.0; spec.obs_dim];
    spec.observe_mean(state, &mut h);
    Ok(gaussian_log_density(&h, observation, spec.obs_noise_std()))
}

pub(crate) fn gaussian_log_density(mean: &[f64], y: &[f64], std: f64) -> f64 {
    let var = std * std;
    let sq: f64 = mean.iter().zip(y).map(|(m, v)| (v - m) * (v - m)).sum();
    -0.5 * mean.len() as f64 * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

/// Hidden states `X_0..X_T` and observations `Y_1..Y_T` of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.observations.len()
    }

    /// CSV with columns `t, x_1..x_n, y_1..y_{n_y}`; the `t = 0` row has no
    /// observation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let n = self.states.first().map(Vec::len).unwrap_or(0);
        let ny = self.observations.first().map(Vec::len).unwrap_or(0);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|j| format!("x_{j}")));
        header.extend((1..=ny).map(|j| format!("y_{j}")));
        let mut out = header.join(",");
        out.push('\n');
        for (t, x) in self.states.iter().enumerate() {
            let mut row = vec![t as f64];
            row.extend_from_slice(x);
            if t == 0 {
                row.extend(std::iter::repeat_n(f64::NAN, ny));
            } else {
                row.extend_from_slice(&self.observations[t - 1]);
            }
            out.push_str(&join_floats(&row));
            out.push('\n');
        }
        write_text(path, &out)
    }

    pub fn read_csv(path: &Path, seed: u64) -> Result<Trajectory> {
        let table = read_table(path)?;
        let n = table.header.iter().filter(|h| h.starts_with("x_")).count();
        let ny = table.header.iter().filter(|h| h.starts_with("y_")).count();
        if table.header.first().map(String::as_str) != Some("t") || n + ny + 1 != table.header.len() {
            return Err(Error::format(format!(
                "{}: expected columns t,x_1..x_n,y_1..y_m",
                path.display()
            )));
        }
        let mut states = Vec::new();
        let mut observations = Vec::new();
        for (i, row) in table.rows().enumerate() {
            states.push(row[1..1 + n].to_vec());
            if i > 0 {
                let y = row[1 + n..].to_vec();
                if y.iter().any(|v| v.is_nan()) {
                    return Err(Error::format(format!("{}: missing observation at row {i}", path.display())));
                }
                observations.push(y);
            }
        }
        Ok(Trajectory {
            states,
            observations,
            seed,
        })
    }
}

/// Simulate `steps` transitions and observations; a pure function of its
/// arguments.
pub fn simulate(spec: &ModelSpec, steps: usize, seed: u64) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::arg("simulate needs at least one step"));
    }
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let x0 = sample_prior_with(spec, 1, &mut rng)?.into_vec();
    simulate_from(spec, x0, steps, &mut rng, seed)
}

/// Simulate from a given initial state.
pub fn simulate_from<R: Rng + ?Sized>(spec: &ModelSpec, x0: Vec<f64>, steps: usize, rng: &mut R, seed: u64) -> Result<Trajectory> {
    check_dim("initial state", spec.state_dim, x0.len())?;
    let mut states = vec![x0];
    let mut observations = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut x = states.last().unwrap().clone();
        spec.propagate_state(&mut x, rng);
        observations.push(sample_observation(spec, &x, rng)?);
        states.push(x);
    }
    Ok(Trajectory {
        states,
        observations,
        seed,
    })
}
