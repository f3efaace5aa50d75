//! The optimal transport filter.
//!
//! A potential `f(x, y)` and a map `T(x, y)` are trained on samples of the
//! joint law of `(X, Y)` by the stochastic max-min problem
//!
//! ```text
//! max_f min_T  E_{P_XY}[f(X, Y)] + E_{P_X ⊗ P_Y}[ ½‖X − T(X, Y)‖² − f(T(X, Y), Y) ]
//! ```
//!
//! whose optimal `T(·, y)` pushes the prior onto the posterior given `y`.
//! Both networks see standardized inputs; `T` is residual in `x`, so an
//! untrained map is the identity.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::FilterResult;
use crate::diffnet::{Activation, Mlp, OptimizerState};
use crate::ensemble::{JointSample, StateEnsemble, Standardization};
use crate::error::{check_dim, Error, Result};
use crate::io::{put_f64s, read_text, write_text, Reader};
use crate::rng::{derive_seed, permutation, rng_from_seed, subsample_indices, FilterRng};
use crate::ssm::{propagate, sample_observations, sample_prior, ModelSpec};
use crate::timing::Stopwatch;

/// Hidden layer widths and activations of `f` and `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub f_hidden: Vec<usize>,
    pub t_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            f_hidden: vec![64, 64],
            t_hidden: vec![64, 64],
        }
    }
}

pub const F_ACTIVATION: Activation = Activation::Tanh;
pub const T_ACTIVATION: Activation = Activation::SmoothRelu;

/// Bookkeeping attached to a trained map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub x_dim: usize,
    pub y_dim: usize,
    pub iterations: usize,
    pub final_objective: f64,
    pub seed: u64,
}

/// A trained (or freshly initialized) potential/map pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportMapModel {
    pub f_net: Mlp,
    pub t_net: Mlp,
    pub x_scaling: Standardization,
    pub y_scaling: Standardization,
    pub meta: TrainingMeta,
}

impl TransportMapModel {
    /// Untrained model; `f` starts flat and `T` as the identity map.
    pub fn new(x_dim: usize, y_dim: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        if x_dim == 0 || y_dim == 0 {
            return Err(Error::arg("map dimensions must be positive"));
        }
        let mut f_sizes = vec![x_dim + y_dim];
        f_sizes.extend(&arch.f_hidden);
        f_sizes.push(1);
        let mut t_sizes = vec![x_dim + y_dim];
        t_sizes.extend(&arch.t_hidden);
        t_sizes.push(x_dim);
        let f_net = Mlp::new(&f_sizes, F_ACTIVATION, false, derive_seed(seed, 1))?.zero_output_layer();
        let t_net = Mlp::new(&t_sizes, T_ACTIVATION, true, derive_seed(seed, 2))?.zero_output_layer();
        Ok(TransportMapModel {
            f_net,
            t_net,
            x_scaling: Standardization::identity(x_dim),
            y_scaling: Standardization::identity(y_dim),
            meta: TrainingMeta {
                x_dim,
                y_dim,
                iterations: 0,
                final_objective: 0.0,
                seed,
            },
        })
    }

    pub fn x_dim(&self) -> usize {
        self.meta.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.meta.y_dim
    }

    /// Fit the input standardization to a joint sample.
    pub fn fit_scaling(&mut self, data: &JointSample) {
        self.x_scaling = Standardization::fit(data.x.as_slice(), data.x_dim());
        self.y_scaling = Standardization::fit(data.y.as_slice(), data.y_dim());
    }

    fn network_input(&self, xs: &[f64], ys: &[f64], rows: usize) -> Vec<f64> {
        let (n, ny) = (self.x_dim(), self.y_dim());
        let mut input = Vec::with_capacity(rows * (n + ny));
        for (x, y) in xs.chunks_exact(n).zip(ys.chunks_exact(ny)) {
            for ((v, m), s) in x.iter().zip(&self.x_scaling.mean).zip(&self.x_scaling.std) {
                input.push((v - m) / s);
            }
            for ((v, m), s) in y.iter().zip(&self.y_scaling.mean).zip(&self.y_scaling.std) {
                input.push((v - m) / s);
            }
        }
        input
    }

    /// `T(x_i, y_i)` for row-aligned batches.
    pub fn transport_batch(&self, xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
        let (n, ny) = (self.x_dim(), self.y_dim());
        if !xs.len().is_multiple_of(n) {
            return Err(Error::arg("state batch is not a whole number of rows"));
        }
        let rows = xs.len() / n;
        check_dim("map observation batch", rows * ny, ys.len())?;
        let input = self.network_input(xs, ys, rows);
        let (z, _) = self.t_net.forward_batch(&input, rows)?;
        Ok(self.unscale_x(&z))
    }

    /// `T(x_i, y)` for every row `x_i` and a single observation `y`.
    pub fn transport_all(&self, xs: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dim("map observation", self.y_dim(), y.len())?;
        let rows = xs.len() / self.x_dim();
        let ys: Vec<f64> = y.iter().copied().cycle().take(rows * y.len()).collect();
        self.transport_batch(xs, &ys)
    }

    pub fn transport(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_dim("map state", self.x_dim(), x.len())?;
        self.transport_all(x, y)
    }

    /// Potential values `f(x_i, y_i)`.
    pub fn potential_batch(&self, xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
        let rows = xs.len() / self.x_dim();
        check_dim("potential observation batch", rows * self.y_dim(), ys.len())?;
        let input = self.network_input(xs, ys, rows);
        Ok(self.f_net.forward_batch(&input, rows)?.0)
    }

    fn unscale_x(&self, z: &[f64]) -> Vec<f64> {
        self.x_scaling.invert(z)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&MAP_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.x_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.y_dim() as u32).to_le_bytes());
        put_f64s(&mut out, &self.x_scaling.mean);
        put_f64s(&mut out, &self.x_scaling.std);
        put_f64s(&mut out, &self.y_scaling.mean);
        put_f64s(&mut out, &self.y_scaling.std);
        out.extend(self.t_net.to_bytes());
        out.extend(self.f_net.to_bytes());
        out
    }

    /// Decode the binary map container; metadata comes from the sidecar.
    pub fn from_bytes(bytes: &[u8], meta: TrainingMeta) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAP_MAGIC {
            return Err(Error::format("not a transport map container"));
        }
        let version = r.u32()?;
        if version != MAP_FORMAT_VERSION {
            return Err(Error::format(format!("unsupported map container version {version}")));
        }
        let n = r.u32()? as usize;
        let ny = r.u32()? as usize;
        if n != meta.x_dim || ny != meta.y_dim {
            return Err(Error::format("map container dims disagree with its metadata"));
        }
        let x_scaling = Standardization {
            mean: r.f64s(n)?,
            std: r.f64s(n)?,
        };
        let y_scaling = Standardization {
            mean: r.f64s(ny)?,
            std: r.f64s(ny)?,
        };
        let t_net = Mlp::read_from(&mut r)?;
        let f_net = Mlp::read_from(&mut r)?;
        if !r.is_done() {
            return Err(Error::format("trailing bytes after map container"));
        }
        if t_net.input_dim() != n + ny || t_net.output_dim() != n || f_net.input_dim() != n + ny || f_net.output_dim() != 1 {
            return Err(Error::format("network shapes disagree with map dims"));
        }
        Ok(TransportMapModel {
            f_net,
            t_net,
            x_scaling,
            y_scaling,
            meta,
        })
    }

    /// Write `<path>` (binary) and `<path>.toml` (metadata sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let meta = toml::to_string(&self.meta).map_err(|e| Error::format(e.to_string()))?;
        write_text(&sidecar_path(path), &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: TrainingMeta = toml::from_str(&read_text(&sidecar_path(path))?)
            .map_err(|e| Error::format(format!("{}: {e}", sidecar_path(path).display())))?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, meta)
    }
}

const MAP_MAGIC: &[u8; 8] = b"OTMAP\0\0\0";
const MAP_FORMAT_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    s.into()
}

/// Stochastic max-min training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtfTrainConfig {
    pub outer_iterations: usize,
    pub inner_t_steps: usize,
    pub batch_size: usize,
    pub learning_rate_f: f64,
    pub learning_rate_t: f64,
    /// Both learning rates decay linearly to this fraction by the last
    /// outer iteration.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub architecture: Architecture,
}

impl Default for OtfTrainConfig {
    fn default() -> Self {
        OtfTrainConfig {
            outer_iterations: 2000,
            inner_t_steps: 10,
            batch_size: 128,
            learning_rate_f: 1e-3,
            learning_rate_t: 1e-3,
            final_lr_fraction: 0.1,
            seed: 0,
            architecture: Architecture::default(),
        }
    }
}

impl OtfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_t_steps == 0 || self.batch_size == 0 {
            return Err(Error::arg("inner_t_steps and batch_size must be positive"));
        }
        if !(self.learning_rate_f > 0.0) || !(self.learning_rate_t > 0.0) {
            return Err(Error::arg("learning rates must be positive"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::arg("final_lr_fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Objective value and the requested parameter gradients.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub value: f64,
    pub f_grad: Option<Vec<f64>>,
    pub t_grad: Option<Vec<f64>>,
}

/// Monte-Carlo objective on a batch, with `y` rows re-paired by `perm` for
/// the independence-coupling term.
pub fn objective(model: &TransportMapModel, batch: &JointSample, perm: &[usize]) -> Result<f64> {
    Ok(objective_with_grads(model, batch.x.as_slice(), batch.y.as_slice(), perm, false, false)?.value)
}

/// Objective plus gradients with respect to the `f` and/or `T` parameters.
pub fn objective_with_grads(
    model: &TransportMapModel,
    xs: &[f64],
    ys: &[f64],
    perm: &[usize],
    want_f: bool,
    want_t: bool,
) -> Result<ObjectiveGrads> {
    objective_terms(model, xs, ys, perm, want_f, want_t, true)
}

/// With `joint_term` off (only allowed without `want_f`) the `f(X, Y)` term,
/// which does not depend on `T`, is left out of the value.
fn objective_terms(
    model: &TransportMapModel,
    xs: &[f64],
    ys: &[f64],
    perm: &[usize],
    want_f: bool,
    want_t: bool,
    joint_term: bool,
) -> Result<ObjectiveGrads> {
    debug_assert!(joint_term || !want_f);
    let (n, ny) = (model.x_dim(), model.y_dim());
    let rows = perm.len();
    if rows == 0 {
        return Err(Error::arg("objective needs a nonempty batch"));
    }
    check_dim("objective states", rows * n, xs.len())?;
    check_dim("objective observations", rows * ny, ys.len())?;
    let mut seen = vec![false; rows];
    for &p in perm {
        if p >= rows || std::mem::replace(&mut seen[p], true) {
            return Err(Error::arg("pairing is not a permutation of the batch rows"));
        }
    }
    let inv = 1.0 / rows as f64;
    let xs_std = &model.x_scaling.std;

    // Joint term f(X_i, Y_i).
    let joint_input = model.network_input(xs, ys, rows);
    let joint = if joint_term { Some(model.f_net.forward_batch(&joint_input, rows)?) } else { None };

    // Independent term: T(X_i, Y_σi) in standardized coordinates.
    let mut t_input = Vec::with_capacity(rows * (n + ny));
    for (i, &p) in perm.iter().enumerate() {
        t_input.extend_from_slice(&joint_input[i * (n + ny)..i * (n + ny) + n]);
        t_input.extend_from_slice(&joint_input[p * (n + ny) + n..(p + 1) * (n + ny)]);
    }
    let (z, t_tape) = model.t_net.forward_batch(&t_input, rows)?;
    let mut f_input = t_input.clone();
    let mut transport_cost = 0.0;
    for i in 0..rows {
        let zi = &z[i * n..(i + 1) * n];
        let xi = &t_input[i * (n + ny)..i * (n + ny) + n];
        f_input[i * (n + ny)..i * (n + ny) + n].copy_from_slice(zi);
        for ((a, b), s) in xi.iter().zip(zi).zip(xs_std) {
            transport_cost += 0.5 * s * s * (a - b) * (a - b);
        }
    }
    let (f_pushed, pushed_tape) = model.f_net.forward_batch(&f_input, rows)?;

    let joint_sum = joint.as_ref().map_or(0.0, |(f, _)| f.iter().sum::<f64>());
    let value = inv * (joint_sum + transport_cost - f_pushed.iter().sum::<f64>());

    let f_grad = if want_f {
        let (_, joint_tape) = joint.as_ref().expect("joint term evaluated when f gradients are wanted");
        let mut g = model.f_net.backward(joint_tape, &vec![inv; rows], true, false)?.params;
        let g2 = model.f_net.backward(&pushed_tape, &vec![-inv; rows], true, false)?.params;
        g.iter_mut().zip(g2).for_each(|(a, b)| *a += b);
        Some(g)
    } else {
        None
    };

    let t_grad = if want_t {
        // dJ/dz_i = (1/B) [ s² ⊙ (z_i − x_i) − ∇_z f(z_i, y_σi) ]
        let df = model
            .f_net
            .backward(&pushed_tape, &vec![1.0; rows], false, true)?
            .input
            .expect("input gradient requested");
        let mut upstream = Vec::with_capacity(rows * n);
        for i in 0..rows {
            let xi = &t_input[i * (n + ny)..i * (n + ny) + n];
            for j in 0..n {
                let s2 = xs_std[j] * xs_std[j];
                upstream.push(inv * (s2 * (z[i * n + j] - xi[j]) - df[i * (n + ny) + j]));
            }
        }
        Some(model.t_net.backward(&t_tape, &upstream, true, false)?.params)
    } else {
        None
    };

    Ok(ObjectiveGrads { value, f_grad, t_grad })
}

/// Train a fresh map on `data`.
pub fn train_otf(data: &JointSample, cfg: &OtfTrainConfig) -> Result<TransportMapModel> {
    let init = TransportMapModel::new(data.x_dim(), data.y_dim(), &cfg.architecture, cfg.seed)?;
    train_otf_from(init, data, cfg)
}

/// Continue training `model` on `data` (warm start). The input scaling is
/// refitted to `data` first.
pub fn train_otf_from(mut model: TransportMapModel, data: &JointSample, cfg: &OtfTrainConfig) -> Result<TransportMapModel> {
    cfg.validate()?;
    check_dim("training state dim", model.x_dim(), data.x_dim())?;
    check_dim("training observation dim", model.y_dim(), data.y_dim())?;
    let rows = data.len();
    if rows < cfg.batch_size {
        return Err(Error::arg(format!(
            "training data has {rows} rows, fewer than the batch size {}",
            cfg.batch_size
        )));
    }
    model.fit_scaling(data);
    let (n, ny) = (model.x_dim(), model.y_dim());
    let batch = cfg.batch_size;
    let mut rng = rng_from_seed(cfg.seed);
    let mut opt_f = OptimizerState::new(model.f_net.params().len(), cfg.learning_rate_f);
    let mut opt_t = OptimizerState::new(model.t_net.params().len(), cfg.learning_rate_t);
    let mut xb = vec![0.0; batch * n];
    let mut yb = vec![0.0; batch * ny];
    let mut last = 0.0;
    for iteration in 0..cfg.outer_iterations {
        let progress = iteration as f64 / cfg.outer_iterations.max(2).saturating_sub(1) as f64;
        let scale = 1.0 - (1.0 - cfg.final_lr_fraction) * progress;
        opt_f.learning_rate = cfg.learning_rate_f * scale;
        opt_t.learning_rate = cfg.learning_rate_t * scale;
        let idx = subsample_indices(rows, batch, &mut rng);
        for (k, &i) in idx.iter().enumerate() {
            xb[k * n..(k + 1) * n].copy_from_slice(data.x.row(i));
            yb[k * ny..(k + 1) * ny].copy_from_slice(data.y.row(i));
        }
        let perm = permutation(batch, &mut rng);
        for _ in 0..cfg.inner_t_steps {
            let g = objective_terms(&model, &xb, &yb, &perm, false, true, false)?;
            if !g.value.is_finite() {
                return Err(Error::Divergence { iteration, value: g.value });
            }
            opt_t.step(model.t_net.params_mut(), &g.t_grad.unwrap())?;
        }
        let g = objective_with_grads(&model, &xb, &yb, &perm, true, false)?;
        if !g.value.is_finite() {
            return Err(Error::Divergence { iteration, value: g.value });
        }
        let ascent: Vec<f64> = g.f_grad.unwrap().into_iter().map(|v| -v).collect();
        opt_f.step(model.f_net.params_mut(), &ascent)?;
        last = g.value;
    }
    if model.t_net.params().iter().chain(model.f_net.params()).any(|p| !p.is_finite()) {
        return Err(Error::Divergence {
            iteration: cfg.outer_iterations,
            value: f64::NAN,
        });
    }
    model.meta.iterations += cfg.outer_iterations;
    model.meta.final_objective = last;
    model.meta.seed = cfg.seed;
    Ok(model)
}

/// Push every prior particle through `T(·, y)`.
pub fn conditioning_step(model: &TransportMapModel, prior: &StateEnsemble, y: &[f64]) -> Result<StateEnsemble> {
    check_dim("conditioning state dim", model.x_dim(), prior.dim())?;
    let out = model.transport_all(prior.as_slice(), y)?;
    StateEnsemble::new(prior.dim(), out)
}

/// Settings for running OTF as a filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtfFilterConfig {
    pub train: OtfTrainConfig,
    /// Initialize each step's training from the previous step's map.
    pub warm_start: bool,
    /// Outer iterations after the first step are divided by this factor
    /// when warm-starting.
    pub warm_iteration_divisor: usize,
}

impl Default for OtfFilterConfig {
    fn default() -> Self {
        OtfFilterConfig {
            train: OtfTrainConfig::default(),
            warm_start: true,
            warm_iteration_divisor: 10,
        }
    }
}

/// Output of one OTF filter step.
#[derive(Debug, Clone)]
pub struct OtfStep {
    pub joint: JointSample,
    pub model: TransportMapModel,
    pub posterior: StateEnsemble,
    pub elapsed_ms: f64,
    pub train_ms: f64,
}

/// Stateful OTF filter: propagate, synthesize observations, train, transport.
#[derive(Debug, Clone)]
pub struct OtfFilter {
    spec: ModelSpec,
    cfg: OtfFilterConfig,
    previous: Option<TransportMapModel>,
    rng: FilterRng,
    seed: u64,
    step_index: usize,
}

impl OtfFilter {
    pub fn new(spec: ModelSpec, cfg: OtfFilterConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        cfg.train.validate()?;
        if cfg.warm_iteration_divisor == 0 {
            return Err(Error::arg("warm_iteration_divisor must be positive"));
        }
        Ok(OtfFilter {
            spec,
            cfg,
            previous: None,
            rng: rng_from_seed(derive_seed(seed, 0x0_7F)),
            seed,
            step_index: 0,
        })
    }

    pub fn step(&mut self, posterior: &StateEnsemble, y: &[f64]) -> Result<OtfStep> {
        let clock = Stopwatch::start();
        let prior = propagate(&self.spec, posterior, &mut self.rng)?;
        let ys = sample_observations(&self.spec, &prior, &mut self.rng)?;
        let joint = JointSample::new(prior, ys)?;
        let mut train = self.cfg.train.clone();
        train.seed = derive_seed(self.seed, 1000 + self.step_index as u64);
        let train_clock = Stopwatch::start();
        let model = match (&self.previous, self.cfg.warm_start) {
            (Some(prev), true) => {
                train.outer_iterations = (train.outer_iterations / self.cfg.warm_iteration_divisor).max(1);
                train_otf_from(prev.clone(), &joint, &train)
            }
            _ => train_otf(&joint, &train),
        }
        .map_err(|e| e.context(format!("OTF training at step {}", self.step_index + 1)))?;
        let train_ms = train_clock.elapsed_ms();
        let post = conditioning_step(&model, &joint.x, y)?;
        self.previous = Some(model.clone());
        self.step_index += 1;
        Ok(OtfStep {
            joint,
            model,
            posterior: post,
            elapsed_ms: clock.elapsed_ms(),
            train_ms,
        })
    }
}

/// Run OTF over a whole observation sequence from an `N`-particle prior.
pub fn otf_filter(spec: &ModelSpec, observations: &[Vec<f64>], particles: usize, cfg: &OtfFilterConfig, seed: u64) -> Result<FilterResult> {
    if observations.is_empty() {
        return Err(Error::arg("no observations to filter"));
    }
    let mut filter = OtfFilter::new(spec.clone(), cfg.clone(), seed)?;
    let mut current = sample_prior(spec, particles, derive_seed(seed, 0x0_1))?;
    let mut result = FilterResult::new("otf", toml::to_string(cfg).unwrap_or_default());
    for y in observations {
        let step = filter.step(&current, y)?;
        result.push(step.posterior.clone(), step.elapsed_ms);
        current = step.posterior;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{empirical_mean, empirical_variance};
    use crate::rng::standard_normal;

    fn tiny_arch() -> Architecture {
        Architecture {
            f_hidden: vec![8],
            t_hidden: vec![8],
        }
    }

    fn ens(dim: usize, v: Vec<f64>) -> StateEnsemble {
        StateEnsemble::new(dim, v).unwrap()
    }

    /// Objective with f replaced by zero and T by a fixed shift, written out
    /// directly.
    #[test]
    fn objective_vanishes_for_zero_potential_and_identity() {
        let mut model = TransportMapModel::new(2, 1, &tiny_arch(), 3).unwrap();
        model.f_net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let mut rng = rng_from_seed(1);
        let x: Vec<f64> = (0..20).map(|_| standard_normal(&mut rng)).collect();
        let y: Vec<f64> = (0..10).map(|_| standard_normal(&mut rng)).collect();
        let batch = JointSample::new(ens(2, x), ens(1, y)).unwrap();
        let perm = permutation(10, &mut rng);
        assert_eq!(objective(&model, &batch, &perm).unwrap(), 0.0);
    }

    #[test]
    fn constant_potential_cancels() {
        let mut model = TransportMapModel::new(1, 1, &tiny_arch(), 3).unwrap();
        let len = model.f_net.params().len();
        let mut p = vec![0.0; len];
        p[len - 1] = 2.5;
        model.f_net.set_params(p).unwrap();
        let batch = JointSample::new(ens(1, vec![0.0, 1.0, 5.0]), ens(1, vec![1.0, 2.0, 3.0])).unwrap();
        let v = objective(&model, &batch, &[2, 0, 1]).unwrap();
        assert!(v.abs() < 1e-14, "{v}");
    }

    #[test]
    fn unit_shift_map_costs_one_half() {
        // T(x, y) = x + 1 through the residual output bias.
        let mut model = TransportMapModel::new(1, 1, &tiny_arch(), 3).unwrap();
        model.f_net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let len = model.t_net.params().len();
        model.t_net.params_mut()[len - 1] = 1.0;
        let batch = JointSample::new(ens(1, vec![0.0, 1.0]), ens(1, vec![0.0, 1.0])).unwrap();
        assert_close!(objective(&model, &batch, &[0, 1]).unwrap(), 0.5, 1e-15);
    }

    #[test]
    fn non_permutation_rejected() {
        let model = TransportMapModel::new(1, 1, &tiny_arch(), 3).unwrap();
        let batch = JointSample::new(ens(1, vec![0.0, 1.0]), ens(1, vec![0.0, 1.0])).unwrap();
        assert!(objective(&model, &batch, &[0, 0]).is_err());
        assert!(objective(&model, &batch, &[0]).is_err());
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(77);
        let arch = Architecture {
            f_hidden: vec![6, 5],
            t_hidden: vec![7],
        };
        let mut model = TransportMapModel::new(2, 2, &arch, 5).unwrap();
        // Randomize the zero-initialized output layer and use a non-trivial scaling.
        for p in model.t_net.params_mut() {
            *p += 0.3 * standard_normal(&mut rng);
        }
        model.x_scaling = Standardization { mean: vec![0.5, -1.0], std: vec![2.0, 0.7] };
        model.y_scaling = Standardization { mean: vec![0.1, 0.2], std: vec![1.5, 3.0] };
        let rows = 6;
        let xs: Vec<f64> = (0..rows * 2).map(|_| standard_normal(&mut rng)).collect();
        let ys: Vec<f64> = (0..rows * 2).map(|_| standard_normal(&mut rng)).collect();
        let perm = permutation(rows, &mut rng);
        let g = objective_with_grads(&model, &xs, &ys, &perm, true, true).unwrap();
        let eval = |m: &TransportMapModel| objective_with_grads(m, &xs, &ys, &perm, false, false).unwrap().value;
        let h = 1e-5;
        let fg = g.f_grad.unwrap();
        for k in 0..fg.len() {
            let mut p = model.clone();
            p.f_net.params_mut()[k] += h;
            let mut m = model.clone();
            m.f_net.params_mut()[k] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            assert!((fd - fg[k]).abs() <= 1e-4 * fd.abs().max(fg[k].abs()).max(1e-4), "f param {k}: {fd} vs {}", fg[k]);
        }
        let tg = g.t_grad.unwrap();
        for k in 0..tg.len() {
            let mut p = model.clone();
            p.t_net.params_mut()[k] += h;
            let mut m = model.clone();
            m.t_net.params_mut()[k] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            assert!((fd - tg[k]).abs() <= 1e-4 * fd.abs().max(tg[k].abs()).max(1e-4), "T param {k}: {fd} vs {}", tg[k]);
        }
    }

    #[test]
    fn zero_iterations_return_the_identity_initialization() {
        let mut rng = rng_from_seed(2);
        let x: Vec<f64> = (0..64).map(|_| standard_normal(&mut rng)).collect();
        let y: Vec<f64> = (0..64).map(|_| standard_normal(&mut rng)).collect();
        let data = JointSample::new(ens(1, x.clone()), ens(1, y)).unwrap();
        let cfg = OtfTrainConfig {
            outer_iterations: 0,
            batch_size: 32,
            architecture: tiny_arch(),
            ..Default::default()
        };
        let model = train_otf(&data, &cfg).unwrap();
        let pushed = conditioning_step(&model, &data.x, &[0.3]).unwrap();
        for (a, b) in pushed.as_slice().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_larger_than_data_rejected() {
        let data = JointSample::new(ens(1, vec![0.0; 4]), ens(1, vec![0.0; 4])).unwrap();
        let cfg = OtfTrainConfig {
            batch_size: 8,
            ..Default::default()
        };
        assert!(train_otf(&data, &cfg).is_err());
    }

    #[test]
    fn lr_fraction_outside_unit_interval_rejected() {
        for bad in [0.0, -0.5, 1.5, f64::NAN] {
            let cfg = OtfTrainConfig {
                final_lr_fraction: bad,
                ..Default::default()
            };
            assert!(cfg.validate().is_err(), "{bad}");
        }
        assert!(OtfTrainConfig::default().validate().is_ok());
    }

    #[test]
    fn divergence_reports_iteration() {
        let mut rng = rng_from_seed(2);
        let x: Vec<f64> = (0..64).map(|_| standard_normal(&mut rng)).collect();
        let mut y: Vec<f64> = (0..64).map(|_| standard_normal(&mut rng)).collect();
        y[3] = f64::INFINITY;
        let data = JointSample::new(ens(1, x), ens(1, y)).unwrap();
        let cfg = OtfTrainConfig {
            outer_iterations: 5,
            batch_size: 64,
            architecture: tiny_arch(),
            ..Default::default()
        };
        assert!(matches!(train_otf(&data, &cfg), Err(Error::Divergence { iteration: 0, .. })));
    }

    #[test]
    fn linear_gaussian_posterior_is_recovered() {
        // X ~ N(0,1), Y = X + N(0,1): X | y ~ N(y/2, 1/2).
        let mut rng = rng_from_seed(8);
        let rows = 2000;
        let x: Vec<f64> = (0..rows).map(|_| standard_normal(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + standard_normal(&mut rng)).collect();
        let data = JointSample::new(ens(1, x), ens(1, y)).unwrap();
        let cfg = OtfTrainConfig {
            outer_iterations: 1500,
            inner_t_steps: 5,
            batch_size: 128,
            learning_rate_f: 3e-3,
            learning_rate_t: 3e-3,
            final_lr_fraction: 0.1,
            architecture: Architecture {
                f_hidden: vec![32, 32],
                t_hidden: vec![32, 32],
            },
            seed: 1,
        };
        let model = train_otf(&data, &cfg).unwrap();
        for obs in [-1.0, 0.0, 1.5] {
            let post = conditioning_step(&model, &data.x, &[obs]).unwrap();
            let m = empirical_mean(&post)[0];
            let v = empirical_variance(&post)[0];
            assert!((m - obs / 2.0).abs() <= 0.1, "y={obs}: mean {m}");
            assert!((v - 0.5).abs() <= 0.1, "y={obs}: variance {v}");
        }
    }

    #[test]
    fn conditioning_is_permutation_equivariant() {
        let mut model = TransportMapModel::new(2, 1, &tiny_arch(), 9).unwrap();
        let mut rng = rng_from_seed(3);
        for p in model.t_net.params_mut() {
            *p += 0.2 * standard_normal(&mut rng);
        }
        let prior = ens(2, (0..40).map(|_| standard_normal(&mut rng)).collect());
        let perm = permutation(20, &mut rng);
        let a = conditioning_step(&model, &prior.select(&perm), &[0.4]).unwrap();
        let b = conditioning_step(&model, &prior, &[0.4]).unwrap().select(&perm);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn map_file_round_trip() {
        let mut model = TransportMapModel::new(2, 3, &tiny_arch(), 4).unwrap();
        model.x_scaling.mean = vec![1.0, 2.0];
        model.meta.final_objective = -0.125;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.map");
        model.save(&path).unwrap();
        assert_eq!(TransportMapModel::load(&path).unwrap(), model);
    }
}
