//! The amortized optimal transport filter.
//!
//! Offline, OTF is run on simulations of the model and every step's joint
//! samples and trained map are kept as a record; K-medoids picks `K`
//! representative records. Online, each step weighs the representatives by
//! `w_k ∝ exp(-λ ρ_k)`, where `ρ_k` is the distance between the current
//! prior cloud and the medoid's state samples, and applies the weighted
//! combination `Σ_k w_k T_k(x, y)` of the stored maps. No training happens
//! online.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::FilterResult;
use crate::diffnet::gradient_evaluations;
use crate::ensemble::{JointSample, StateEnsemble};
use crate::error::{check_dim, Error, Result};
use crate::io::{join_floats, read_table, write_text};
use crate::metricspace::{
    cloud_distance, distance_matrix, k_medoids, DistanceMatrix, DistanceOptions, KMedoidsOptions, MedoidLibrary,
    MetricKind, PretrainedRecord, Provenance,
};
use crate::otf::{OtfFilter, OtfFilterConfig};
use crate::rng::{derive_seed, derive_seed_path, rng_from_seed};
use crate::ssm::{propagate, sample_observations, sample_prior, simulate, ModelSpec};
use crate::timing::Stopwatch;

/// Offline library and online weighting settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmortizeConfig {
    /// Number of pre-trained records `M`.
    pub library_size: usize,
    /// Number of medoids `K`.
    pub clusters: usize,
    /// Softmax temperature; `inf` selects the nearest medoid.
    pub lambda: f64,
    pub offline_metric: MetricKind,
    pub online_metric: MetricKind,
    pub distance: DistanceOptions,
    pub kmedoids: KMedoidsOptions,
    pub offline_particles: usize,
    pub online_particles: usize,
    /// Online distances subsample both clouds to at most this many points;
    /// `distance.cloud_cap` governs the offline matrix.
    pub online_cloud_cap: usize,
    /// Filter steps harvested from each library simulation.
    pub steps_per_simulation: usize,
    /// Library simulations draw the prior mean uniformly from this range
    /// (all coordinates equal); unset keeps the model's prior mean.
    pub prior_mean_range: Option<[f64; 2]>,
    /// Same for the prior standard deviation.
    pub prior_std_range: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for AmortizeConfig {
    fn default() -> Self {
        AmortizeConfig {
            library_size: 100,
            clusters: 5,
            lambda: 1.0,
            offline_metric: MetricKind::W2,
            online_metric: MetricKind::W2,
            distance: DistanceOptions::default(),
            kmedoids: KMedoidsOptions::default(),
            offline_particles: 2000,
            online_particles: 2000,
            online_cloud_cap: 256,
            steps_per_simulation: 10,
            prior_mean_range: None,
            prior_std_range: None,
            seed: 0,
        }
    }
}

fn check_range(range: Option<[f64; 2]>, what: &str, min: f64) -> Result<()> {
    if let Some([lo, hi]) = range {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min) {
            return Err(Error::arg(format!("{what} must be a finite [lo, hi] with lo <= hi and lo >= {min}")));
        }
    }
    Ok(())
}

impl AmortizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.library_size == 0 {
            return Err(Error::arg("library_size must be positive"));
        }
        if self.clusters == 0 || self.clusters > self.library_size {
            return Err(Error::arg(format!(
                "clusters = {} must lie in 1..={}",
                self.clusters, self.library_size
            )));
        }
        check_lambda(self.lambda)?;
        if !self.online_metric.uses_samples_only() {
            return Err(Error::arg("the online metric must be computable from state samples (w2 or mmd)"));
        }
        if self.offline_particles == 0 || self.online_particles == 0 || self.online_cloud_cap == 0 {
            return Err(Error::arg("particle counts must be positive"));
        }
        if self.steps_per_simulation == 0 {
            return Err(Error::arg("steps_per_simulation must be positive"));
        }
        check_range(self.prior_mean_range, "prior_mean_range", f64::NEG_INFINITY)?;
        check_range(self.prior_std_range, "prior_std_range", 0.0)?;
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::arg(format!("lambda must be >= 0 (or inf), got {lambda}")))
    }
}

/// Parse `inf`/`infinity` or a nonnegative number.
pub fn parse_lambda(text: &str) -> Result<f64> {
    let lambda: f64 = text
        .trim()
        .parse()
        .map_err(|_| Error::arg(format!("lambda must be a number or 'inf', got '{text}'")))?;
    check_lambda(lambda)?;
    Ok(lambda)
}

/// Convex combination weights over the library.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Validate nonnegativity and unit sum (within 1e-10).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::arg("weight vector is empty"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::arg("weights must be nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::arg(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector(weights))
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::arg("one-hot index out of range"));
        }
        let mut w = vec![0.0; k];
        w[index] = 1.0;
        Ok(WeightVector(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// First index of the smallest distance.
pub fn argmin(distances: &[f64]) -> usize {
    let mut best = 0;
    for (k, &d) in distances.iter().enumerate() {
        if d < distances[best] {
            best = k;
        }
    }
    best
}

/// `w_k = exp(-λ ρ_k) / Σ_j exp(-λ ρ_j)`, computed with the minimum distance
/// subtracted. `λ = ∞` gives the one-hot vector at the first minimizer and
/// `λ = 0` the uniform vector.
pub fn softmax_weights(distances: &[f64], lambda: f64) -> Result<WeightVector> {
    check_lambda(lambda)?;
    if distances.is_empty() {
        return Err(Error::arg("no distances to weigh"));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical("library distances must be finite".into()));
    }
    let k = distances.len();
    if lambda == f64::INFINITY {
        return WeightVector::one_hot(k, argmin(distances));
    }
    if lambda == 0.0 {
        return Ok(WeightVector(vec![1.0 / k as f64; k]));
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = distances.iter().map(|d| (-lambda * (d - min)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    Ok(WeightVector(w))
}

/// Distances `ρ(S*_k, S_t)` between each medoid's state samples and a
/// prior cloud, on at most `min(N_online, online_cloud_cap)` points per
/// cloud.
pub fn library_distances(library: &MedoidLibrary, prior_x: &StateEnsemble, cfg: &AmortizeConfig, seed: u64) -> Result<Vec<f64>> {
    if prior_x.is_empty() {
        return Err(Error::arg("prior cloud is empty"));
    }
    check_dim("prior state dim", library.x_dim(), prior_x.dim())?;
    let mut opts = cfg.distance.clone();
    opts.cloud_cap = cfg.online_cloud_cap.min(cfg.online_particles).max(1);
    opts.use_joint = false;
    library
        .medoids
        .iter()
        .enumerate()
        .map(|(k, rec)| {
            cloud_distance(
                rec.samples.x.as_slice(),
                prior_x.as_slice(),
                prior_x.dim(),
                cfg.online_metric,
                &opts,
                derive_seed(seed, k as u64),
            )
        })
        .collect()
}

/// Weights of the library maps for the current prior cloud.
pub fn online_weights(library: &MedoidLibrary, prior_x: &StateEnsemble, cfg: &AmortizeConfig, seed: u64) -> Result<(WeightVector, Vec<f64>)> {
    let rho = library_distances(library, prior_x, cfg, seed)?;
    Ok((softmax_weights(&rho, cfg.lambda)?, rho))
}

/// `Σ_k w_k T*_k(x_i, y)` for every prior particle. Zero-weight maps are
/// skipped.
pub fn apply_amortized_map(library: &MedoidLibrary, weights: &WeightVector, prior: &StateEnsemble, y: &[f64]) -> Result<StateEnsemble> {
    check_dim("weights", library.len(), weights.len())?;
    check_dim("prior state dim", library.x_dim(), prior.dim())?;
    check_dim("observation dim", library.y_dim(), y.len())?;
    let mut out = vec![0.0; prior.as_slice().len()];
    for (rec, &w) in library.medoids.iter().zip(weights.as_slice()) {
        if w == 0.0 {
            continue;
        }
        let mapped = rec.map.transport_all(prior.as_slice(), y)?;
        for (o, m) in out.iter_mut().zip(&mapped) {
            *o += w * m;
        }
    }
    StateEnsemble::new(prior.dim(), out)
}

/// Run OTF filters on simulations of the model and keep every step's joint
/// samples and trained map until `M` records are collected.
pub fn build_library(spec: &ModelSpec, cfg: &AmortizeConfig, otf: &OtfFilterConfig) -> Result<Vec<PretrainedRecord>> {
    build_library_with(spec, cfg, otf, |_, _| {})
}

/// [`build_library`] with a callback invoked after each record is made.
pub fn build_library_with<F>(spec: &ModelSpec, cfg: &AmortizeConfig, otf: &OtfFilterConfig, mut progress: F) -> Result<Vec<PretrainedRecord>>
where
    F: FnMut(usize, &PretrainedRecord),
{
    cfg.validate()?;
    spec.validate()?;
    let mut records = Vec::with_capacity(cfg.library_size);
    let mut simulation = 0usize;
    while records.len() < cfg.library_size {
        let mut prior_rng = rng_from_seed(derive_seed_path(cfg.seed, &[0xB1, simulation as u64]));
        let mean = match cfg.prior_mean_range {
            Some([lo, hi]) if hi > lo => prior_rng.random_range(lo..hi),
            Some([lo, _]) => lo,
            None => spec.prior_mean[0],
        };
        let std = match cfg.prior_std_range {
            Some([lo, hi]) if hi > lo => prior_rng.random_range(lo..hi),
            Some([lo, _]) => lo,
            None => spec.prior_std,
        };
        let prior_mean = match cfg.prior_mean_range {
            Some(_) => vec![mean; spec.state_dim],
            None => spec.prior_mean.clone(),
        };
        let sim_spec = spec.with_prior(prior_mean, std)?;
        let sim_seed = derive_seed_path(cfg.seed, &[0xB2, simulation as u64]);
        let trajectory = simulate(&sim_spec, cfg.steps_per_simulation, sim_seed)?;
        let filter_seed = derive_seed_path(cfg.seed, &[0xB3, simulation as u64]);
        let mut filter = OtfFilter::new(sim_spec.clone(), otf.clone(), filter_seed)?;
        let mut current = sample_prior(&sim_spec, cfg.offline_particles, derive_seed(filter_seed, 1))?;
        for (t, y) in trajectory.observations.iter().enumerate() {
            if records.len() == cfg.library_size {
                break;
            }
            let step = filter
                .step(&current, y)
                .map_err(|e| e.context(format!("library simulation {simulation}, step {}", t + 1)))?;
            let record = PretrainedRecord::new(
                records.len() as u64,
                step.joint,
                step.model,
                Provenance {
                    simulation,
                    simulation_seed: sim_seed,
                    time_index: t + 1,
                    prior_mean: mean,
                    prior_std: std,
                },
            )?;
            progress(records.len(), &record);
            records.push(record);
            current = step.posterior;
        }
        simulation += 1;
    }
    Ok(records)
}

/// Distance matrix over the records and the resulting medoid library.
pub fn offline_stage(records: &[PretrainedRecord], cfg: &AmortizeConfig) -> Result<(Option<DistanceMatrix>, MedoidLibrary)> {
    check_dim("library records", cfg.library_size, records.len())?;
    cfg.validate()?;
    if records.len() == 1 {
        return Ok((None, MedoidLibrary::from_records(records.to_vec(), cfg.offline_metric)?));
    }
    let d = distance_matrix(records, cfg.offline_metric, &cfg.distance, derive_seed(cfg.seed, 0xD0))?;
    let clustering = k_medoids(&d, cfg.clusters, &cfg.kmedoids)?;
    let library = MedoidLibrary::from_clustering(records, &clustering, cfg.offline_metric)?;
    Ok((Some(d), library))
}

/// Result of an A-OTF run.
#[derive(Debug, Clone)]
pub struct AotfRun {
    pub result: FilterResult,
    /// Per-step library weights.
    pub weights: Vec<WeightVector>,
    /// Per-step distances `ρ_k`.
    pub distances: Vec<Vec<f64>>,
    /// Parameter-gradient evaluations performed during the run.
    pub gradient_evaluations: u64,
}

/// Online stage: propagate, weigh the library against the prior cloud and
/// apply the combined map at the realized observation.
pub fn aotf_filter(spec: &ModelSpec, observations: &[Vec<f64>], library: &MedoidLibrary, cfg: &AmortizeConfig, seed: u64) -> Result<AotfRun> {
    if observations.is_empty() {
        return Err(Error::arg("no observations to filter"));
    }
    if library.is_empty() {
        return Err(Error::arg("library holds no maps"));
    }
    check_lambda(cfg.lambda)?;
    if !cfg.online_metric.uses_samples_only() {
        return Err(Error::arg("the online metric must be computable from state samples (w2 or mmd)"));
    }
    check_dim("library state dim", spec.state_dim, library.x_dim())?;
    check_dim("library observation dim", spec.obs_dim, library.y_dim())?;
    let grads_before = gradient_evaluations();
    let mut rng = rng_from_seed(derive_seed(seed, 0x7F));
    let mut current = sample_prior(spec, cfg.online_particles, derive_seed(seed, 1))?;
    let mut result = FilterResult::new("aotf", toml::to_string(cfg).unwrap_or_default());
    let mut weights = Vec::with_capacity(observations.len());
    let mut distances = Vec::with_capacity(observations.len());
    for (t, y) in observations.iter().enumerate() {
        let clock = Stopwatch::start();
        let prior = propagate(spec, &current, &mut rng)?;
        let (w, rho) = if cfg.distance.use_joint {
            // Joint distances compare (x, y) clouds, so pair the prior with
            // synthetic observations first.
            let ys = sample_observations(spec, &prior, &mut rng)?;
            joint_weights(library, &JointSample::new(prior.clone(), ys)?, cfg, derive_seed(seed, t as u64 + 0x100))?
        } else {
            online_weights(library, &prior, cfg, derive_seed(seed, t as u64 + 0x100))?
        };
        current = apply_amortized_map(library, &w, &prior, y).map_err(|e| e.context(format!("A-OTF at step {}", t + 1)))?;
        result.push(current.clone(), clock.elapsed_ms());
        weights.push(w);
        distances.push(rho);
    }
    Ok(AotfRun {
        result,
        weights,
        distances,
        gradient_evaluations: gradient_evaluations() - grads_before,
    })
}

fn joint_weights(library: &MedoidLibrary, joint: &JointSample, cfg: &AmortizeConfig, seed: u64) -> Result<(WeightVector, Vec<f64>)> {
    let mut opts = cfg.distance.clone();
    opts.cloud_cap = cfg.online_cloud_cap.min(cfg.online_particles).max(1);
    let stack = |s: &JointSample| -> Vec<f64> {
        s.x.rows().zip(s.y.rows()).flat_map(|(x, y)| x.iter().chain(y).copied()).collect()
    };
    let live = stack(joint);
    let dim = joint.x_dim() + joint.y_dim();
    let rho = library
        .medoids
        .iter()
        .enumerate()
        .map(|(k, rec)| cloud_distance(&stack(&rec.samples), &live, dim, cfg.online_metric, &opts, derive_seed(seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((softmax_weights(&rho, cfg.lambda)?, rho))
}

/// Weights CSV with columns `t, w_1..w_K` (one-based `t`).
pub fn weights_to_csv(weights: &[WeightVector]) -> String {
    let k = weights.first().map_or(0, WeightVector::len);
    let mut out = String::from("t");
    for j in 1..=k {
        out.push_str(&format!(",w_{j}"));
    }
    out.push('\n');
    for (t, w) in weights.iter().enumerate() {
        out.push_str(&format!("{},{}\n", t + 1, join_floats(w.as_slice())));
    }
    out
}

pub fn write_weights_csv(path: &Path, weights: &[WeightVector]) -> Result<()> {
    write_text(path, &weights_to_csv(weights))
}

pub fn read_weights_csv(path: &Path) -> Result<Vec<WeightVector>> {
    let table = read_table(path)?;
    if table.header.first().map(String::as_str) != Some("t") {
        return Err(Error::format(format!("{}: first column must be t", path.display())));
    }
    table.rows().map(|row| WeightVector::new(row[1..].to_vec())).collect()
}
