//! Config-driven experiment harness.
//!
//! A run simulates one observation trajectory per `(repetition, μ0, σ0)`,
//! filters it with a large-ensemble reference and with every configured
//! method at every sweep point, and scores each method by the per-step
//! empirical W2 distance to the reference. Output directory layout:
//!
//! ```text
//! config.toml    resolved configuration
//! rows.csv       one EvalRow per (method, sweep point, repetition)
//! timings.csv    wall-clock cost of each row (kept apart: not reproducible)
//! manifest.toml  config hash, timestamp, row counts
//! library/       pre-trained records, distance matrices, medoid libraries
//! ```
//!
//! Rows already present with status `ok` are skipped on re-runs, so an
//! interrupted run resumes where it stopped.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amortize::{aotf_filter, build_library_with, offline_stage, AmortizeConfig};
use crate::baselines::{enkf_filter, ground_truth, sir_filter, FilterResult};
use crate::error::{Error, Result};
use crate::io::{join_floats, read_text, write_text};
use crate::metricspace::{
    k_medoids, library::load_records, library::save_records, library::RECORDS_MANIFEST, w2_empirical, DistanceMatrix,
    MedoidLibrary, MetricKind, PretrainedRecord,
};
use crate::otf::{otf_filter, OtfFilterConfig};
use crate::rng::{derive_seed, derive_seed_path};
use crate::ssm::{simulate, ModelSpec, Trajectory};

/// A filtering method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Aotf,
    Otf,
    Enkf,
    Sir,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Aotf => "aotf",
            Method::Otf => "otf",
            Method::Enkf => "enkf",
            Method::Sir => "sir",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aotf" => Ok(Method::Aotf),
            "otf" => Ok(Method::Otf),
            "enkf" => Ok(Method::Enkf),
            "sir" => Ok(Method::Sir),
            other => Err(Error::arg(format!("unknown method '{other}' (expected aotf, otf, enkf or sir)"))),
        }
    }
}

/// Values swept over. Empty `mu0`/`sigma0` lists keep the model's prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub particles: Vec<usize>,
    /// Medoid counts (A-OTF only).
    pub clusters: Vec<usize>,
    /// Softmax temperatures (A-OTF only); `inf` selects the nearest map.
    pub lambda: Vec<f64>,
    /// Offline clustering metrics (A-OTF only).
    pub metric: Vec<MetricKind>,
    pub mu0: Vec<f64>,
    pub sigma0: Vec<f64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        SweepAxes {
            particles: vec![1000],
            clusters: vec![5],
            lambda: vec![1.0],
            metric: vec![MetricKind::W2],
            mu0: Vec::new(),
            sigma0: Vec::new(),
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub methods: Vec<Method>,
    /// Filter steps per trajectory.
    pub steps: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Particles of the reference SIR.
    pub truth_particles: usize,
    /// Clouds are subsampled to at most this many points for scoring.
    pub eval_cap: usize,
    /// Leading steps left out of the mean W2.
    pub warmup: usize,
    /// Use pre-built records from this directory instead of building them.
    pub library_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub sweep: SweepAxes,
    pub otf: OtfFilterConfig,
    pub amortize: AmortizeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            methods: vec![Method::Aotf, Method::Otf, Method::Enkf, Method::Sir],
            steps: 20,
            repetitions: 1,
            seed: 0,
            truth_particles: 20_000,
            eval_cap: 1000,
            warmup: 0,
            library_dir: None,
            model: ModelSpec::linquad(1, 0.9, 0.1, 0.0, 1.0).expect("valid default model"),
            sweep: SweepAxes::default(),
            otf: OtfFilterConfig::default(),
            amortize: AmortizeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// SHA-256 of the canonical serialization, as lowercase hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.methods.is_empty() {
            return Err(Error::arg("methods must not be empty"));
        }
        if self.repetitions == 0 || self.steps == 0 {
            return Err(Error::arg("repetitions and steps must be positive"));
        }
        if self.truth_particles == 0 || self.eval_cap == 0 {
            return Err(Error::arg("truth_particles and eval_cap must be positive"));
        }
        if self.warmup >= self.steps {
            return Err(Error::arg("warmup must leave at least one scored step"));
        }
        let s = &self.sweep;
        if s.particles.is_empty() || s.particles.contains(&0) {
            return Err(Error::arg("sweep.particles must list positive counts"));
        }
        if s.sigma0.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || s.mu0.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("sweep.mu0 / sweep.sigma0 must be finite (sigma0 >= 0)"));
        }
        if self.methods.contains(&Method::Aotf) {
            if s.clusters.is_empty() || s.lambda.is_empty() || s.metric.is_empty() {
                return Err(Error::arg("A-OTF needs nonempty sweep.clusters, sweep.lambda and sweep.metric"));
            }
            for &k in &s.clusters {
                let mut a = self.amortize.clone();
                a.clusters = k;
                a.validate()?;
            }
            for &l in &s.lambda {
                if !(l >= 0.0) {
                    return Err(Error::arg("sweep.lambda must be >= 0"));
                }
            }
        }
        if self.methods.contains(&Method::Otf) {
            self.otf.train.validate()?;
        }
        Ok(())
    }

    /// The `(μ0, σ0)` grid; `None` keeps the model's own prior.
    pub fn prior_grid(&self) -> Vec<(Option<f64>, Option<f64>)> {
        let mus: Vec<Option<f64>> = if self.sweep.mu0.is_empty() { vec![None] } else { self.sweep.mu0.iter().map(|&v| Some(v)).collect() };
        let sigmas: Vec<Option<f64>> =
            if self.sweep.sigma0.is_empty() { vec![None] } else { self.sweep.sigma0.iter().map(|&v| Some(v)).collect() };
        mus.iter().flat_map(|&m| sigmas.iter().map(move |&s| (m, s))).collect()
    }

    fn spec_for(&self, mu0: Option<f64>, sigma0: Option<f64>) -> Result<ModelSpec> {
        let mean = match mu0 {
            Some(m) => vec![m; self.model.state_dim],
            None => self.model.prior_mean.clone(),
        };
        self.model.with_prior(mean, sigma0.unwrap_or(self.model.prior_std))
    }
}

const PRESET_LORENZ63_DESK: &str = include_str!("../presets/lorenz63_desk.toml");
const PRESET_LINQUAD4_DESK: &str = include_str!("../presets/linquad4_desk.toml");
const PRESET_LINQUAD1_DESK: &str = include_str!("../presets/linquad1_desk.toml");
const PRESET_LORENZ63_PAPER: &str = include_str!("../presets/lorenz63_paper.toml");
const PRESET_LINQUAD4_PAPER: &str = include_str!("../presets/linquad4_paper.toml");

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 5] = ["lorenz63_desk", "linquad4_desk", "linquad1_desk", "lorenz63_paper", "linquad4_paper"];

/// Shipped experiment configurations.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let text = match name {
        "lorenz63_desk" => PRESET_LORENZ63_DESK,
        "linquad4_desk" => PRESET_LINQUAD4_DESK,
        "linquad1_desk" => PRESET_LINQUAD1_DESK,
        "lorenz63_paper" => PRESET_LORENZ63_PAPER,
        "linquad4_paper" => PRESET_LINQUAD4_PAPER,
        other => return Err(Error::arg(format!("unknown preset '{other}' (known: {})", PRESETS.join(", ")))),
    };
    ExperimentConfig::from_toml(text).map_err(|e| e.context(format!("preset {name}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Failed,
}

mod step_list {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(";"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(';').map(|v| v.parse::<f64>().map_err(serde::de::Error::custom)).collect()
    }
}

/// Score of one method at one sweep point and repetition. The CSV column
/// order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub particles: usize,
    pub clusters: Option<usize>,
    pub lambda: Option<f64>,
    pub metric: Option<MetricKind>,
    pub mu0: f64,
    pub sigma0: f64,
    pub repetition: usize,
    pub seed: u64,
    pub status: RowStatus,
    pub mean_w2: Option<f64>,
    #[serde(with = "step_list")]
    pub w2_per_step: Vec<f64>,
    pub error: String,
}

/// Column order of `rows.csv`.
pub const EVAL_COLUMNS: [&str; 13] = [
    "method",
    "particles",
    "clusters",
    "lambda",
    "metric",
    "mu0",
    "sigma0",
    "repetition",
    "seed",
    "status",
    "mean_w2",
    "w2_per_step",
    "error",
];

impl EvalRow {
    /// Identity of the row for resuming and joining with timings.
    pub fn key(&self) -> String {
        let mut key = format!("{}|N={}", self.method, self.particles);
        if let Some(k) = self.clusters {
            key.push_str(&format!("|K={k}"));
        }
        if let Some(l) = self.lambda {
            key.push_str(&format!("|lambda={l:?}"));
        }
        if let Some(m) = self.metric {
            key.push_str(&format!("|metric={m}"));
        }
        key.push_str(&format!("|mu0={:?}|sigma0={:?}|rep={}", self.mu0, self.sigma0, self.repetition));
        key
    }
}

/// Wall-clock cost of a row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub key: String,
    pub method: Method,
    pub particles: usize,
    pub total_ms: f64,
    pub mean_step_ms: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(format!("{}: {e}", path.display()))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
    write_text(path, &String::from_utf8(bytes).map_err(|e| Error::format(e.to_string()))?)
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub fn write_eval_rows(path: &Path, rows: &[EvalRow]) -> Result<()> {
    write_rows(path, rows, &EVAL_COLUMNS)
}

pub fn read_eval_rows(path: &Path) -> Result<Vec<EvalRow>> {
    let text = read_text(path)?;
    let header = text.lines().next().unwrap_or_default();
    if header != EVAL_COLUMNS.join(",") {
        return Err(Error::format(format!("{}: expected columns {}", path.display(), EVAL_COLUMNS.join(","))));
    }
    read_rows(path)
}

pub const TIMING_COLUMNS: [&str; 5] = ["key", "method", "particles", "total_ms", "mean_step_ms"];

/// Per-step empirical W2 between a method's ensembles and the reference
/// ensembles, and its mean over steps after `warmup`. Both clouds are
/// brought to the method's size (at most `cap`) by seeded subsampling.
pub fn evaluate_w2(result: &FilterResult, truth: &FilterResult, cap: usize, seed: u64, warmup: usize) -> Result<(Vec<f64>, f64)> {
    if result.steps() != truth.steps() {
        return Err(Error::arg(format!(
            "method has {} steps but the reference has {}",
            result.steps(),
            truth.steps()
        )));
    }
    if warmup >= result.steps() {
        return Err(Error::arg("warmup leaves no steps to score"));
    }
    let per_step = result
        .posteriors
        .iter()
        .zip(&truth.posteriors)
        .enumerate()
        .map(|(t, (a, b))| {
            if a.dim() != b.dim() {
                return Err(Error::arg("method and reference state dims differ"));
            }
            w2_empirical(a.as_slice(), b.as_slice(), a.dim(), cap, derive_seed(seed, t as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let scored = &per_step[warmup..];
    let mean = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok((per_step, mean))
}

/// ISO-8601 UTC timestamp; `SOURCE_DATE_EPOCH` pins it for reproducible
/// output.
pub fn timestamp() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse::<i64>().ok());
    let time = match pinned.and_then(|secs| chrono::DateTime::from_timestamp(secs, 0)) {
        Some(t) => t,
        None => chrono::Utc::now(),
    };
    time.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub kind: String,
    pub created: String,
    pub config_hash: String,
    pub version: String,
    pub rows: usize,
    pub failed: usize,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, kind: &str, rows: usize, failed: usize, files: Vec<String>) -> Self {
        Manifest {
            name: cfg.name.clone(),
            kind: kind.into(),
            created: timestamp(),
            config_hash: cfg.hash(),
            version: env!("CARGO_PKG_VERSION").into(),
            rows,
            failed,
            files,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &toml::to_string(self).map_err(|e| Error::format(e.to_string()))?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        toml::from_str(&read_text(path)?).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Counts reported by [`run_experiment`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub computed: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// One trajectory of the experiment: a repetition at one prior setting.
struct Cell {
    repetition: usize,
    mu0: Option<f64>,
    sigma0: Option<f64>,
}

impl Cell {
    fn tags(&self) -> [u64; 3] {
        [
            self.repetition as u64,
            self.mu0.map_or(u64::MAX, f64::to_bits),
            self.sigma0.map_or(u64::MAX, f64::to_bits),
        ]
    }

    fn label(&self, spec: &ModelSpec) -> String {
        format!(
            "rep{}_mu{}_sigma{}",
            self.repetition,
            self.mu0.unwrap_or(spec.prior_mean[0]),
            self.sigma0.unwrap_or(spec.prior_std)
        )
    }
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for repetition in 0..cfg.repetitions {
        for (mu0, sigma0) in cfg.prior_grid() {
            out.push(Cell { repetition, mu0, sigma0 });
        }
    }
    out
}

fn trajectory_for(cfg: &ExperimentConfig, spec: &ModelSpec, cell: &Cell) -> Result<Trajectory> {
    let [r, m, s] = cell.tags();
    simulate(spec, cfg.steps, derive_seed_path(cfg.seed, &[0x7A, r, m, s]))
}

fn truth_for(cfg: &ExperimentConfig, spec: &ModelSpec, cell: &Cell, obs: &[Vec<f64>]) -> Result<FilterResult> {
    let [r, m, s] = cell.tags();
    ground_truth(spec, obs, cfg.truth_particles, derive_seed_path(cfg.seed, &[0x77, r, m, s]))
}

/// Lazily built record set and medoid libraries.
struct Libraries<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    records: Option<std::result::Result<Vec<PretrainedRecord>, String>>,
    matrices: HashMap<MetricKind, std::result::Result<DistanceMatrix, String>>,
    libraries: HashMap<(MetricKind, usize), std::result::Result<MedoidLibrary, String>>,
}

impl<'a> Libraries<'a> {
    fn new(cfg: &'a ExperimentConfig, out_dir: &Path) -> Self {
        Libraries {
            cfg,
            dir: out_dir.join("library"),
            records: None,
            matrices: HashMap::new(),
            libraries: HashMap::new(),
        }
    }

    fn records(&mut self) -> std::result::Result<&Vec<PretrainedRecord>, String> {
        if self.records.is_none() {
            self.records = Some(self.load_or_build_records().map_err(|e| e.to_string()));
        }
        self.records.as_ref().expect("just set").as_ref().map_err(Clone::clone)
    }

    fn load_or_build_records(&self) -> Result<Vec<PretrainedRecord>> {
        if let Some(dir) = &self.cfg.library_dir {
            return load_records(dir);
        }
        let dir = self.dir.join("records");
        if dir.join(RECORDS_MANIFEST).exists() {
            return load_records(&dir);
        }
        let records = build_library_with(&self.cfg.model, &self.cfg.amortize, &self.cfg.otf, |i, _| {
            if std::env::var_os("AOTF_PROGRESS").is_some() {
                eprintln!("library record {}/{}", i + 1, self.cfg.amortize.library_size);
            }
        })?;
        save_records(&dir, &records)?;
        Ok(records)
    }

    fn library(&mut self, metric: MetricKind, k: usize) -> std::result::Result<MedoidLibrary, String> {
        if let Some(lib) = self.libraries.get(&(metric, k)) {
            return lib.clone();
        }
        let built = self.build_library(metric, k).map_err(|e| e.to_string());
        self.libraries.insert((metric, k), built.clone());
        built
    }

    fn build_library(&mut self, metric: MetricKind, k: usize) -> Result<MedoidLibrary> {
        let records = self.records().map_err(Error::Argument)?.clone();
        let mut amortize = self.cfg.amortize.clone();
        amortize.library_size = records.len();
        amortize.clusters = k;
        amortize.offline_metric = metric;
        if records.len() == 1 || k == records.len() {
            return offline_stage(&records, &amortize).map(|(_, lib)| lib);
        }
        if !self.matrices.contains_key(&metric) {
            let path = self.dir.join(format!("distances_{metric}.csv"));
            let matrix = if path.exists() {
                DistanceMatrix::read_csv(&path)
            } else {
                crate::metricspace::distance_matrix(&records, metric, &amortize.distance, derive_seed(amortize.seed, 0xD0))
                    .and_then(|d| d.write_csv(&path).map(|_| d))
            };
            self.matrices.insert(metric, matrix.map_err(|e| e.to_string()));
        }
        let d = self.matrices[&metric].clone().map_err(Error::Argument)?;
        let clustering = k_medoids(&d, k, &amortize.kmedoids)?;
        let lib = MedoidLibrary::from_clustering(&records, &clustering, metric)?;
        lib.save(&self.dir.join(format!("medoids_{metric}_k{k}")))?;
        Ok(lib)
    }
}

/// A sweep point for one method.
struct Job {
    method: Method,
    particles: usize,
    aotf: Option<(usize, f64, MetricKind)>,
}

fn jobs(cfg: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &particles in &cfg.sweep.particles {
        for &method in &cfg.methods {
            if method == Method::Aotf {
                for &metric in &cfg.sweep.metric {
                    for &k in &cfg.sweep.clusters {
                        for &lambda in &cfg.sweep.lambda {
                            out.push(Job {
                                method,
                                particles,
                                aotf: Some((k, lambda, metric)),
                            });
                        }
                    }
                }
            } else {
                out.push(Job { method, particles, aotf: None });
            }
        }
    }
    out
}

fn pending_row(job: &Job, spec: &ModelSpec, cell: &Cell, seed: u64) -> EvalRow {
    EvalRow {
        method: job.method,
        particles: job.particles,
        clusters: job.aotf.map(|a| a.0),
        lambda: job.aotf.map(|a| a.1),
        metric: job.aotf.map(|a| a.2),
        mu0: cell.mu0.unwrap_or(spec.prior_mean[0]),
        sigma0: cell.sigma0.unwrap_or(spec.prior_std),
        repetition: cell.repetition,
        seed,
        status: RowStatus::Ok,
        mean_w2: None,
        w2_per_step: Vec::new(),
        error: String::new(),
    }
}

fn run_job(cfg: &ExperimentConfig, job: &Job, spec: &ModelSpec, obs: &[Vec<f64>], seed: u64, libs: &mut Libraries<'_>) -> Result<FilterResult> {
    match job.method {
        Method::Enkf => enkf_filter(spec, obs, job.particles, seed),
        Method::Sir => sir_filter(spec, obs, job.particles, seed),
        Method::Otf => otf_filter(spec, obs, job.particles, &cfg.otf, seed),
        Method::Aotf => {
            let (k, lambda, metric) = job.aotf.expect("A-OTF job carries its settings");
            let library = libs.library(metric, k).map_err(|e| Error::Argument(format!("library unavailable: {e}")))?;
            let mut amortize = cfg.amortize.clone();
            amortize.clusters = k;
            amortize.lambda = lambda;
            amortize.offline_metric = metric;
            amortize.online_particles = job.particles;
            Ok(aotf_filter(spec, obs, &library, &amortize, seed)?.result)
        }
    }
}

fn one_line(e: &Error) -> String {
    e.to_string().replace(['\n', '\r'], " ")
}

/// [`run_experiment_with`] without progress reporting.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    run_experiment_with(cfg, out_dir, |_| {})
}

/// Run every (sweep point, repetition) not already completed in `out_dir`.
pub fn run_experiment_with<F: FnMut(&EvalRow)>(cfg: &ExperimentConfig, out_dir: &Path, mut progress: F) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;
    let rows_path = out_dir.join("rows.csv");
    let timings_path = out_dir.join("timings.csv");

    let mut rows: Vec<EvalRow> = if rows_path.exists() { read_eval_rows(&rows_path)? } else { Vec::new() };
    rows.retain(|r| r.status == RowStatus::Ok);
    let done: std::collections::HashSet<String> = rows.iter().map(EvalRow::key).collect();
    let mut timings: Vec<TimingRow> =
        if timings_path.exists() { read_rows::<TimingRow>(&timings_path)? } else { Vec::new() };
    timings.retain(|t| done.contains(&t.key));

    let mut libs = Libraries::new(cfg, out_dir);
    let mut summary = RunSummary::default();
    let jobs = jobs(cfg);
    for cell in cells(cfg) {
        let spec = cfg.spec_for(cell.mu0, cell.sigma0)?;
        let todo: Vec<&Job> = jobs
            .iter()
            .filter(|j| !done.contains(&pending_row(j, &spec, &cell, 0).key()))
            .collect();
        summary.skipped += jobs.len() - todo.len();
        if todo.is_empty() {
            continue;
        }
        let [r, m, s] = cell.tags();
        let reference = trajectory_for(cfg, &spec, &cell).and_then(|traj| {
            let truth = truth_for(cfg, &spec, &cell, &traj.observations)?;
            Ok((traj, truth))
        });
        for job in todo {
            let seed = derive_seed_path(cfg.seed, &[0xF1, r, m, s, job.particles as u64]);
            let mut row = pending_row(job, &spec, &cell, seed);
            let outcome = reference.as_ref().map_err(|e| Error::Argument(format!("reference failed: {e}"))).and_then(
                |(traj, truth)| {
                    let result = run_job(cfg, job, &spec, &traj.observations, seed, &mut libs)?;
                    let scores = evaluate_w2(&result, truth, cfg.eval_cap, derive_seed_path(cfg.seed, &[0xE1, r, m, s]), cfg.warmup)?;
                    Ok((result, scores))
                },
            );
            match outcome {
                Ok((result, (per_step, mean))) => {
                    row.mean_w2 = Some(mean);
                    row.w2_per_step = per_step;
                    timings.push(TimingRow {
                        key: row.key(),
                        method: row.method,
                        particles: row.particles,
                        total_ms: result.total_ms(),
                        mean_step_ms: result.total_ms() / result.steps() as f64,
                    });
                    summary.computed += 1;
                }
                Err(e) => {
                    row.status = RowStatus::Failed;
                    row.error = one_line(&e);
                    summary.failed += 1;
                }
            }
            progress(&row);
            rows.push(row);
            write_eval_rows(&rows_path, &rows)?;
            write_rows(&timings_path, &timings, &TIMING_COLUMNS)?;
        }
    }
    write_eval_rows(&rows_path, &rows)?;
    write_rows(&timings_path, &timings, &TIMING_COLUMNS)?;
    let failed = rows.iter().filter(|r| r.status == RowStatus::Failed).count();
    Manifest::new(
        cfg,
        "run",
        rows.len(),
        failed,
        vec!["config.toml".into(), "rows.csv".into(), "timings.csv".into()],
    )
    .write(&out_dir.join("manifest.toml"))?;
    Ok(summary)
}

/// Simulate every trajectory of the experiment and write it with the
/// reference posterior means under `out_dir/truth/`.
pub fn run_truth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = out_dir.join("truth");
    let mut files = Vec::new();
    for cell in cells(cfg) {
        let spec = cfg.spec_for(cell.mu0, cell.sigma0)?;
        let traj = trajectory_for(cfg, &spec, &cell)?;
        let truth = truth_for(cfg, &spec, &cell, &traj.observations)?;
        let label = cell.label(&spec);
        let traj_path = dir.join(format!("{label}_trajectory.csv"));
        traj.write_csv(&traj_path)?;
        let means_path = dir.join(format!("{label}_truth_means.csv"));
        write_means_csv(&means_path, &truth.means())?;
        files.push(traj_path);
        files.push(means_path);
    }
    let names = files
        .iter()
        .map(|p| p.strip_prefix(out_dir).unwrap_or(p).display().to_string())
        .collect::<Vec<_>>();
    Manifest::new(cfg, "truth", names.len(), 0, names).write(&out_dir.join("truth_manifest.toml"))?;
    Ok(files)
}

/// CSV with columns `t, m_1..m_n` (one-based `t`).
pub fn write_means_csv(path: &Path, means: &[Vec<f64>]) -> Result<()> {
    let n = means.first().map_or(0, Vec::len);
    let mut out = String::from("t");
    for j in 1..=n {
        out.push_str(&format!(",m_{j}"));
    }
    out.push('\n');
    for (t, m) in means.iter().enumerate() {
        out.push_str(&format!("{},{}\n", t + 1, join_floats(m)));
    }
    write_text(path, &out)
}

/// Horizontal axis of a plot-data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Particles,
    Clusters,
    Mu0,
    Sigma0,
    /// Mean wall time of the run, one point per particle count.
    Time,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" | "particles" => Ok(Axis::Particles),
            "K" | "k" | "clusters" => Ok(Axis::Clusters),
            "mu0" => Ok(Axis::Mu0),
            "sigma0" => Ok(Axis::Sigma0),
            "time" => Ok(Axis::Time),
            other => Err(Error::arg(format!("unknown axis '{other}' (expected N, K, mu0, sigma0 or time)"))),
        }
    }
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Particles => "N",
            Axis::Clusters => "K",
            Axis::Mu0 => "mu0",
            Axis::Sigma0 => "sigma0",
            Axis::Time => "time_ms",
        }
    }
}

/// Aggregated curve point.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub method: Method,
    /// Sweep settings other than the axis, e.g. `K=5;lambda=1.0`.
    pub series: String,
    pub x: f64,
    pub mean_w2: f64,
    /// Population standard deviation over repetitions.
    pub std_w2: f64,
    pub count: usize,
}

fn series_label(row: &EvalRow, axis: Axis) -> String {
    let mut parts = Vec::new();
    if !matches!(axis, Axis::Particles | Axis::Time) {
        parts.push(format!("N={}", row.particles));
    }
    if axis != Axis::Clusters {
        if let Some(k) = row.clusters {
            parts.push(format!("K={k}"));
        }
    }
    if let Some(l) = row.lambda {
        parts.push(format!("lambda={l:?}"));
    }
    if let Some(m) = row.metric {
        parts.push(format!("metric={m}"));
    }
    if axis != Axis::Mu0 {
        parts.push(format!("mu0={:?}", row.mu0));
    }
    if axis != Axis::Sigma0 {
        parts.push(format!("sigma0={:?}", row.sigma0));
    }
    parts.join(";")
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and spread over repetitions of each (method, series, axis value).
/// Failed rows are ignored; rows without the axis (e.g. `K` for a
/// non-amortized method) are skipped. The time axis needs `timings`.
pub fn emit_plotdata(rows: &[EvalRow], timings: &[TimingRow], axis: Axis) -> Result<Vec<PlotPoint>> {
    let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.status == RowStatus::Ok && r.mean_w2.is_some()).collect();
    if ok.is_empty() {
        return Err(Error::arg("no successful rows to aggregate"));
    }
    let time_of: HashMap<&str, f64> = timings.iter().map(|t| (t.key.as_str(), t.total_ms)).collect();
    let mut order: Vec<(Method, String, u64)> = Vec::new();
    let mut groups: HashMap<(Method, String, u64), (Vec<f64>, Vec<f64>)> = HashMap::new();
    for row in ok {
        let (x, group_x) = match axis {
            Axis::Particles => (row.particles as f64, row.particles as f64),
            Axis::Clusters => match row.clusters {
                Some(k) => (k as f64, k as f64),
                None => continue,
            },
            Axis::Mu0 => (row.mu0, row.mu0),
            Axis::Sigma0 => (row.sigma0, row.sigma0),
            Axis::Time => {
                let key = row.key();
                let ms = *time_of
                    .get(key.as_str())
                    .ok_or_else(|| Error::format(format!("no timing for row {key}")))?;
                (ms, row.particles as f64)
            }
        };
        let id = (row.method, series_label(row, axis), group_x.to_bits());
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (Vec::new(), Vec::new())
        });
        entry.0.push(x);
        entry.1.push(row.mean_w2.expect("filtered to scored rows"));
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let (xs, ws) = &groups[&id];
            let (mean_w2, std_w2) = mean_std(ws);
            PlotPoint {
                method: id.0,
                series: id.1.clone(),
                x: mean_std(xs).0,
                mean_w2,
                std_w2,
                count: ws.len(),
            }
        })
        .collect())
}

/// Plot data as CSV: `method,series,<axis>,mean_w2,std_w2,count`.
pub fn plotdata_csv(points: &[PlotPoint], axis: Axis) -> String {
    let mut out = format!("method,series,{},mean_w2,std_w2,count\n", axis.name());
    for p in points {
        out.push_str(&format!("{},{},{:?},{:?},{:?},{}\n", p.method, p.series, p.x, p.mean_w2, p.std_w2, p.count));
    }
    out
}
