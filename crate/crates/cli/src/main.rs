use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aotf::amortize::{aotf_filter, build_library_with, offline_stage, parse_lambda, write_weights_csv};
use aotf::baselines::{enkf_filter, sir_filter, FilterResult};
use aotf::bench::{
    emit_plotdata, plotdata_csv, preset, read_eval_rows, read_rows, run_experiment_with, run_truth, write_means_csv, Axis,
    ExperimentConfig, Manifest, Method, RowStatus, TimingRow, TIMING_COLUMNS,
};
use aotf::ensemble::JointSample;
use aotf::io::write_text;
use aotf::metricspace::library::{load_records, save_records};
use aotf::metricspace::{k_medoids, DistanceMatrix, MedoidLibrary, MetricKind};
use aotf::otf::{otf_filter, train_otf};
use aotf::ssm::{simulate, Trajectory};
use aotf::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aotf", version, about = "Optimal transport filtering with amortized maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the experiment configuration comes from.
#[derive(Args)]
struct ConfigSource {
    /// Experiment configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: lorenz63_desk, linquad4_desk, linquad1_desk,
    /// lorenz63_paper, linquad4_paper.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, Some(name)) => preset(name),
            (None, None) => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trajectory of the configured model.
    Simulate {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Trajectory CSV (t, x_1..x_n, y_1..y_m).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one transport map on a joint-sample CSV.
    TrainOtf {
        /// Joint samples with columns x_1..x_n, y_1..y_m.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        seed: Option<u64>,
        /// Map file; metadata goes to `<out>.toml`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run OTF on simulated trajectories and keep one trained map per step.
    BuildLibrary {
        #[command(flatten)]
        source: ConfigSource,
        /// Number of records (overrides the configuration).
        #[arg(long)]
        size: Option<usize>,
        /// Record directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster a record set and keep the medoids as a library.
    Cluster {
        /// Record directory written by build-library.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "w2")]
        metric: MetricKind,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        source: ConfigSource,
        /// Reuse a previously written distance matrix.
        #[arg(long)]
        distances: Option<PathBuf>,
        /// Library directory; the distance matrix is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter the observations of a trajectory CSV.
    RunFilter {
        #[arg(long)]
        method: Method,
        /// Trajectory CSV whose observation columns are filtered.
        #[arg(long)]
        trajectory: PathBuf,
        #[command(flatten)]
        source: ConfigSource,
        /// Ensemble size (defaults to the first swept value).
        #[arg(long)]
        particles: Option<usize>,
        /// Medoid library directory (A-OTF).
        #[arg(long)]
        library: Option<PathBuf>,
        /// Softmax temperature (A-OTF): a number or `inf`.
        #[arg(long, value_parser = parse_lambda_arg)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Benchmark harness.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run (or resume) an experiment.
    Run {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate result rows into plot data.
    Plotdata {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        axis: Axis,
        /// Timings CSV for the time axis (defaults to timings.csv beside the rows).
        #[arg(long)]
        timings: Option<PathBuf>,
        /// Output CSV (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the experiment's trajectories and reference posterior means.
    Truth {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_lambda_arg(text: &str) -> std::result::Result<f64, String> {
    parse_lambda(text).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { source, steps, seed, out } => {
            let cfg = source.load()?;
            let traj = simulate(&cfg.model, steps.unwrap_or(cfg.steps), seed.unwrap_or(cfg.seed))?;
            traj.write_csv(&out)?;
            println!("wrote {} steps to {}", traj.steps(), out.display());
        }
        Command::TrainOtf { data, source, seed, out } => {
            let cfg = source.load()?;
            let joint = JointSample::read_csv(&data)?;
            let mut train = cfg.otf.train.clone();
            if let Some(s) = seed {
                train.seed = s;
            }
            let model = train_otf(&joint, &train)?;
            model.save(&out)?;
            println!("trained map (objective {:.6}) written to {}", model.meta.final_objective, out.display());
        }
        Command::BuildLibrary { source, size, out } => {
            let cfg = source.load()?;
            let mut amortize = cfg.amortize.clone();
            if let Some(m) = size {
                amortize.library_size = m;
            }
            let records = build_library_with(&cfg.model, &amortize, &cfg.otf, |i, _| {
                eprintln!("record {}/{}", i + 1, amortize.library_size);
            })?;
            save_records(&out, &records)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Cluster { records, metric, k, source, distances, out } => {
            let cfg = source.load()?;
            let records = load_records(&records)?;
            let mut amortize = cfg.amortize.clone();
            amortize.library_size = records.len();
            amortize.clusters = k;
            amortize.offline_metric = metric;
            amortize.validate()?;
            let library = match distances {
                Some(path) => {
                    let d = DistanceMatrix::read_csv(&path)?;
                    if d.metric() != metric || d.size() != records.len() {
                        return Err(Error::Argument(format!(
                            "{} holds a {} matrix of size {}, expected {metric} of size {}",
                            path.display(),
                            d.metric(),
                            d.size(),
                            records.len()
                        )));
                    }
                    MedoidLibrary::from_clustering(&records, &k_medoids(&d, k, &amortize.kmedoids)?, metric)?
                }
                None => {
                    let (d, library) = offline_stage(&records, &amortize)?;
                    if let Some(d) = d {
                        d.write_csv(&sibling(&out, &format!("distances_{metric}.csv")))?;
                    }
                    library
                }
            };
            library.save(&out)?;
            println!(
                "medoids {:?} (total cost {:.6}) written to {}",
                library.medoid_indices,
                library.total_cost,
                out.display()
            );
        }
        Command::RunFilter { method, trajectory, source, particles, library, lambda, seed, out } => {
            let cfg = source.load()?;
            run_filter(&cfg, method, &trajectory, particles, library.as_deref(), lambda, seed, &out)?;
        }
        Command::Bench { command } => bench(command)?,
    }
    Ok(())
}

/// `<dir>/../<name>`, or `<dir>.<name>` when `dir` has no parent.
fn sibling(dir: &Path, name: &str) -> PathBuf {
    match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.join(name),
        _ => PathBuf::from(name),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_filter(
    cfg: &ExperimentConfig,
    method: Method,
    trajectory: &Path,
    particles: Option<usize>,
    library: Option<&Path>,
    lambda: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let traj = Trajectory::read_csv(trajectory, 0)?;
    let spec = &cfg.model;
    let n = particles.unwrap_or(cfg.sweep.particles[0]);
    let seed = seed.unwrap_or(cfg.seed);
    let obs = &traj.observations;
    let result: FilterResult = match method {
        Method::Enkf => enkf_filter(spec, obs, n, seed)?,
        Method::Sir => sir_filter(spec, obs, n, seed)?,
        Method::Otf => otf_filter(spec, obs, n, &cfg.otf, seed)?,
        Method::Aotf => {
            let dir = library.ok_or_else(|| Error::Argument("--library is required for aotf".into()))?;
            let lib = MedoidLibrary::load(dir)?;
            let mut amortize = cfg.amortize.clone();
            amortize.online_particles = n;
            amortize.clusters = lib.len();
            if let Some(l) = lambda {
                amortize.lambda = l;
            }
            let run = aotf_filter(spec, obs, &lib, &amortize, seed)?;
            write_weights_csv(&out.join("weights.csv"), &run.weights)?;
            println!("online gradient evaluations: {}", run.gradient_evaluations);
            run.result
        }
    };
    write_means_csv(&out.join("means.csv"), &result.means())?;
    result
        .posteriors
        .last()
        .expect("at least one step was filtered")
        .write_csv(&out.join("final_ensemble.csv"))?;
    let timings: Vec<TimingRow> = result
        .per_step_ms
        .iter()
        .enumerate()
        .map(|(t, &ms)| TimingRow {
            key: format!("step={}", t + 1),
            method,
            particles: n,
            total_ms: ms,
            mean_step_ms: ms,
        })
        .collect();
    aotf::bench::write_rows(&out.join("timings.csv"), &timings, &TIMING_COLUMNS)?;
    Manifest::new(
        cfg,
        &format!("run-filter {method}"),
        result.steps(),
        0,
        vec!["means.csv".into(), "final_ensemble.csv".into(), "timings.csv".into()],
    )
    .write(&out.join("manifest.toml"))?;
    println!(
        "{method}: {} steps with N = {n} in {:.1} ms, outputs in {}",
        result.steps(),
        result.total_ms(),
        out.display()
    );
    Ok(())
}

fn bench(command: BenchCommand) -> Result<()> {
    match command {
        BenchCommand::Run { source, out } => {
            let cfg = source.load()?;
            let summary = run_experiment_with(&cfg, &out, |row| match (row.status, row.mean_w2) {
                (RowStatus::Ok, Some(w2)) => eprintln!("{}  mean W2 {w2:.4}", row.key()),
                _ => eprintln!("{}  FAILED: {}", row.key(), row.error),
            })?;
            println!(
                "{} rows computed, {} skipped, {} failed; results in {}",
                summary.computed,
                summary.skipped,
                summary.failed,
                out.display()
            );
        }
        BenchCommand::Plotdata { rows, axis, timings, out } => {
            let eval = read_eval_rows(&rows)?;
            let timing_path = timings.unwrap_or_else(|| sibling(&rows, "timings.csv"));
            let timing_rows: Vec<TimingRow> = if axis == Axis::Time || timing_path.exists() {
                read_rows(&timing_path)?
            } else {
                Vec::new()
            };
            let csv = plotdata_csv(&emit_plotdata(&eval, &timing_rows, axis)?, axis);
            match out {
                Some(path) => write_text(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        BenchCommand::Truth { source, out } => {
            let cfg = source.load()?;
            let files = run_truth(&cfg, &out)?;
            println!("wrote {} files under {}", files.len(), out.join("truth").display());
        }
    }
    Ok(())
}
