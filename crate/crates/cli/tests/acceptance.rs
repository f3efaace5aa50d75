//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary is always printed.
//! Positional arguments select criteria by number, e.g.
//! `cargo test --release --test acceptance -- 1 2 9`.
//!
//! Criteria that fail are reported but do not fail the target unless
//! `AOTF_ACCEPTANCE_STRICT=1` is set.
//!
//! Pre-trained libraries and benchmark rows are cached under the cargo
//! target tmp dir, keyed by configuration hash; set `AOTF_ACCEPTANCE_FRESH=1`
//! to rebuild them.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use aotf::amortize::{aotf_filter, argmin, softmax_weights};
use aotf::baselines::{enkf_filter, ground_truth, FilterResult};
use aotf::bench::{preset, read_eval_rows, read_rows, run_experiment_with, ExperimentConfig, Method, RowStatus, TimingRow};
use aotf::ensemble::{JointSample, StateEnsemble};
use aotf::metricspace::{k_medoids, w2_empirical, DistanceMatrix, KMedoidsOptions, MedoidLibrary, MetricKind};
use aotf::otf::{conditioning_step, objective_with_grads, otf_filter, train_otf, Architecture, OtfFilterConfig, OtfTrainConfig, TransportMapModel};
use aotf::rng::{permutation, rng_from_seed, standard_normal};
use aotf::ssm::{simulate, LinearParams, ModelSpec};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 11] = [
    (1, "W2 matches exhaustive permutation search", c1_w2_oracle),
    (2, "K-medoids matches exhaustive subset search", c2_kmedoids_oracle),
    (3, "objective gradients match central differences", c3_gradients),
    (4, "identity map under an uninformative likelihood", c4_identity_map),
    (5, "linear-Gaussian posterior means track the Kalman filter", c5_linear_gaussian),
    (6, "A-OTF keeps the sign bimodality that EnKF loses", c6_bimodality),
    (7, "A-OTF accuracy within 1.5x of OTF", c7_aotf_vs_otf),
    (8, "A-OTF online step at least 10x faster, no gradients", c8_speedup),
    (9, "softmax weights stay on the simplex", c9_weights),
    (10, "A-OTF robust to the prior while SIR degrades", c10_robustness),
    (11, "CLI outputs are bit-identical across re-runs", c11_determinism),
];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let clock = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!(
            "criterion {id:>2} {} {name}: {} [{:.1} s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            clock.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        return ExitCode::SUCCESS;
    }
    println!("{failed} criteria failed");
    if std::env::var("AOTF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * standard_normal(rng)).collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// 200 random pairs of equal-size clouds with 1 to 6 points in 1 to 3
/// dimensions. Tolerance 1e-12 absolute.
fn c1_w2_oracle() -> Outcome {
    let mut rng = rng_from_seed(101);
    let mut worst: f64 = 0.0;
    let pairs = 200;
    for trial in 0..pairs {
        let n = 1 + trial % 6;
        let dim = 1 + trial % 3;
        let a = normal_vec(&mut rng, n * dim, 2.0);
        let b = normal_vec(&mut rng, n * dim, 2.0);
        let brute = permutations(n)
            .iter()
            .map(|p| {
                (0..n)
                    .map(|i| (0..dim).map(|d| (a[i * dim + d] - b[p[i] * dim + d]).powi(2)).sum::<f64>())
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        let brute = (brute / n as f64).sqrt();
        let got = w2_empirical(&a, &b, dim, n, trial as u64).expect("w2");
        worst = worst.max((got - brute).abs());
    }
    outcome(worst <= 1e-12, format!("{pairs} pairs, max |error| {worst:.2e} (tol 1e-12)"))
}

fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << m)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
        .collect()
}

/// 60 random symmetric matrices (half Euclidean, half arbitrary) with
/// M = 2..=8 and every K. Tolerance 1e-12 relative to the optimum.
fn c2_kmedoids_oracle() -> Outcome {
    let mut rng = rng_from_seed(202);
    let matrices = 60;
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..matrices {
        let m = 2 + trial % 7;
        let mut e = vec![0.0; m * m];
        if trial % 2 == 0 {
            let pts = normal_vec(&mut rng, 2 * m, 3.0);
            for i in 0..m {
                for j in 0..m {
                    e[i * m + j] = ((pts[2 * i] - pts[2 * j]).powi(2) + (pts[2 * i + 1] - pts[2 * j + 1]).powi(2)).sqrt();
                }
            }
        } else {
            for i in 0..m {
                for j in i + 1..m {
                    let v: f64 = rng.random_range(0.0..10.0);
                    e[i * m + j] = v;
                    e[j * m + i] = v;
                }
            }
        }
        let d = DistanceMatrix::from_entries(MetricKind::W2, m, e, 0).expect("matrix");
        for k in 1..=m {
            let best = subsets(m, k)
                .iter()
                .map(|s| (0..m).map(|p| s.iter().map(|&c| d.get(p, c)).fold(f64::INFINITY, f64::min)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let got = k_medoids(&d, k, &KMedoidsOptions::default()).expect("k-medoids").total_cost;
            worst = worst.max((got - best).abs() / best.max(1.0));
            cases += 1;
        }
    }
    outcome(
        worst <= 1e-12,
        format!("{matrices} matrices, {cases} (M, K) cases, max relative gap {worst:.2e} (tol 1e-12)"),
    )
}

/// Every f and T parameter of three networks (hidden widths up to 16),
/// step 1e-5. Relative error |fd - g| / max(|fd|, |g|, 1e-5) <= 1e-4.
fn c3_gradients() -> Outcome {
    let mut rng = rng_from_seed(303);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let archs = [(vec![16], vec![16], 1, 1), (vec![8, 8], vec![12], 2, 2), (vec![16, 16], vec![16, 8], 3, 1)];
    for (i, (f_hidden, t_hidden, n, ny)) in archs.into_iter().enumerate() {
        let arch = Architecture { f_hidden, t_hidden };
        let mut model = TransportMapModel::new(n, ny, &arch, 10 + i as u64).expect("model");
        for p in model.t_net.params_mut().iter_mut().chain(model.f_net.params_mut()) {
            *p += 0.2 * standard_normal(&mut rng);
        }
        let data = JointSample::new(
            StateEnsemble::new(n, normal_vec(&mut rng, 64 * n, 1.5)).unwrap(),
            StateEnsemble::new(ny, normal_vec(&mut rng, 64 * ny, 1.0)).unwrap(),
        )
        .unwrap();
        model.fit_scaling(&data);
        let rows = 8;
        let xs = data.x.as_slice()[..rows * n].to_vec();
        let ys = data.y.as_slice()[..rows * ny].to_vec();
        let perm = permutation(rows, &mut rng);
        let g = objective_with_grads(&model, &xs, &ys, &perm, true, true).expect("grads");
        let value = |m: &TransportMapModel| objective_with_grads(m, &xs, &ys, &perm, false, false).unwrap().value;
        let h = 1e-5;
        for (net, grads) in [(0, g.f_grad.unwrap()), (1, g.t_grad.unwrap())] {
            for (k, &gk) in grads.iter().enumerate() {
                let (mut up, mut down) = (model.clone(), model.clone());
                let (pu, pd) = if net == 0 {
                    (up.f_net.params_mut(), down.f_net.params_mut())
                } else {
                    (up.t_net.params_mut(), down.t_net.params_mut())
                };
                pu[k] += h;
                pd[k] -= h;
                let fd = (value(&up) - value(&down)) / (2.0 * h);
                worst = worst.max((fd - gk).abs() / fd.abs().max(gk.abs()).max(1e-5));
                checked += 1;
            }
        }
    }
    outcome(worst <= 1e-4, format!("{checked} parameters, max relative error {worst:.2e} (tol 1e-4)"))
}

/// Y independent of X; 1-D, N = 2000, 2000 outer iterations. The mean
/// displacement E|T(X, Y) - X| over independent draws of X and Y (the
/// training sample re-paired by a permutation) must be at most 0.1 prior
/// std. The worst value at fixed y in {-2, ..., 2} is reported alongside.
fn c4_identity_map() -> Outcome {
    let mut rng = rng_from_seed(404);
    let n = 2000;
    let x = StateEnsemble::new(1, normal_vec(&mut rng, n, 1.0)).unwrap();
    let y = StateEnsemble::new(1, normal_vec(&mut rng, n, 1.0)).unwrap();
    let data = JointSample::new(x.clone(), y.clone()).unwrap();
    let cfg = OtfTrainConfig {
        outer_iterations: 2000,
        seed: 4,
        ..Default::default()
    };
    let model = train_otf(&data, &cfg).expect("training");
    let std = aotf::ensemble::empirical_variance(&x)[0].sqrt();
    let perm = permutation(n, &mut rng);
    let ys: Vec<f64> = perm.iter().map(|&i| y.as_slice()[i]).collect();
    let pushed = model.transport_batch(x.as_slice(), &ys).expect("transport");
    let mean = pushed.iter().zip(x.as_slice()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64 / std;
    let mut worst: f64 = 0.0;
    for obs in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let pushed = conditioning_step(&model, &x, &[obs]).unwrap();
        let disp = pushed.as_slice().iter().zip(x.as_slice()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        worst = worst.max(disp / std);
    }
    outcome(
        mean <= 0.1,
        format!("mean displacement {mean:.4} prior std (tol 0.1); worst at fixed y in [-2, 2]: {worst:.4}"),
    )
}

/// Scalar model x' = 0.9 x + 0.5 ξ, y = x + ξ, prior N(0, 1), 20 steps.
/// Error at each step is measured in units of max(|m_t|, σ_t) of the
/// Kalman posterior: OTF (N = 2000) within 0.10, EnKF (N = 1e5) within 0.05.
fn c5_linear_gaussian() -> Outcome {
    let (a, q, r) = (0.9, 0.5, 1.0);
    let spec = ModelSpec::linear(1, LinearParams { a, process_std: q, obs_std: r }, 0.0, 1.0).unwrap();
    let traj = simulate(&spec, 20, 505).unwrap();
    let (mut m, mut p) = (0.0, 1.0);
    let mut kalman = Vec::new();
    for y in &traj.observations {
        m *= a;
        p = a * a * p + q * q;
        let gain = p / (p + r * r);
        m += gain * (y[0] - m);
        p *= 1.0 - gain;
        kalman.push((m, p.sqrt()));
    }
    let worst = |res: &FilterResult| {
        res.means()
            .iter()
            .zip(&kalman)
            .map(|(est, (m, s))| (est[0] - m).abs() / m.abs().max(*s))
            .fold(0.0, f64::max)
    };
    let enkf = worst(&enkf_filter(&spec, &traj.observations, 100_000, 5).unwrap());
    let otf = worst(&otf_filter(&spec, &traj.observations, 2000, &OtfFilterConfig::default(), 5).unwrap());
    outcome(
        otf <= 0.10 && enkf <= 0.05,
        format!("max scaled mean error: OTF {otf:.4} (tol 0.10), EnKF {enkf:.4} (tol 0.05)"),
    )
}

/// 10^4 random draws with 1 to 12 distances, λ from {0, ∞, U(0, 50)} and
/// deliberate ties. Sum tolerance 1e-10.
fn c9_weights() -> Outcome {
    let mut rng = rng_from_seed(909);
    let mut violations = Vec::new();
    for draw in 0..10_000 {
        let k = rng.random_range(1..=12);
        let mut d: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
        if k > 2 && draw % 3 == 0 {
            let min = d.iter().copied().fold(f64::INFINITY, f64::min);
            let j = rng.random_range(0..k);
            d[j] = min;
        }
        let lambda = match draw % 4 {
            0 => 0.0,
            1 => f64::INFINITY,
            _ => rng.random_range(0.0..50.0),
        };
        let w = softmax_weights(&d, lambda).expect("weights");
        let w = w.as_slice();
        let sum: f64 = w.iter().sum();
        if w.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-10 {
            violations.push(format!("draw {draw}: off simplex"));
        }
        if lambda == 0.0 && w.iter().any(|&v| (v - 1.0 / k as f64).abs() > 1e-15) {
            violations.push(format!("draw {draw}: λ=0 not uniform"));
        }
        if lambda.is_infinite() {
            let first = d.iter().position(|&v| v == d.iter().copied().fold(f64::INFINITY, f64::min)).unwrap();
            if argmin(&d) != first || w[first] != 1.0 {
                violations.push(format!("draw {draw}: λ=∞ not one-hot at the first minimizer"));
            }
        }
    }
    outcome(
        violations.is_empty(),
        if violations.is_empty() { "10000 draws, no violations".to_string() } else { violations[..violations.len().min(3)].join("; ") },
    )
}

mod support;

/// Per-run cache directory under the cargo target tmp dir, keyed by a
/// configuration hash. `AOTF_ACCEPTANCE_FRESH=1` wipes it first.
fn cache_dir(name: &str, hash: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(format!("{name}-{}", &hash[..12]));
    if std::env::var("AOTF_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1") && dir.exists() {
        std::fs::remove_dir_all(&dir).expect("clear cache");
    }
    dir
}

fn progress(tag: &'static str) -> impl FnMut(&aotf::bench::EvalRow) {
    move |row| {
        if std::env::var_os("AOTF_PROGRESS").is_some() {
            eprintln!("[{tag}] {} rep {} mu0 {} sigma0 {}: {:?}", row.method, row.repetition, row.mu0, row.sigma0, row.mean_w2);
        }
    }
}

fn positive_fraction(e: &StateEnsemble) -> f64 {
    e.rows().filter(|r| r[0] > 0.0).count() as f64 / e.len() as f64
}

fn fractions(fs: &[f64]) -> String {
    fs.iter().map(|f| format!("{f:.2}")).collect::<Vec<_>>().join(" ")
}

/// LinQuad n = 1, α = 0.9, σ = 0.1, prior N(0.5, 1) per coordinate so the
/// EnKF gain is not identically zero, 10 steps of trajectory seed 77,
/// oracle SIR with 2·10^4 particles. Library: M = 30 records, 3 steps per
/// simulation, K = 5, λ = 1, ρ_W2. A step is oracle-bimodal when both signs
/// of X(1) hold at least 20% of the oracle. A-OTF (N = 2000) must keep both
/// signs at ≥ 20% on every oracle-bimodal step; EnKF (N = 2000) must hold
/// ≥ 95% in one sign on the final step.
fn c6_bimodality() -> Outcome {
    let spec = ModelSpec::linquad(1, 0.9, 0.1, 0.5, 1.0).unwrap();
    let traj = simulate(&spec, 10, 77).unwrap();
    let truth = ground_truth(&spec, &traj.observations, 20_000, 3).unwrap();
    let cfg = aotf::amortize::AmortizeConfig {
        library_size: 30,
        clusters: 5,
        lambda: 1.0,
        offline_particles: 2000,
        online_particles: 2000,
        steps_per_simulation: 3,
        seed: 11,
        ..Default::default()
    };
    let otf = OtfFilterConfig::default();
    let hash = {
        use std::hash::{Hash, Hasher};
        let mut h = std::hash::DefaultHasher::new();
        format!("{cfg:?}{otf:?}{spec:?}").hash(&mut h);
        format!("{:016x}", h.finish())
    };
    let dir = cache_dir("bimodality", &hash).join("records");
    let records = if dir.join("manifest.toml").exists() {
        aotf::metricspace::library::load_records(&dir).expect("cached records")
    } else {
        let records = aotf::amortize::build_library(&spec, &cfg, &otf).expect("library");
        aotf::metricspace::library::save_records(&dir, &records).expect("save records");
        records
    };
    let (_, library) = aotf::amortize::offline_stage(&records, &cfg).expect("offline stage");
    let run = aotf_filter(&spec, &traj.observations, &library, &cfg, 9).expect("A-OTF");
    let enkf = enkf_filter(&spec, &traj.observations, 2000, 5).expect("EnKF");
    let oracle: Vec<f64> = truth.posteriors.iter().map(positive_fraction).collect();
    let amortized: Vec<f64> = run.result.posteriors.iter().map(positive_fraction).collect();
    let bimodal = |f: f64| (0.2..=0.8).contains(&f);
    let steps: Vec<usize> = (0..oracle.len()).filter(|&t| bimodal(oracle[t])).collect();
    let kept = steps.iter().filter(|&&t| bimodal(amortized[t])).count();
    let last = positive_fraction(enkf.posteriors.last().unwrap());
    let enkf_one_sign = last.max(1.0 - last) >= 0.95;
    outcome(
        !steps.is_empty() && kept == steps.len() && enkf_one_sign,
        format!(
            "A-OTF bimodal on {kept}/{} oracle-bimodal steps, EnKF final one-sign mass {:.3} (tol 0.95); P(X1>0) oracle [{}] A-OTF [{}]",
            steps.len(),
            last.max(1.0 - last),
            fractions(&oracle),
            fractions(&amortized)
        ),
    )
}

/// The LinQuad n = 4 desk preset restricted to A-OTF (λ = 1, ρ_W2, K = 5)
/// and OTF, 20 steps, 5 repetitions at N = 2000. Shared by criteria 7 and 8.
fn linquad4_run() -> Result<(ExperimentConfig, PathBuf), String> {
    static RUN: OnceLock<Result<(ExperimentConfig, PathBuf), String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = preset("linquad4_desk").map_err(|e| e.to_string())?;
        cfg.methods = vec![Method::Aotf, Method::Otf];
        cfg.steps = 20;
        let dir = cache_dir("linquad4", &cfg.hash());
        let summary = run_experiment_with(&cfg, &dir, progress("linquad4")).map_err(|e| e.to_string())?;
        if summary.failed > 0 {
            return Err(format!("{} rows failed", summary.failed));
        }
        Ok((cfg, dir))
    })
    .clone()
}

fn mean_by_method<I: IntoIterator<Item = (Method, f64)>>(items: I) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (method, v) in items {
        let e = acc.entry(method.to_string()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Mean over repetitions of the per-run mean W2 to the oracle; ratio
/// A-OTF / OTF must be at most 1.5.
fn c7_aotf_vs_otf() -> Outcome {
    let (_, dir) = linquad4_run().expect("LinQuad n=4 run");
    let rows = read_eval_rows(&dir.join("rows.csv")).expect("rows");
    let means = mean_by_method(
        rows.iter()
            .filter(|r| r.status == RowStatus::Ok)
            .map(|r| (r.method, r.mean_w2.expect("ok rows carry W2"))),
    );
    let (a, o) = (means["aotf"], means["otf"]);
    outcome(a <= 1.5 * o, format!("mean W2: A-OTF {a:.4}, OTF {o:.4}, ratio {:.3} (tol 1.5)", a / o))
}

/// Per-step wall time from the shared run (A-OTF / OTF ≤ 0.1), and a direct
/// A-OTF run on the same library with the gradient counter checked.
fn c8_speedup() -> Outcome {
    let (cfg, dir) = linquad4_run().expect("LinQuad n=4 run");
    let timings: Vec<TimingRow> = read_rows(&dir.join("timings.csv")).expect("timings");
    let per_step = mean_by_method(timings.iter().map(|t| (t.method, t.mean_step_ms)));
    let (a, o) = (per_step["aotf"], per_step["otf"]);
    let library = MedoidLibrary::load(&dir.join("library").join("medoids_w2_k5")).expect("library");
    let traj = simulate(&cfg.model, 5, 808).unwrap();
    let mut amortize = cfg.amortize.clone();
    amortize.online_particles = 2000;
    let run = aotf_filter(&cfg.model, &traj.observations, &library, &amortize, 8).expect("A-OTF");
    outcome(
        a <= 0.1 * o && run.gradient_evaluations == 0,
        format!(
            "per-step ms: A-OTF {a:.1}, OTF {o:.1}, ratio {:.4} (tol 0.1); online gradient evaluations {}",
            a / o,
            run.gradient_evaluations
        ),
    )
}

/// The LinQuad n = 1 desk preset restricted to A-OTF (λ = 1) and SIR at
/// N = 2000 over μ0 ∈ {0, 2, 4}, σ0 ∈ {1, 3, 5}, one fixed library drawn
/// over those prior ranges. A-OTF max/min mean W2 over the grid must be at
/// most 2; SIR mean W2 at (4, 5) must be at least twice that at (0, 1).
fn c10_robustness() -> Outcome {
    let mut cfg = preset("linquad1_desk").expect("preset");
    cfg.methods = vec![Method::Aotf, Method::Sir];
    cfg.sweep.lambda = vec![1.0];
    let dir = cache_dir("robustness", &cfg.hash());
    let summary = run_experiment_with(&cfg, &dir, progress("robustness")).expect("robustness sweep");
    assert_eq!(summary.failed, 0, "rows failed");
    let rows = read_eval_rows(&dir.join("rows.csv")).expect("rows");
    let w2 = |method: Method, mu0: f64, sigma0: f64| {
        rows.iter()
            .find(|r| r.method == method && r.mu0 == mu0 && r.sigma0 == sigma0)
            .and_then(|r| r.mean_w2)
            .expect("row present")
    };
    let grid: Vec<(f64, f64)> = cfg.prior_grid().into_iter().map(|(m, s)| (m.unwrap(), s.unwrap())).collect();
    let amortized: Vec<f64> = grid.iter().map(|&(m, s)| w2(Method::Aotf, m, s)).collect();
    let spread = amortized.iter().copied().fold(0.0, f64::max) / amortized.iter().copied().fold(f64::INFINITY, f64::min);
    let (base, extreme) = (w2(Method::Sir, 0.0, 1.0), w2(Method::Sir, 4.0, 5.0));
    let cells = grid
        .iter()
        .zip(&amortized)
        .map(|((m, s), a)| format!("({m},{s}):{a:.3}"))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        spread <= 2.0 && extreme >= 2.0 * base,
        format!(
            "A-OTF max/min W2 {spread:.2} (tol 2); SIR W2 (0,1) {base:.3} -> (4,5) {extreme:.3}, ratio {:.2} (tol >= 2); A-OTF {cells}",
            extreme / base
        ),
    )
}

/// Every CLI subcommand twice on a tiny configuration under a fixed
/// SOURCE_DATE_EPOCH; all outputs except wall-clock timings must match.
fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tmp dir");
    match support::compare_two_runs(tmp.path()) {
        Ok((compared, _)) => outcome(compared > 40, format!("{compared} files bit-identical across two runs")),
        Err(e) => outcome(false, e),
    }
}
