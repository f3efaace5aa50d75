//! Drives every CLI subcommand on a tiny configuration so outputs of two
//! runs can be compared byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

const CONFIG: &str = r#"
name = "determinism"
methods = ["aotf", "otf", "enkf", "sir"]
steps = 3
repetitions = 2
seed = 11
truth_particles = 400
eval_cap = 100

[model]
kind = "lin_quad"
half_blocks = 1
state_dim = 2
obs_dim = 2
prior_mean = [0.0, 0.0]
prior_std = 1.0

[sweep]
particles = [40]
clusters = [2]
lambda = [1.0, inf]
metric = ["w2", "mmd"]

[otf.train]
outer_iterations = 20
inner_t_steps = 2
batch_size = 16

[otf.train.architecture]
f_hidden = [8]
t_hidden = [8]

[amortize]
library_size = 4
clusters = 2
offline_particles = 40
steps_per_simulation = 2
prior_mean_range = [0.0, 1.0]
prior_std_range = [0.5, 1.5]
seed = 3
"#;

fn aotf(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_aotf"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "aotf {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn run_everything(root: &Path, config: &Path) {
    let cfg = p(config);
    let traj = root.join("traj.csv");
    aotf(&["simulate", "--config", cfg, "--out", p(&traj)]);
    let records = root.join("records");
    aotf(&["build-library", "--config", cfg, "--out", p(&records)]);
    aotf(&[
        "train-otf",
        "--config",
        cfg,
        "--data",
        p(&records.join("record_00000.csv")),
        "--out",
        p(&root.join("map.bin")),
    ]);
    let library = root.join("library");
    aotf(&["cluster", "--config", cfg, "--records", p(&records), "--metric", "w2", "--k", "2", "--out", p(&library)]);
    aotf(&[
        "cluster",
        "--config",
        cfg,
        "--records",
        p(&records),
        "--metric",
        "tdist",
        "--k",
        "2",
        "--out",
        p(&root.join("library_t")),
    ]);
    for method in ["aotf", "otf", "enkf", "sir"] {
        aotf(&[
            "run-filter",
            "--config",
            cfg,
            "--method",
            method,
            "--trajectory",
            p(&traj),
            "--library",
            p(&library),
            "--lambda",
            "inf",
            "--particles",
            "30",
            "--out",
            p(&root.join(format!("filter_{method}"))),
        ]);
    }
    let bench = root.join("bench");
    aotf(&["bench", "run", "--config", cfg, "--out", p(&bench)]);
    for axis in ["N", "K", "time"] {
        aotf(&[
            "bench",
            "plotdata",
            "--rows",
            p(&bench.join("rows.csv")),
            "--axis",
            axis,
            "--out",
            p(&root.join(format!("plot_{axis}.csv"))),
        ]);
    }
    aotf(&["bench", "truth", "--config", cfg, "--out", p(&root.join("truth"))]);
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(root, &path, out);
        } else {
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
        }
    }
}

fn is_wall_clock(path: &Path) -> bool {
    let name = path.file_name().unwrap().to_str().unwrap();
    name == "timings.csv" || name.starts_with("plot_time")
}

/// Run everything twice under `tmp` and compare. Returns the number of
/// files compared and the rows.csv text, or a description of the first
/// mismatch.
pub fn compare_two_runs(tmp: &Path) -> Result<(usize, String), String> {
    let config = tmp.join("config.toml");
    std::fs::write(&config, CONFIG).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.join("a"), tmp.join("b"));
    for root in [&a, &b] {
        std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
        run_everything(root, &config);
    }
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    collect(&a, &a, &mut fa);
    collect(&b, &b, &mut fb);
    if fa.keys().ne(fb.keys()) {
        return Err("the two runs wrote different file sets".into());
    }
    let mut compared = 0;
    for (name, bytes) in &fa {
        if is_wall_clock(name) {
            continue;
        }
        if bytes != &fb[name] {
            return Err(format!("{} differs between runs", name.display()));
        }
        compared += 1;
    }
    let rows = String::from_utf8(fa[Path::new("bench/rows.csv")].clone()).map_err(|e| e.to_string())?;
    Ok((compared, rows))
}
