//! End-to-end pipeline on a tiny LinQuad problem: offline library, file
//! round-trips, online A-OTF and evaluation against the oracle.

use aotf::amortize::{aotf_filter, build_library, offline_stage, read_weights_csv, write_weights_csv, AmortizeConfig};
use aotf::baselines::{enkf_filter, ground_truth, sir_filter};
use aotf::bench::evaluate_w2;
use aotf::metricspace::library::{load_records, save_records};
use aotf::metricspace::{distance_matrix, DistanceMatrix, DistanceOptions, MedoidLibrary, MetricKind};
use aotf::otf::{otf_filter, Architecture, OtfFilterConfig, OtfTrainConfig, TransportMapModel};
use aotf::ssm::{simulate, ModelSpec, Trajectory};

fn small_otf() -> OtfFilterConfig {
    OtfFilterConfig {
        train: OtfTrainConfig {
            outer_iterations: 40,
            inner_t_steps: 2,
            batch_size: 32,
            architecture: Architecture {
                f_hidden: vec![8],
                t_hidden: vec![8],
            },
            ..Default::default()
        },
        ..Default::default()
    }
}

fn small_amortize() -> AmortizeConfig {
    AmortizeConfig {
        library_size: 6,
        clusters: 3,
        offline_particles: 64,
        online_particles: 64,
        steps_per_simulation: 3,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn offline_and_online_stages_round_trip_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ModelSpec::linquad(1, 0.9, 0.1, 0.0, 1.0).unwrap();
    let cfg = small_amortize();
    let records = build_library(&spec, &cfg, &small_otf()).unwrap();
    assert_eq!(records.len(), 6);

    let rec_dir = tmp.path().join("records");
    save_records(&rec_dir, &records).unwrap();
    let reloaded = load_records(&rec_dir).unwrap();
    assert_eq!(reloaded.len(), records.len());
    for (a, b) in records.iter().zip(&reloaded) {
        assert_eq!(a.map.to_bytes(), b.map.to_bytes());
        assert_eq!(a.samples.x.as_slice(), b.samples.x.as_slice());
    }

    let d = distance_matrix(&records, MetricKind::W2, &DistanceOptions::default(), 1).unwrap();
    let d_path = tmp.path().join("distances.csv");
    d.write_csv(&d_path).unwrap();
    let d2 = DistanceMatrix::read_csv(&d_path).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            assert_eq!(d.get(i, j), d2.get(i, j));
        }
    }

    let (_, library) = offline_stage(&records, &cfg).unwrap();
    let lib_dir = tmp.path().join("library");
    library.save(&lib_dir).unwrap();
    let library = MedoidLibrary::load(&lib_dir).unwrap();
    assert_eq!(library.len(), 3);

    let traj = simulate(&spec, 4, 9).unwrap();
    let traj_path = tmp.path().join("traj.csv");
    traj.write_csv(&traj_path).unwrap();
    let traj = Trajectory::read_csv(&traj_path, 9).unwrap();

    let run = aotf_filter(&spec, &traj.observations, &library, &cfg, 3).unwrap();
    assert_eq!(run.result.steps(), 4);
    assert_eq!(run.gradient_evaluations, 0);
    let w_path = tmp.path().join("weights.csv");
    write_weights_csv(&w_path, &run.weights).unwrap();
    let weights = read_weights_csv(&w_path).unwrap();
    assert_eq!(weights.len(), 4);
    for (a, b) in weights.iter().zip(&run.weights) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    let truth = ground_truth(&spec, &traj.observations, 2000, 1).unwrap();
    let (per_step, mean) = evaluate_w2(&run.result, &truth, 64, 2, 0).unwrap();
    assert_eq!(per_step.len(), 4);
    assert!(mean.is_finite() && mean >= 0.0);
}

#[test]
fn every_filter_runs_on_the_same_trajectory() {
    let spec = ModelSpec::linquad(1, 0.9, 0.1, 0.0, 1.0).unwrap();
    let traj = simulate(&spec, 3, 2).unwrap();
    let truth = ground_truth(&spec, &traj.observations, 1000, 1).unwrap();
    let results = [
        enkf_filter(&spec, &traj.observations, 100, 1).unwrap(),
        sir_filter(&spec, &traj.observations, 100, 1).unwrap(),
        otf_filter(&spec, &traj.observations, 100, &small_otf(), 1).unwrap(),
    ];
    for r in &results {
        assert_eq!(r.steps(), 3);
        let (_, mean) = evaluate_w2(r, &truth, 100, 0, 0).unwrap();
        assert!(mean.is_finite());
    }
}

#[test]
fn saved_maps_reload_with_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let model = TransportMapModel::new(2, 2, &Architecture::default(), 7).unwrap();
    let path = tmp.path().join("map.bin");
    model.save(&path).unwrap();
    let back = TransportMapModel::load(&path).unwrap();
    let x = [0.3, -1.2, 2.0, 0.1];
    let y = [1.0, 0.5];
    assert_eq!(model.transport_all(&x, &y).unwrap(), back.transport_all(&x, &y).unwrap());
}
