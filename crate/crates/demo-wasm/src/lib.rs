//! Browser bindings for three small interactive views:
//! softmax library weights as a function of λ, one bimodal filtering run on
//! the two-dimensional quadratic-observation model, and K-medoids on points
//! of the line. Each binding wraps a plain Rust function that is also
//! tested natively.

use aotf::amortize::softmax_weights;
use aotf::baselines::{enkf_filter, sir_filter};
use aotf::bench::Method;
use aotf::metricspace::{k_medoids, DistanceMatrix, KMedoidsOptions, MetricKind};
use aotf::ssm::{simulate, ModelSpec};
use aotf::Result;
use wasm_bindgen::prelude::*;

fn js(e: aotf::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Weights `w_k ∝ exp(-λ ρ_k)`; λ = `Infinity` picks the nearest entry.
pub fn weights(distances: &[f64], lambda: f64) -> Result<Vec<f64>> {
    Ok(softmax_weights(distances, lambda)?.as_slice().to_vec())
}

#[wasm_bindgen(js_name = softmaxWeights)]
pub fn softmax_weights_js(distances: Vec<f64>, lambda: f64) -> std::result::Result<Vec<f64>, JsError> {
    weights(&distances, lambda).map_err(js)
}

/// Filter a simulated trajectory of the 2-D quadratic-observation model
/// with EnKF or SIR. Returns `[x_1, x_2, p_11, p_12, p_21, p_22, ...]`:
/// the hidden state at the last step followed by the posterior particles.
pub fn quadratic_run(method: &str, particles: usize, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let spec = ModelSpec::linquad(1, 0.9, 0.1, 0.0, 1.0)?;
    let traj = simulate(&spec, steps.max(1), seed)?;
    let result = match method.parse::<Method>()? {
        Method::Enkf => enkf_filter(&spec, &traj.observations, particles, seed ^ 0x5eed)?,
        Method::Sir => sir_filter(&spec, &traj.observations, particles, seed ^ 0x5eed)?,
        other => return Err(aotf::Error::Argument(format!("the demo runs enkf or sir, not {other}"))),
    };
    let mut out = traj.states.last().expect("at least one step").clone();
    out.extend_from_slice(result.posteriors.last().expect("at least one step").as_slice());
    Ok(out)
}

#[wasm_bindgen(js_name = quadraticRun)]
pub fn quadratic_run_js(method: &str, particles: usize, steps: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    quadratic_run(method, particles, steps, seed as u64).map_err(js)
}

/// K-medoids on points of the line with `|a - b|` distances. Returns the
/// cluster label of every point followed by the medoid indices.
pub fn medoids_on_line(points: &[f64], k: usize) -> Result<Vec<usize>> {
    let m = points.len();
    let entries = points.iter().flat_map(|a| points.iter().map(move |b| (a - b).abs())).collect();
    let d = DistanceMatrix::from_entries(MetricKind::W2, m, entries, 0)?;
    let c = k_medoids(&d, k, &KMedoidsOptions::default())?;
    let mut out = c.assignment;
    out.extend(c.medoids);
    Ok(out)
}

#[wasm_bindgen(js_name = medoidsOnLine)]
pub fn medoids_on_line_js(points: Vec<f64>, k: usize) -> std::result::Result<Vec<u32>, JsError> {
    Ok(medoids_on_line(&points, k).map_err(js)?.into_iter().map(|v| v as u32).collect())
}
