//! Browser demo: long-tail count curves, class marginals picked by the
//! transport solvers, and k-means on 2-D blobs.
//!
//! Every export returns JSON so the page stays plain JavaScript.

use imbanid::eval::{ari, clustering_accuracy, kmeans, nmi};
use imbanid::longtail::longtail_counts;
use imbanid::rot::{self, PredictionMatrix, RotConfig, Variant};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

fn error_json(message: impl std::fmt::Display) -> String {
    format!("{{\"error\":{}}}", serde_json::Value::String(message.to_string()))
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub counts: Vec<usize>,
    pub total: usize,
}

pub fn curve(n_max: usize, classes: usize, gamma: f64) -> imbanid::error::Result<Curve> {
    let counts = longtail_counts(n_max, classes, gamma)?;
    Ok(Curve { total: counts.total(), counts: counts.as_slice().to_vec() })
}

/// Per-class counts for `classes` classes decaying from `n_max` by `gamma`.
#[wasm_bindgen]
pub fn longtail_curve(n_max: usize, classes: usize, gamma: f64) -> String {
    curve(n_max, classes, gamma).map_or_else(error_json, |c| json(&c))
}

#[derive(Debug, Serialize)]
pub struct Marginals {
    /// True class fractions of the simulated samples.
    pub truth: Vec<f64>,
    pub rot: Vec<f64>,
    pub cot: Vec<f64>,
    pub mot: Vec<f64>,
    /// Fraction of samples whose pseudo-label is their true class.
    pub accuracy: [f64; 3],
}

/// Noisy classifier outputs for a long-tailed sample: the true class gets
/// `signal` added to standard-normal logits.
pub fn simulated_predictions(counts: &[usize], signal: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let k = counts.len();
    let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    let mut p = Array2::zeros((labels.len(), k));
    for (mut row, &c) in p.rows_mut().into_iter().zip(&labels) {
        row.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        row[c] += signal;
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    (p, labels)
}

pub fn marginals(
    classes: usize,
    gamma: f64,
    signal: f64,
    lambda2: f64,
    seed: u64,
) -> imbanid::error::Result<Marginals> {
    let counts = longtail_counts(120, classes, gamma)?;
    let (p, labels) = simulated_predictions(counts.as_slice(), signal, seed);
    let n = labels.len() as f64;
    let p = PredictionMatrix::new(p)?;
    let mut solved = Vec::new();
    for variant in [Variant::Rot, Variant::Cot, Variant::Mot] {
        let cfg = RotConfig { lambda2, variant, ..RotConfig::default() };
        let (plan, _) = rot::solve(&p, &cfg)?;
        let pseudo = rot::pseudo_labels_from_plan(&plan);
        let hits = pseudo.hard.iter().zip(&labels).filter(|(a, b)| a == b).count();
        solved.push((plan.beta.to_vec(), hits as f64 / n));
    }
    let [(rot, a0), (cot, a1), (mot, a2)]: [(Vec<f64>, f64); 3] = solved.try_into().expect("three variants");
    Ok(Marginals {
        truth: counts.as_slice().iter().map(|&c| c as f64 / n).collect(),
        rot,
        cot,
        mot,
        accuracy: [a0, a1, a2],
    })
}

/// Class marginals chosen by ROT, COT and MOT on simulated long-tailed
/// predictions.
#[wasm_bindgen]
pub fn solver_marginals(classes: usize, gamma: f64, signal: f64, lambda2: f64, seed: u32) -> String {
    marginals(classes, gamma, signal, lambda2, seed.into()).map_or_else(error_json, |m| json(&m))
}

#[derive(Debug, Serialize)]
pub struct Blobs {
    pub points: Vec<[f64; 2]>,
    pub truth: Vec<usize>,
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn blobs(k: usize, per_class: usize, spread: f64, seed: u64) -> imbanid::error::Result<Blobs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spread.max(0.0)).map_err(|e| imbanid::error::Error::Config(e.to_string()))?;
    let mut points = Vec::with_capacity(k * per_class);
    let mut truth = Vec::with_capacity(k * per_class);
    for c in 0..k {
        let angle = std::f64::consts::TAU * c as f64 / k as f64;
        let (cx, cy) = (angle.cos(), angle.sin());
        for _ in 0..per_class {
            points.push([cx + normal.sample(&mut rng), cy + normal.sample(&mut rng)]);
            truth.push(c);
        }
    }
    let x = Array2::from_shape_fn((points.len(), 2), |(i, j)| points[i][j]);
    let km = kmeans(x.view(), k, seed, 300, 1e-9)?;
    let assignment = km.partition.assignment;
    Ok(Blobs {
        acc: clustering_accuracy(&truth, &assignment)?,
        nmi: nmi(&truth, &assignment)?,
        ari: ari(&truth, &assignment)?,
        centroids: km.centroids.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
        points,
        truth,
        assignment,
    })
}

/// `k` Gaussian blobs on the unit circle, clustered with k-means.
#[wasm_bindgen]
pub fn kmeans_blobs(k: usize, per_class: usize, spread: f64, seed: u32) -> String {
    blobs(k, per_class, spread, seed.into()).map_or_else(error_json, |b| json(&b))
}
