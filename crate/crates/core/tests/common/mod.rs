//! Independent reference computations shared by the integration tests.
//! Nothing at this level calls into the code under test; `gradcheck` drives
//! the learner through finite differences.
#![allow(dead_code)]

pub mod gradcheck;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Euclidean projection of `v` onto `{x >= 0, sum x = mass}`.
pub fn project_simplex(v: &mut [f64], mass: f64) {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let t = (cumulative - mass) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Relaxed-OT objective written out with plain loops.
pub fn rot_objective(q: &Array2<f64>, p: &Array2<f64>, lambda1: f64, lambda2: f64, floor: f64) -> f64 {
    let (n, k) = q.dim();
    let mut total = 0.0;
    let mut beta = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            let x = q[[i, j]];
            total += x * -(p[[i, j]].max(floor)).ln();
            if x > 0.0 {
                total += lambda1 * x * x.ln();
            }
            beta[j] += x;
        }
    }
    for b in beta {
        total += lambda2 / k as f64 * (1.0 / (k as f64 * b)).ln();
    }
    total
}

/// Minimizes the relaxed-OT objective by accelerated projected gradient
/// descent over `{Q >= floor_q, Q 1 = 1/N}` (the column marginal is implied
/// by Q). The small lower bound keeps the entropy gradient finite and moves
/// the optimum by at most `floor_q` per entry. Backtracking on the quadratic
/// upper bound, momentum restarted whenever the objective goes up.
pub fn rot_projected_gradient(p: &Array2<f64>, lambda1: f64, lambda2: f64, floor: f64, steps: usize) -> Array2<f64> {
    const FLOOR_Q: f64 = 1e-12;
    let (n, k) = p.dim();
    let row_mass = 1.0 / n as f64;
    let cost: Vec<f64> = p.iter().map(|&x| -(x.max(floor)).ln()).collect();
    let objective = |q: &[f64]| {
        let mut total = 0.0;
        let mut beta = vec![0.0; k];
        for (idx, &x) in q.iter().enumerate() {
            total += x * cost[idx] + lambda1 * x * x.ln();
            beta[idx % k] += x;
        }
        total + beta.iter().map(|&b| lambda2 / k as f64 * (1.0 / (k as f64 * b)).ln()).sum::<f64>()
    };
    let gradient = |q: &[f64], out: &mut [f64]| {
        let mut beta = vec![0.0; k];
        for (idx, &x) in q.iter().enumerate() {
            beta[idx % k] += x;
        }
        for (idx, &x) in q.iter().enumerate() {
            out[idx] = cost[idx] + lambda1 * (x.ln() + 1.0) - lambda2 / (k as f64 * beta[idx % k]);
        }
    };
    let project = |q: &mut [f64]| {
        // shift so the bound becomes zero, project, shift back
        for row in q.chunks_mut(k) {
            row.iter_mut().for_each(|x| *x -= FLOOR_Q);
            project_simplex(row, row_mass - k as f64 * FLOOR_Q);
            row.iter_mut().for_each(|x| *x += FLOOR_Q);
        }
    };

    let len = n * k;
    let mut x = vec![row_mass / k as f64; len];
    let mut value = objective(&x);
    let mut y = x.clone();
    let mut grad = vec![0.0; len];
    let mut trial = vec![0.0; len];
    let mut momentum = 1.0f64;
    let mut eta = 1e-2;
    for _ in 0..steps {
        let y_value = objective(&y);
        gradient(&y, &mut grad);
        let mut accepted = None;
        while eta > 1e-40 {
            for idx in 0..len {
                trial[idx] = y[idx] - eta * grad[idx];
            }
            project(&mut trial);
            let (mut lin, mut sq) = (0.0, 0.0);
            for idx in 0..len {
                let d = trial[idx] - y[idx];
                lin += d * grad[idx];
                sq += d * d;
            }
            let trial_value = objective(&trial);
            if trial_value.is_finite() && trial_value <= y_value + lin + sq / (2.0 * eta) + 1e-15 {
                accepted = Some(trial_value);
                break;
            }
            eta *= 0.5;
        }
        let Some(new_value) = accepted else { break };
        if new_value > value {
            momentum = 1.0;
            y.copy_from_slice(&x);
            continue;
        }
        let moved = x.iter().zip(&trial).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let c = (momentum - 1.0) / t_next;
        for idx in 0..len {
            y[idx] = trial[idx] + c * (trial[idx] - x[idx]);
        }
        project(&mut y);
        x.copy_from_slice(&trial);
        momentum = t_next;
        value = new_value;
        eta *= 1.1;
        if moved < 1e-15 {
            break;
        }
    }
    Array2::from_shape_vec((n, k), x).expect("n * k entries")
}

/// Random row-stochastic matrix: softmax of Gaussian-ish logits at `scale`.
pub fn random_predictions(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> Array2<f64> {
    let mut p = Array2::zeros((n, k));
    for i in 0..n {
        let logits: Vec<f64> = (0..k).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..k {
            p[[i, j]] = (logits[j] - m).exp() / z;
        }
    }
    p
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
