//! Relaxed optimal-transport pseudo-labeling.
//!
//! Minimizes
//!
//! ```text
//! <Q, C> + lambda1 * sum Q log Q + lambda2 * KL(1/K || beta)
//! s.t. Q 1 = 1/N,  Q^T 1 = beta,  Q >= 0,  sum beta = 1
//! ```
//!
//! with `C = -log P`. Rows are scaled as in Sinkhorn and columns by the
//! optimal class marginal for the current row potential, all in the log
//! domain. The COT, EOT and MOT variants swap the class-marginal rule.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::PseudoLabelSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// KL-relaxed class marginal.
    Rot,
    /// Class marginal fixed to uniform.
    Cot,
    /// Class marginal regularized by KL(beta || uniform).
    Eot,
    /// Class marginal tracked by a moving average of prediction argmax counts.
    Mot,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rot" => Ok(Variant::Rot),
            "cot" => Ok(Variant::Cot),
            "eot" => Ok(Variant::Eot),
            "mot" => Ok(Variant::Mot),
            other => Err(Error::Config(format!("unknown solver variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub outer_iters: usize,
    pub sinkhorn_iters: usize,
    pub marginal_tol: f64,
    pub variant: Variant,
    pub mot_momentum: f64,
    pub prob_floor: f64,
}

impl Default for RotConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.05,
            lambda2: 2.0,
            outer_iters: 10,
            sinkhorn_iters: 1000,
            marginal_tol: 1e-6,
            variant: Variant::Rot,
            mot_momentum: 0.9,
            prob_floor: 1e-8,
        }
    }
}

impl RotConfig {
    /// Default for balanced class distributions.
    pub fn balanced() -> Self {
        Self { lambda2: 7.0, ..Self::default() }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.lambda1 > 0.0) {
            return Err(Error::Config("lambda1 must be positive".into()));
        }
        if !(self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda2 must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.mot_momentum) && self.mot_momentum != 1.0 {
            return Err(Error::Config("mot_momentum must be in [0, 1)".into()));
        }
        if !(self.marginal_tol > 0.0) || !(self.prob_floor > 0.0) {
            return Err(Error::Config("marginal_tol and prob_floor must be positive".into()));
        }
        if self.variant == Variant::Rot && self.lambda2 == 0.0 {
            return Err(Error::Config("the relaxed solver needs lambda2 > 0".into()));
        }
        Ok(())
    }
}

/// Row-stochastic class probabilities, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix(Array2<f64>);

impl PredictionMatrix {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        if p.nrows() == 0 || p.ncols() == 0 {
            return Err(Error::Shape("prediction matrix is empty".into()));
        }
        for (i, row) in p.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Shape(format!("row {i} has entries outside [0, 1]")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Shape(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self(p))
    }

    /// Normalizes each row of a non-negative matrix onto the simplex.
    pub fn from_unnormalized(mut p: Array2<f64>) -> Result<Self> {
        for mut row in p.rows_mut() {
            let s = row.sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Shape("row with non-positive mass".into()));
            }
            row /= s;
        }
        Self::new(p)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn n_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub q: Array2<f64>,
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub h: f64,
}

impl TransportPlan {
    /// `max_i |sum_j Q_ij - alpha_i|`
    pub fn row_residual(&self) -> f64 {
        max_abs_diff(&self.q.sum_axis(Axis(1)), &self.alpha)
    }

    /// `max_j |sum_i Q_ij - beta_j|`
    pub fn col_residual(&self) -> f64 {
        max_abs_diff(&self.q.sum_axis(Axis(0)), &self.beta)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub objective: Vec<f64>,
    pub row_residual: Vec<f64>,
    pub col_residual: Vec<f64>,
    pub sinkhorn_iters: Vec<usize>,
    pub beta: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl SolverTrace {
    fn record(&mut self, objective: f64, sinkhorn: &Sinkhorn, beta: &Array1<f64>) {
        self.objective.push(objective);
        self.row_residual.push(sinkhorn.row_residual);
        self.col_residual.push(sinkhorn.col_residual);
        self.sinkhorn_iters.push(sinkhorn.iterations);
        self.beta.push(beta.to_vec());
        if !sinkhorn.converged {
            self.warnings.push(format!(
                "CONVERGENCE_WARNING: sinkhorn stopped after {} iterations with row residual {:.3e}",
                sinkhorn.iterations, sinkhorn.row_residual
            ));
        }
    }

    pub fn iterations(&self) -> usize {
        self.objective.len()
    }
}

/// `C = -log(max(P, floor))`
pub fn cost_from_predictions(p: ArrayView2<'_, f64>, prob_floor: f64) -> Array2<f64> {
    p.mapv(|v| -v.max(prob_floor).ln())
}

/// Result of one fixed-marginal Sinkhorn solve.
#[derive(Debug, Clone)]
pub struct Sinkhorn {
    pub q: Array2<f64>,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub iterations: usize,
    pub row_residual: f64,
    pub col_residual: f64,
    pub converged: bool,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT with fixed marginals, in the log domain.
///
/// Returns `Q = diag(exp(f/l1)) exp(-C/l1) diag(exp(g/l1))`. Zero entries of
/// `beta` are allowed and yield empty columns. `g0` warm-starts the column
/// potential.
pub fn sinkhorn_fixed_marginals(
    cost: ArrayView2<'_, f64>,
    alpha: &Array1<f64>,
    beta: &Array1<f64>,
    lambda1: f64,
    tol: f64,
    max_iter: usize,
    g0: Option<&Array1<f64>>,
) -> Sinkhorn {
    let (n, k) = cost.dim();
    let kernel = cost.mapv(|c| -c / lambda1);
    let log_alpha = alpha.mapv(f64::ln);
    let log_beta = beta.mapv(|b| if b > 0.0 { b.ln() } else { f64::NEG_INFINITY });
    let mut u = Array1::<f64>::zeros(n);
    let mut v = match g0 {
        Some(g) => g.mapv(|x| x / lambda1),
        None => Array1::<f64>::zeros(k),
    };
    for j in 0..k {
        if log_beta[j] == f64::NEG_INFINITY {
            v[j] = f64::NEG_INFINITY;
        }
    }

    let mut iterations = 0;
    let mut row_residual = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            let row = kernel.row(i);
            u[i] = log_alpha[i] - log_sum_exp((0..k).map(|j| row[j] + v[j]));
        }
        for j in 0..k {
            if log_beta[j] == f64::NEG_INFINITY {
                continue;
            }
            let col = kernel.column(j);
            v[j] = log_beta[j] - log_sum_exp((0..n).map(|i| col[i] + u[i]));
        }
        row_residual = (0..n)
            .map(|i| {
                let row = kernel.row(i);
                let mass: f64 = (0..k).map(|j| (row[j] + u[i] + v[j]).exp()).sum();
                (mass - alpha[i]).abs()
            })
            .fold(0.0, f64::max);
        if row_residual <= tol {
            break;
        }
    }

    let mut q = kernel;
    for ((i, j), x) in q.indexed_iter_mut() {
        *x = (*x + u[i] + v[j]).exp();
    }
    let col_residual = max_abs_diff(&q.sum_axis(Axis(0)), beta);
    Sinkhorn {
        q,
        f: u.mapv(|x| x * lambda1),
        g: v.mapv(|x| x * lambda1),
        iterations,
        converged: row_residual <= tol && col_residual <= tol,
        row_residual,
        col_residual,
    }
}

/// Closed-form class marginal `beta_j = lambda2 / (K (g_j - h))`, with `h`
/// the root of `sum_j beta_j(h) = 1` below `min_j g_j`.
pub fn update_beta(g: &Array1<f64>, lambda2: f64) -> Result<(Array1<f64>, f64)> {
    let k = g.len() as f64;
    if !(lambda2 > 0.0) || g.is_empty() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::BracketFailure);
    }
    let mass = |h: f64| g.iter().map(|&gj| lambda2 / (k * (gj - h))).sum::<f64>();
    let g_min = g.iter().copied().fold(f64::INFINITY, f64::min);

    let mut hi = g_min - 1e-12 * g_min.abs().max(1.0);
    if hi >= g_min {
        return Err(Error::BracketFailure);
    }
    let mut distance = 1.0;
    let mut lo = g_min - distance;
    let mut expansions = 0;
    while mass(lo) >= 1.0 {
        distance *= 2.0;
        lo = g_min - distance;
        expansions += 1;
        if expansions > 2000 || !lo.is_finite() {
            return Err(Error::BracketFailure);
        }
    }
    if mass(hi) < 1.0 {
        // Root lies in the last ulp-scale gap below min g.
        return Err(Error::BracketFailure);
    }

    let mut h = 0.5 * (lo + hi);
    for _ in 0..200 {
        h = 0.5 * (lo + hi);
        let m = mass(h);
        if (m - 1.0).abs() <= 1e-12 {
            break;
        }
        if m > 1.0 {
            hi = h;
        } else {
            lo = h;
        }
    }
    let mut beta = g.mapv(|gj| lambda2 / (k * (gj - h)));
    let total = beta.sum();
    beta /= total;
    Ok((beta, h))
}

/// Class marginal minimizing `<g, beta> + lambda2 KL(beta || 1/K)`:
/// a softmax of `-g / lambda2`.
pub fn update_beta_entropic(g: &Array1<f64>, lambda2: f64) -> Result<(Array1<f64>, f64)> {
    if !(lambda2 > 0.0) || g.is_empty() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::BracketFailure);
    }
    let k = g.len() as f64;
    let scaled = g.mapv(|x| -x / lambda2);
    let lse = log_sum_exp(scaled.iter().copied());
    let beta = scaled.mapv(|x| (x - lse).exp());
    // stationarity: lambda2 (log(K beta_j) + 1) + g_j - h = 0
    let h = lambda2 * ((k * beta[0]).ln() + 1.0) + g[0];
    Ok((beta, h))
}

/// `<Q, C> + lambda1 sum Q log Q` plus the variant's class-marginal penalty
/// (`lambda2 KL(1/K || beta)` for ROT). `0 log 0` is taken as 0.
pub fn objective_value(
    q: ArrayView2<'_, f64>,
    cost: ArrayView2<'_, f64>,
    beta: &Array1<f64>,
    cfg: &RotConfig,
) -> f64 {
    let transport: f64 = q.iter().zip(cost.iter()).map(|(&x, &c)| x * c).sum();
    let neg_entropy: f64 = q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    let penalty = marginal_penalty(beta, cfg);
    transport + cfg.lambda1 * neg_entropy + penalty
}

/// Runs the configured solver.
pub fn solve(p: &PredictionMatrix, cfg: &RotConfig) -> Result<(TransportPlan, SolverTrace)> {
    match cfg.variant {
        Variant::Rot => solve_rot(p, cfg),
        _ => solve_variant(p, cfg),
    }
}

/// Relaxed OT: Sinkhorn row scaling alternated with the optimal class marginal.
pub fn solve_rot(p: &PredictionMatrix, cfg: &RotConfig) -> Result<(TransportPlan, SolverTrace)> {
    if cfg.variant != Variant::Rot {
        return Err(Error::Config("solve_rot called with a non-ROT variant".into()));
    }
    relaxed_scaling(p, cfg)
}

/// COT, EOT and MOT.
pub fn solve_variant(p: &PredictionMatrix, cfg: &RotConfig) -> Result<(TransportPlan, SolverTrace)> {
    cfg.check()?;
    match cfg.variant {
        Variant::Rot => solve_rot(p, cfg),
        Variant::Eot => relaxed_scaling(p, cfg),
        Variant::Cot => {
            let (n, k) = (p.n_samples(), p.n_classes());
            let cost = cost_from_predictions(p.view(), cfg.prob_floor);
            let alpha = Array1::from_elem(n, 1.0 / n as f64);
            let beta = Array1::from_elem(k, 1.0 / k as f64);
            let s = sinkhorn_fixed_marginals(
                cost.view(),
                &alpha,
                &beta,
                cfg.lambda1,
                cfg.marginal_tol,
                cfg.sinkhorn_iters,
                None,
            );
            let mut trace = SolverTrace::default();
            trace.record(objective_value(s.q.view(), cost.view(), &beta, cfg), &s, &beta);
            Ok((TransportPlan { q: s.q, alpha, beta, f: s.f, g: s.g, h: 0.0 }, trace))
        }
        Variant::Mot => {
            let (n, k) = (p.n_samples(), p.n_classes());
            let cost = cost_from_predictions(p.view(), cfg.prob_floor);
            let alpha = Array1::from_elem(n, 1.0 / n as f64);
            let votes = argmax_fractions(p.view());
            let mu = cfg.mot_momentum;
            let mut beta = Array1::from_elem(k, 1.0 / k as f64);
            let mut trace = SolverTrace::default();
            let mut last: Option<Sinkhorn> = None;
            for _ in 0..cfg.outer_iters.max(1) {
                beta = &beta * mu + &votes * (1.0 - mu);
                let s = sinkhorn_fixed_marginals(
                    cost.view(),
                    &alpha,
                    &beta,
                    cfg.lambda1,
                    cfg.marginal_tol,
                    cfg.sinkhorn_iters,
                    last.as_ref().map(|s| &s.g),
                );
                trace.record(objective_value(s.q.view(), cost.view(), &beta, cfg), &s, &beta);
                last = Some(s);
            }
            let s = last.expect("at least one iteration");
            Ok((TransportPlan { q: s.q, alpha, beta, f: s.f, g: s.g, h: 0.0 }, trace))
        }
    }
}

/// `v_j = #{i : argmax_j P_ij = j} / N`, ties toward the lowest index.
pub fn argmax_fractions(p: ArrayView2<'_, f64>) -> Array1<f64> {
    let n = p.nrows() as f64;
    let mut v = Array1::zeros(p.ncols());
    for row in p.rows() {
        v[argmax(row.iter().copied())] += 1.0 / n;
    }
    v
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (j, v) in values.enumerate() {
        if v > best_value {
            best = j;
            best_value = v;
        }
    }
    best
}

/// Class-marginal penalty of the variant (zero for COT and MOT).
fn marginal_penalty(beta: &Array1<f64>, cfg: &RotConfig) -> f64 {
    let k = beta.len() as f64;
    match cfg.variant {
        Variant::Rot => cfg.lambda2 * beta.iter().map(|&b| (1.0 / k) * (1.0 / (k * b)).ln()).sum::<f64>(),
        Variant::Eot => {
            cfg.lambda2 * beta.iter().filter(|&&b| b > 0.0).map(|&b| b * (k * b).ln()).sum::<f64>()
        }
        Variant::Cot | Variant::Mot => 0.0,
    }
}

/// Solves ROT or EOT by scaling: an exact row step for `f`, then a column
/// step that sets `g` and `beta` jointly to their optimum given `f` (a
/// Lambert-W root for ROT, closed form for EOT). This is block coordinate
/// ascent on the concave dual, so it converges to the global optimum of the
/// convex problem. Each outer iteration runs up to `sinkhorn_iters` sweeps
/// and ends on a row step, so every recorded plan is row-feasible with
/// `beta = Q^T 1`.
fn relaxed_scaling(p: &PredictionMatrix, cfg: &RotConfig) -> Result<(TransportPlan, SolverTrace)> {
    cfg.check()?;
    let (n, k) = (p.n_samples(), p.n_classes());
    let cost = cost_from_predictions(p.view(), cfg.prob_floor);
    let alpha = Array1::from_elem(n, 1.0 / n as f64);
    let kernel = cost.mapv(|c| -c / cfg.lambda1);
    let log_alpha = alpha.mapv(f64::ln);
    let (l1, l2, kf) = (cfg.lambda1, cfg.lambda2, k as f64);

    // Starting point: the balanced plan.
    let uniform = Array1::from_elem(k, 1.0 / kf);
    let start = sinkhorn_fixed_marginals(
        cost.view(),
        &alpha,
        &uniform,
        l1,
        cfg.marginal_tol,
        cfg.sinkhorn_iters,
        None,
    );
    let mut trace = SolverTrace::default();
    trace.record(objective_value(start.q.view(), cost.view(), &uniform, cfg), &start, &uniform);
    let mut u = start.f.mapv(|x| x / l1);
    let mut v = start.g.mapv(|x| x / l1);
    let mut beta = uniform;
    let mut q = start.q;

    let row_step = |u: &mut Array1<f64>, v: &Array1<f64>| {
        for i in 0..n {
            let row = kernel.row(i);
            u[i] = log_alpha[i] - log_sum_exp((0..k).map(|j| row[j] + v[j]));
        }
    };
    let log_rot_scale = (l2 / (kf * l1)).ln();

    for _ in 0..cfg.outer_iters.max(1) {
        let mut iterations = 0;
        let mut row_residual = f64::INFINITY;
        while iterations < cfg.sinkhorn_iters {
            iterations += 1;
            row_step(&mut u, &v);
            for j in 0..k {
                let col = kernel.column(j);
                let log_m = log_sum_exp((0..n).map(|i| col[i] + u[i]));
                v[j] = match cfg.variant {
                    // g e^(g/l1) = l2 / (K m_j), with v = g / l1
                    Variant::Eot => -l2 * (kf.ln() + log_m) / (l1 + l2),
                    _ => lambert_w_exp(log_rot_scale - log_m),
                };
            }
            row_residual = (0..n)
                .map(|i| {
                    let row = kernel.row(i);
                    let mass: f64 = (0..k).map(|j| (row[j] + u[i] + v[j]).exp()).sum();
                    (mass - alpha[i]).abs()
                })
                .fold(0.0, f64::max);
            if row_residual <= cfg.marginal_tol {
                break;
            }
        }
        row_step(&mut u, &v);
        q = kernel.clone();
        for ((i, j), x) in q.indexed_iter_mut() {
            *x = (*x + u[i] + v[j]).exp();
        }
        let next_beta = q.sum_axis(Axis(0));
        let change = max_abs_diff(&next_beta, &beta);
        beta = next_beta;
        let value = objective_value(q.view(), cost.view(), &beta, cfg);
        let step = Sinkhorn {
            q: Array2::zeros((0, 0)),
            f: Array1::zeros(0),
            g: Array1::zeros(0),
            iterations,
            row_residual,
            col_residual: 0.0,
            converged: row_residual <= cfg.marginal_tol,
        };
        trace.record(value, &step, &beta);
        if change < 1e-8 {
            break;
        }
    }

    let g = v.mapv(|x| x * l1);
    let h = match cfg.variant {
        Variant::Eot => update_beta_entropic(&g, l2)?.1,
        _ => update_beta(&g, l2)?.1,
    };
    let f = u.mapv(|x| x * l1);
    Ok((TransportPlan { q, alpha, beta, f, g, h }, trace))
}

/// Principal Lambert W of `exp(log_z)`: the positive root of `x + ln x = log_z`.
fn lambert_w_exp(log_z: f64) -> f64 {
    // Newton on a concave increasing function, started right of the root:
    // the first step lands left of it and the rest climb monotonically.
    if log_z < -30.0 {
        return log_z.exp();
    }
    let mut x = if log_z > 1.0 { log_z } else { log_z.exp() };
    for _ in 0..100 {
        let next = x * (1.0 + log_z - x.ln()) / (1.0 + x);
        if (next - x).abs() <= 1e-15 * x {
            return next;
        }
        x = next;
    }
    x
}

/// Soft labels `N Q`, hard labels by argmax, confidence by row max.
pub fn pseudo_labels_from_plan(plan: &TransportPlan) -> PseudoLabelSet {
    let n = plan.q.nrows() as f64;
    PseudoLabelSet::from_soft(plan.q.mapv(|x| x * n))
}

fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
