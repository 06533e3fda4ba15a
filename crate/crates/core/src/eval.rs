//! Clustering primitives and metrics: k-means, Hungarian matching, ACC,
//! NMI, ARI, head/medium/tail accuracy and cluster-count estimation.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longtail::Group;

/// Cluster ids in `[0, k)`; clusters may be empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub k: usize,
}

impl Partition {
    /// Takes `k` as one past the largest id.
    pub fn from_labels(assignment: Vec<usize>) -> Self {
        let k = assignment.iter().max().map_or(0, |m| m + 1);
        Self { assignment, k }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub partition: Partition,
    pub centroids: Array2<f64>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(x: &ArrayView2<'_, f64>, i: usize) -> Vec<f64> {
    x.row(i).to_vec()
}

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are
/// re-seeded at the point farthest from its centroid; distance ties go to
/// the lowest centroid index.
pub fn kmeans(x: ArrayView2<'_, f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeans> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("kmeans needs 1 <= k <= N, got k={k}, N={n}")));
    }
    let points: Vec<Vec<f64>> = (0..n).map(|i| row(&x, i)).collect();
    let dim = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)].clone());
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut assignment = vec![0usize; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut total = 0.0;
        let mut distance = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            assignment[i] = best;
            distance[i] = best_d;
            total += best_d;
        }
        inertia.push(total);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        let mut reseeded = false;
        for c in 0..k {
            let next = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // farthest point, taken out of contention for further empties
                let far = (0..n)
                    .max_by(|&a, &b| distance[a].total_cmp(&distance[b]).then(b.cmp(&a)))
                    .expect("n > 0");
                distance[far] = f64::NEG_INFINITY;
                reseeded = true;
                points[far].clone()
            };
            shift = shift.max(sq_dist(&next, &centers[c]).sqrt());
            centers[c] = next;
        }
        if iterations >= max_iter || (shift < tol && !reseeded) {
            break;
        }
    }
    // Final assignment against the last centroids.
    for (i, p) in points.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(p, center);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        assignment[i] = best;
    }
    let centroids = Array2::from_shape_vec((k, dim), centers.concat()).expect("k x dim");
    Ok(KMeans { partition: Partition { assignment, k }, centroids, inertia, iterations })
}

/// Minimum-cost perfect assignment on a square matrix; `result[row] = col`.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "hungarian needs a square matrix");
    if n == 0 {
        return Vec::new();
    }
    // Potentials formulation, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for r in 1..=n {
        matched_row[0] = r;
        let mut col = 0;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col] = true;
            let row = matched_row[col];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for j in 1..=n {
                if !used[j] {
                    let slack = cost[[row - 1, j - 1]] - u[row] - v[j];
                    if slack < min_slack[j] {
                        min_slack[j] = slack;
                        way[j] = col;
                    }
                    if min_slack[j] < delta {
                        delta = min_slack[j];
                        next = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            col = next;
            if matched_row[col] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col];
            matched_row[col] = matched_row[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[matched_row[j] - 1] = j - 1;
    }
    result
}

/// Counts indexed `[true][pred]`.
pub fn contingency(y_true: &[usize], y_pred: &[usize]) -> Result<Array2<f64>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let rows = y_true.iter().max().map_or(0, |m| m + 1);
    let cols = y_pred.iter().max().map_or(0, |m| m + 1);
    let mut table = Array2::zeros((rows, cols));
    for (&t, &p) in y_true.iter().zip(y_pred) {
        table[[t, p]] += 1.0;
    }
    Ok(table)
}

/// Maps each predicted cluster id to the true class it is matched with,
/// maximizing agreement. Unmatched clusters map to `None`.
pub fn best_mapping(y_true: &[usize], y_pred: &[usize]) -> Result<Vec<Option<usize>>> {
    let table = contingency(y_true, y_pred)?;
    let size = table.nrows().max(table.ncols());
    let mut cost = Array2::zeros((size, size));
    for ((t, p), &c) in table.indexed_iter() {
        cost[[p, t]] = -c;
    }
    let assignment = hungarian(&cost);
    Ok((0..table.ncols())
        .map(|p| Some(assignment[p]).filter(|&t| t < table.nrows()))
        .collect())
}

fn matched_correct(y_true: &[usize], y_pred: &[usize], mapping: &[Option<usize>]) -> Vec<bool> {
    y_true.iter().zip(y_pred).map(|(&t, &p)| mapping[p] == Some(t)).collect()
}

/// Hungarian-matched accuracy.
pub fn clustering_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::LengthMismatch(0, y_pred.len()));
    }
    let mapping = best_mapping(y_true, y_pred)?;
    let correct = matched_correct(y_true, y_pred, &mapping).into_iter().filter(|&c| c).count();
    Ok(correct as f64 / y_true.len() as f64)
}

fn entropy(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts.filter(|&c| c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum()
}

/// Mutual information normalized by the geometric mean of the entropies.
pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = contingency(y_true, y_pred)?;
    let n = y_true.len() as f64;
    let row_sums = table.sum_axis(ndarray::Axis(1));
    let col_sums = table.sum_axis(ndarray::Axis(0));
    let h_true = entropy(row_sums.iter().copied(), n);
    let h_pred = entropy(col_sums.iter().copied(), n);
    if h_true == 0.0 || h_pred == 0.0 {
        return Ok(if h_true == 0.0 && h_pred == 0.0 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for ((t, p), &c) in table.indexed_iter() {
        if c > 0.0 {
            mi += (c / n) * (n * c / (row_sums[t] * col_sums[p])).ln();
        }
    }
    Ok((mi / (h_true * h_pred).sqrt()).clamp(0.0, 1.0))
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts.
pub fn ari(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = contingency(y_true, y_pred)?;
    let n = y_true.len() as f64;
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sum_true: f64 = table.sum_axis(ndarray::Axis(1)).iter().map(|&c| choose2(c)).sum();
    let sum_pred: f64 = table.sum_axis(ndarray::Axis(0)).iter().map(|&c| choose2(c)).sum();
    let pairs = choose2(n);
    let expected = if pairs > 0.0 { sum_true * sum_pred / pairs } else { 0.0 };
    let max = 0.5 * (sum_true + sum_pred);
    let denominator = max - expected;
    if denominator == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denominator)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
}

/// Per-group accuracy under one global matching. `groups` is indexed by
/// true class; groups without samples report `None`.
pub fn grouped_accuracy(y_true: &[usize], y_pred: &[usize], groups: &[Group]) -> Result<GroupAccuracy> {
    let mapping = best_mapping(y_true, y_pred)?;
    let correct = matched_correct(y_true, y_pred, &mapping);
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (i, &t) in y_true.iter().enumerate() {
        let g = match groups.get(t) {
            Some(Group::Head) => 0,
            Some(Group::Medium) => 1,
            Some(Group::Tail) => 2,
            None => return Err(Error::Shape(format!("class {t} has no group"))),
        };
        totals[g] += 1;
        hits[g] += usize::from(correct[i]);
    }
    let acc = |g: usize| (totals[g] > 0).then(|| hits[g] as f64 / totals[g] as f64);
    Ok(GroupAccuracy { head: acc(0), medium: acc(1), tail: acc(2) })
}

/// Matched accuracy of each true class `0..num_classes`.
pub fn per_class_accuracy(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mapping = best_mapping(y_true, y_pred)?;
    let correct = matched_correct(y_true, y_pred, &mapping);
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (i, &t) in y_true.iter().enumerate() {
        if t < num_classes {
            totals[t] += 1;
            hits[t] += usize::from(correct[i]);
        }
    }
    Ok(hits.iter().zip(&totals).map(|(&h, &n)| if n > 0 { h as f64 / n as f64 } else { 0.0 }).collect())
}

/// Over-clusters with `k_prime` and counts clusters holding at least
/// `threshold` points.
pub fn estimate_k(x: ArrayView2<'_, f64>, k_prime: usize, threshold: usize, seed: u64) -> Result<usize> {
    let km = kmeans(x, k_prime, seed, 300, 1e-8)?;
    Ok(km.partition.sizes().into_iter().filter(|&s| s >= threshold).count())
}

/// `t = max(1, floor(N / (2 K')))`
pub fn default_threshold(n: usize, k_prime: usize) -> usize {
    (n / (2 * k_prime.max(1))).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
    pub group_acc: GroupAccuracy,
    pub per_class_acc: Vec<f64>,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub config_hash: String,
    pub nmi_normalization: String,
}

impl MetricsReport {
    pub fn compute(
        y_true: &[usize],
        y_pred: &[usize],
        groups: &[Group],
        num_classes: usize,
        seed: u64,
        config_hash: String,
    ) -> Result<Self> {
        Ok(Self {
            nmi: nmi(y_true, y_pred)?,
            ari: ari(y_true, y_pred)?,
            acc: clustering_accuracy(y_true, y_pred)?,
            group_acc: grouped_accuracy(y_true, y_pred, groups)?,
            per_class_acc: per_class_accuracy(y_true, y_pred, num_classes)?,
            n: y_true.len(),
            k: num_classes,
            seed,
            config_hash,
            nmi_normalization: "geometric".to_string(),
        })
    }
}
