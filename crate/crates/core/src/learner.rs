//! Projection and cluster heads over frozen embeddings, trained with
//! class-wise and instance-wise contrastive losses plus cross-entropy on the
//! clean pseudo-labels.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{decode_f32le, encode_f32le};
use crate::error::{Error, Result};
use crate::filter::PseudoLabelSet;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub input: usize,
    pub hidden: usize,
    pub proj: usize,
    pub classes: usize,
}

/// `z = normalize(tanh(x W1 + b1) W2 + b2)`, `logits = z W3 + b3`.
///
/// The same struct holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases included.
pub fn init_head<R: Rng + ?Sized>(shape: HeadShape, rng: &mut R) -> Result<HeadParameters> {
    let HeadShape { input, hidden, proj, classes } = shape;
    if input == 0 || hidden == 0 || proj == 0 || classes == 0 {
        return Err(Error::Config(format!("head dimensions must be positive, got {shape:?}")));
    }
    let mut layer = |fan_in: usize, fan_out: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        let b = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
        (w, b)
    };
    let (w1, b1) = layer(input, hidden);
    let (w2, b2) = layer(hidden, proj);
    let (w3, b3) = layer(proj, classes);
    Ok(HeadParameters { w1, b1, w2, b2, w3, b3 })
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub x: Array2<f64>,
    pub hidden: Array2<f64>,
    pub norms: Array1<f64>,
    pub z: Array2<f64>,
    pub logits: Array2<f64>,
    pub p: Array2<f64>,
}

impl HeadParameters {
    pub fn shape(&self) -> HeadShape {
        HeadShape {
            input: self.w1.nrows(),
            hidden: self.w1.ncols(),
            proj: self.w2.ncols(),
            classes: self.w3.ncols(),
        }
    }

    pub fn zeros(shape: HeadShape) -> Self {
        Self {
            w1: Array2::zeros((shape.input, shape.hidden)),
            b1: Array1::zeros(shape.hidden),
            w2: Array2::zeros((shape.hidden, shape.proj)),
            b2: Array1::zeros(shape.proj),
            w3: Array2::zeros((shape.proj, shape.classes)),
            b3: Array1::zeros(shape.classes),
        }
    }

    /// Flat views of every tensor, in checkpoint order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("w1", self.w1.as_slice().expect("standard layout")),
            ("b1", self.b1.as_slice().expect("standard layout")),
            ("w2", self.w2.as_slice().expect("standard layout")),
            ("b2", self.b2.as_slice().expect("standard layout")),
            ("w3", self.w3.as_slice().expect("standard layout")),
            ("b3", self.b3.as_slice().expect("standard layout")),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &HeadParameters, scale: f64) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Forward> {
        if x.ncols() != self.w1.nrows() {
            return Err(Error::Shape(format!(
                "input has {} columns, head expects {}",
                x.ncols(),
                self.w1.nrows()
            )));
        }
        let hidden = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        let y = hidden.dot(&self.w2) + &self.b2;
        let norms = y.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_EPS));
        let z = &y / &norms.view().insert_axis(Axis(1));
        let logits = z.dot(&self.w3) + &self.b3;
        let p = softmax_rows(&logits);
        Ok(Forward { x: x.to_owned(), hidden, norms, z, logits, p })
    }

    /// Parameter gradient given upstream gradients w.r.t. `z` and the logits.
    pub fn backward(&self, fwd: &Forward, dz: &Array2<f64>, dlogits: Option<&Array2<f64>>) -> HeadParameters {
        let mut dz_total = dz.clone();
        let (w3, b3) = match dlogits {
            Some(dl) => {
                dz_total += &dl.dot(&self.w3.t());
                (fwd.z.t().dot(dl), dl.sum_axis(Axis(0)))
            }
            None => (Array2::zeros(self.w3.raw_dim()), Array1::zeros(self.b3.len())),
        };
        // through z = y / |y|
        let mut dy = dz_total;
        for ((mut g, z), &norm) in dy.rows_mut().into_iter().zip(fwd.z.rows()).zip(fwd.norms.iter()) {
            let radial = g.dot(&z);
            g.scaled_add(-radial, &z);
            g /= norm;
        }
        let w2 = fwd.hidden.t().dot(&dy);
        let b2 = dy.sum_axis(Axis(0));
        let mut da = dy.dot(&self.w2.t());
        da.zip_mut_with(&fwd.hidden, |d, &h| *d *= 1.0 - h * h);
        let w1 = fwd.x.t().dot(&da);
        let b1 = da.sum_axis(Axis(0));
        HeadParameters { w1, b1, w2, b2, w3, b3 }
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// Per-sample contrastive values and the gradient of their weighted sum.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    /// `sum_i weight_i * per_sample_i`
    pub value: f64,
    pub per_sample: Vec<f64>,
    /// `|P(i)|`; empty for the instance-wise loss.
    pub positives: Vec<usize>,
    pub grad: Array2<f64>,
    /// Gradient w.r.t. the augmented view (instance-wise loss only).
    pub grad_aug: Option<Array2<f64>>,
}

/// Positive-set sizes: other clean batch members sharing the pseudo-label.
pub fn positive_counts(labels: &[usize], clean: &[bool]) -> Vec<usize> {
    (0..labels.len())
        .map(|i| {
            if !clean[i] {
                return 0;
            }
            (0..labels.len()).filter(|&p| p != i && clean[p] && labels[p] == labels[i]).count()
        })
        .collect()
}

/// Class-wise contrastive loss over a batch of unit vectors.
///
/// `L(i) = -sum_{p in P(i)} q_i q_p log(exp(z_i.z_p/tau) / sum_{j != i} exp(z_i.z_j/tau))`,
/// zero for noisy anchors. `weights` scale each anchor in the returned value
/// and gradient (all ones when `None`).
pub fn cwcl_loss(
    z: ArrayView2<'_, f64>,
    labels: &[usize],
    clean: &[bool],
    confidence: &[f64],
    tau: f64,
    weights: Option<&[f64]>,
) -> ContrastiveLoss {
    let b = z.nrows();
    let sim = z.dot(&z.t()) / tau;
    let positives = positive_counts(labels, clean);
    let mut per_sample = vec![0.0; b];
    let mut coeff = Array2::<f64>::zeros((b, b));
    let mut value = 0.0;
    for i in 0..b {
        if positives[i] == 0 {
            continue;
        }
        let row = sim.row(i);
        let max = (0..b).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        let log_denom = max + denom.ln();
        let mut total_weight = 0.0;
        let mut loss = 0.0;
        for p in 0..b {
            if p != i && clean[p] && labels[p] == labels[i] {
                let w = confidence[i] * confidence[p];
                total_weight += w;
                loss -= w * (row[p] - log_denom);
                coeff[[i, p]] -= w;
            }
        }
        let a = weights.map_or(1.0, |w| w[i]);
        for j in 0..b {
            if j != i {
                coeff[[i, j]] += total_weight * (row[j] - log_denom).exp();
            }
        }
        coeff.row_mut(i).mapv_inplace(|c| c * a / tau);
        per_sample[i] = loss;
        value += a * loss;
    }
    // d/dz_i sum_j c_ij z_i.z_j = sum_j c_ij z_j, and symmetrically for z_j
    let grad = coeff.dot(&z) + coeff.t().dot(&z);
    ContrastiveLoss { value, per_sample, positives, grad, grad_aug: None }
}

/// Instance-wise contrastive loss with the augmented view as the only
/// positive: `L(i) = -log(exp(z_i.zb_i/tau) / (exp(z_i.zb_i/tau) + sum_{j != i} exp(z_i.z_j/tau)))`.
pub fn iwcl_loss(
    z: ArrayView2<'_, f64>,
    z_aug: ArrayView2<'_, f64>,
    tau: f64,
    weights: Option<&[f64]>,
) -> ContrastiveLoss {
    let b = z.nrows();
    let sim = z.dot(&z.t()) / tau;
    let mut per_sample = vec![0.0; b];
    let mut coeff = Array2::<f64>::zeros((b, b));
    let mut grad_aug = Array2::<f64>::zeros(z.raw_dim());
    let mut pos_coeff = vec![0.0; b];
    let mut value = 0.0;
    for i in 0..b {
        let row = sim.row(i);
        let positive = z.row(i).dot(&z_aug.row(i)) / tau;
        let max = (0..b).filter(|&j| j != i).map(|j| row[j]).fold(positive, f64::max);
        let denom = (positive - max).exp() + (0..b).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum::<f64>();
        let log_denom = max + denom.ln();
        let loss = log_denom - positive;
        let a = weights.map_or(1.0, |w| w[i]);
        per_sample[i] = loss;
        value += a * loss;
        pos_coeff[i] = a * ((positive - log_denom).exp() - 1.0) / tau;
        for j in 0..b {
            if j != i {
                coeff[[i, j]] = a * (row[j] - log_denom).exp() / tau;
            }
        }
    }
    let mut grad = coeff.dot(&z) + coeff.t().dot(&z);
    for i in 0..b {
        grad.row_mut(i).scaled_add(pos_coeff[i], &z_aug.row(i));
        grad_aug.row_mut(i).scaled_add(pos_coeff[i], &z.row(i));
    }
    ContrastiveLoss { value, per_sample, positives: Vec::new(), grad, grad_aug: Some(grad_aug) }
}

/// Mean `-log softmax(logits)_{i, c_i}` over clean rows, and its gradient
/// w.r.t. the logits. Zero with a zero gradient when no row is clean.
pub fn ce_loss(logits: &Array2<f64>, labels: &[usize], clean: &[bool]) -> (f64, Array2<f64>) {
    let n_clean = clean.iter().filter(|&&c| c).count();
    let mut grad = Array2::zeros(logits.raw_dim());
    if n_clean == 0 {
        return (0.0, grad);
    }
    let p = softmax_rows(logits);
    let mut total = 0.0;
    for i in 0..logits.nrows() {
        if !clean[i] {
            continue;
        }
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
        let mut g = grad.row_mut(i);
        g.assign(&p.row(i));
        g[labels[i]] -= 1.0;
        g /= n_clean as f64;
    }
    (total / n_clean as f64, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Contrastive terms summed over the batch.
    Sum,
    /// Contrastive terms averaged over the batch.
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cwcl: f64,
    pub l_iwcl: f64,
    pub l_ce: f64,
    pub l_total: f64,
}

/// Anchor weights `1 / (1 + |P(i)|)`, divided by the batch size for
/// [`Reduction::Mean`].
pub fn anchor_weights(positives: &[usize], reduction: Reduction) -> Vec<f64> {
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / positives.len().max(1) as f64,
    };
    positives.iter().map(|&p| scale / (1.0 + p as f64)).collect()
}

/// `omega * sum_i w_i (Lc(i) + Li(i)) + (1 - omega) * Lce`
pub fn total_loss(cwcl: &[f64], iwcl: &[f64], weights: &[f64], l_ce: f64, omega: f64) -> LossBreakdown {
    let l_cwcl: f64 = cwcl.iter().zip(weights).map(|(l, w)| l * w).sum();
    let l_iwcl: f64 = iwcl.iter().zip(weights).map(|(l, w)| l * w).sum();
    LossBreakdown { l_cwcl, l_iwcl, l_ce, l_total: omega * (l_cwcl + l_iwcl) + (1.0 - omega) * l_ce }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub tau: f64,
    pub omega: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aug_sigma: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub momentum: f64,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            omega: 0.5,
            learning_rate: 0.2,
            epochs: 2,
            batch_size: 512,
            aug_sigma: 0.1,
            seed: 0,
            hidden_dim: 256,
            proj_dim: 128,
            weight_decay: 0.01,
            grad_clip: 1.0,
            momentum: 0.9,
            reduction: Reduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!("omega must be in [0, 1], got {}", self.omega)));
        }
        if !(self.learning_rate >= 0.0) || !(self.aug_sigma >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate, aug_sigma and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config("batch_size and head dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_shape(&self, input: usize, classes: usize) -> HeadShape {
        HeadShape { input, hidden: self.hidden_dim, proj: self.proj_dim, classes }
    }
}

/// `X + sigma G` with standard normal `G`.
pub fn augment_embeddings<R: Rng + ?Sized>(x: ArrayView2<'_, f64>, sigma: f64, rng: &mut R) -> Array2<f64> {
    if sigma == 0.0 {
        return x.to_owned();
    }
    let mut out = x.to_owned();
    for v in out.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v += sigma * g;
    }
    out
}

/// Loss and parameter gradient of one batch. `x_aug` rows are the second
/// view of the matching `x` rows.
pub fn batch_objective(
    head: &HeadParameters,
    x: ArrayView2<'_, f64>,
    x_aug: ArrayView2<'_, f64>,
    labels: &[usize],
    clean: &[bool],
    confidence: &[f64],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, HeadParameters)> {
    let fwd = head.forward(x)?;
    let fwd_aug = head.forward(x_aug)?;
    let weights = anchor_weights(&positive_counts(labels, clean), cfg.reduction);
    let cw = cwcl_loss(fwd.z.view(), labels, clean, confidence, cfg.tau, Some(&weights));
    let iw = iwcl_loss(fwd.z.view(), fwd_aug.z.view(), cfg.tau, Some(&weights));
    let (l_ce, dlogits) = ce_loss(&fwd.logits, labels, clean);
    let breakdown = total_loss(&cw.per_sample, &iw.per_sample, &weights, l_ce, cfg.omega);

    let omega = cfg.omega;
    let dz = (&cw.grad + &iw.grad) * omega;
    let dz_aug = iw.grad_aug.expect("instance-wise gradient") * omega;
    let dlogits = dlogits * (1.0 - omega);
    let mut grad = head.backward(&fwd, &dz, Some(&dlogits));
    grad.add_scaled(&head.backward(&fwd_aug, &dz_aug, None), 1.0);
    Ok((breakdown, grad))
}

/// SGD state: optional momentum buffer.
#[derive(Debug, Clone, Default)]
pub struct Optimizer {
    velocity: Option<HeadParameters>,
}

impl Optimizer {
    /// Clips `grad` to the global norm bound, then applies momentum SGD and
    /// decoupled weight decay on the weight matrices.
    pub fn step(&mut self, head: &mut HeadParameters, mut grad: HeadParameters, cfg: &TrainConfig) {
        let norm = grad.norm();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            grad.scale(cfg.grad_clip / norm);
        }
        let update = if cfg.momentum > 0.0 {
            let v = self.velocity.get_or_insert_with(|| HeadParameters::zeros(head.shape()));
            v.scale(cfg.momentum);
            v.add_scaled(&grad, 1.0);
            v.clone()
        } else {
            grad
        };
        let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
        for w in [&mut head.w1, &mut head.w2, &mut head.w3] {
            w.mapv_inplace(|x| x * decay);
        }
        head.add_scaled(&update, -cfg.learning_rate);
    }
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 32).wrapping_add(epoch as u64));
    rng
}

const STREAM_ORDER: u64 = 1;
const STREAM_AUG: u64 = 2;
const STREAM_WARMUP: u64 = 3;

/// Training rows and an optional precomputed second view.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub x: Array2<f64>,
    pub x_aug: Option<Array2<f64>>,
}

/// One pass over `data` in shuffled batches. Batch order and the Gaussian
/// second view depend only on `(cfg.seed, epoch)`.
pub fn train_epoch(
    head: &mut HeadParameters,
    opt: &mut Optimizer,
    data: &TrainingSet,
    pseudo: &PseudoLabelSet,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossBreakdown> {
    cfg.check()?;
    let n = data.x.nrows();
    if pseudo.len() != n {
        return Err(Error::LengthMismatch(pseudo.len(), n));
    }
    let generated;
    let x_aug = match &data.x_aug {
        Some(a) => a,
        None => {
            generated = augment_embeddings(data.x.view(), cfg.aug_sigma, &mut epoch_rng(cfg.seed, epoch, STREAM_AUG));
            &generated
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(cfg.seed, epoch, STREAM_ORDER));

    let mut sum = LossBreakdown::default();
    let mut batches = 0;
    for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
        let x = data.x.select(Axis(0), idx);
        let xa = x_aug.select(Axis(0), idx);
        let labels: Vec<usize> = idx.iter().map(|&i| pseudo.hard[i]).collect();
        let clean: Vec<bool> = idx.iter().map(|&i| pseudo.clean[i]).collect();
        let conf: Vec<f64> = idx.iter().map(|&i| pseudo.confidence[i]).collect();
        let (loss, grad) = batch_objective(head, x.view(), xa.view(), &labels, &clean, &conf, cfg)?;
        if !loss.l_total.is_finite() || !grad.is_finite() {
            return Err(Error::NonfiniteLoss { epoch, batch, detail: format!("{loss:?}") });
        }
        opt.step(head, grad, cfg);
        sum.l_cwcl += loss.l_cwcl;
        sum.l_iwcl += loss.l_iwcl;
        sum.l_ce += loss.l_ce;
        sum.l_total += loss.l_total;
        batches += 1;
    }
    let b = batches.max(1) as f64;
    Ok(LossBreakdown { l_cwcl: sum.l_cwcl / b, l_iwcl: sum.l_iwcl / b, l_ce: sum.l_ce / b, l_total: sum.l_total / b })
}

/// Cross-entropy training of the whole head on labeled rows. Returns the
/// mean loss of the last epoch (0 for zero epochs).
pub fn supervised_warmup(
    head: &mut HeadParameters,
    opt: &mut Optimizer,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<f64> {
    cfg.check()?;
    if x.nrows() == 0 {
        return Err(Error::InvalidBundle("warm-up needs at least one labeled row".into()));
    }
    if labels.len() != x.nrows() {
        return Err(Error::LengthMismatch(labels.len(), x.nrows()));
    }
    let classes = head.shape().classes;
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::Shape(format!("label {bad} outside {classes} classes")));
    }
    let mut last = 0.0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, STREAM_WARMUP));
        let (mut total, mut batches) = (0.0, 0);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let fwd = head.forward(xb.view())?;
            let (loss, dlogits) = ce_loss(&fwd.logits, &yb, &vec![true; idx.len()]);
            if !loss.is_finite() {
                return Err(Error::NonfiniteLoss { epoch, batch, detail: format!("warm-up CE {loss}") });
            }
            let grad = head.backward(&fwd, &Array2::zeros(fwd.z.raw_dim()), Some(&dlogits));
            opt.step(head, grad, cfg);
            total += loss;
            batches += 1;
        }
        last = total / batches as f64;
    }
    Ok(last)
}

/// Argmax of the cluster head for each row.
pub fn predict(head: &HeadParameters, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let fwd = head.forward(x)?;
    Ok(fwd.p.rows().into_iter().map(|r| crate::rot::argmax(r.iter().copied())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadManifest {
    pub format_version: u32,
    pub dtype: String,
    pub shape: HeadShape,
    pub tensors: Vec<TensorEntry>,
}

pub const HEAD_MANIFEST: &str = "head.json";
pub const HEAD_WEIGHTS: &str = "head.bin";

/// Writes `head.json` and `head.bin` (all tensors concatenated, float32le).
pub fn save_head(head: &HeadParameters, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut flat = Vec::with_capacity(head.num_parameters());
    let mut tensors = Vec::new();
    let shapes = [
        head.w1.shape().to_vec(),
        head.b1.shape().to_vec(),
        head.w2.shape().to_vec(),
        head.b2.shape().to_vec(),
        head.w3.shape().to_vec(),
        head.b3.shape().to_vec(),
    ];
    for ((name, values), shape) in head.tensors().into_iter().zip(shapes) {
        flat.extend(values.iter().map(|&v| v as f32));
        tensors.push(TensorEntry { name: name.to_string(), shape });
    }
    let manifest = HeadManifest { format_version: 1, dtype: "float32le".into(), shape: head.shape(), tensors };
    fs::write(dir.join(HEAD_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    let len = flat.len();
    let flat = Array2::from_shape_vec((1, len), flat).expect("one row");
    fs::write(dir.join(HEAD_WEIGHTS), encode_f32le(&flat))?;
    Ok(())
}

pub fn load_head(dir: &Path) -> Result<HeadParameters> {
    let manifest_path = dir.join(HEAD_MANIFEST);
    let weights_path = dir.join(HEAD_WEIGHTS);
    for p in [&manifest_path, &weights_path] {
        if !p.exists() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let manifest: HeadManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.dtype != "float32le" {
        return Err(Error::ManifestMismatch(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut head = HeadParameters::zeros(manifest.shape);
    let flat = decode_f32le(&fs::read(&weights_path)?, 1, head.num_parameters())?;
    let flat = flat.as_slice().expect("standard layout");
    let mut offset = 0;
    for t in head.tensors_mut() {
        for (dst, &src) in t.iter_mut().zip(&flat[offset..]) {
            *dst = src as f64;
        }
        offset += t.len();
    }
    if !head.is_finite() {
        return Err(Error::InvalidBundle("head checkpoint holds non-finite weights".into()));
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_head(seed: u64) -> HeadParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_head(HeadShape { input: 3, hidden: 5, proj: 4, classes: 3 }, &mut rng).unwrap()
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let mut z = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f64..1.0));
        for mut r in z.rows_mut() {
            let norm: f64 = r.dot(&r).sqrt();
            r /= norm;
        }
        z
    }

    #[test]
    fn forward_is_normalized_and_stochastic() {
        let head = small_head(1);
        let x = array![[0.1, -2.0, 3.0], [0.0, 0.0, 0.0], [0.1, -2.0, 3.0]];
        let f = head.forward(x.view()).unwrap();
        for r in f.z.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-12);
        }
        for r in f.p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(f.z.row(0), f.z.row(2));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(small_head(4), small_head(4));
        assert_ne!(small_head(4), small_head(5));
    }

    #[test]
    fn iwcl_two_orthogonal_samples() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let l = iwcl_loss(z.view(), z.view(), 1.0, None);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l.per_sample[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cwcl_single_negative_is_zero() {
        let z = array![[1.0, 0.0], [0.6, 0.8]];
        let l = cwcl_loss(z.view(), &[0, 0], &[true, true], &[0.9, 0.8], 0.07, None);
        assert!(l.per_sample.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(l.positives, vec![1, 1]);
    }

    #[test]
    fn cwcl_noisy_anchor_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = unit_rows(&mut rng, 5, 3);
        let l = cwcl_loss(z.view(), &[0, 0, 1, 0, 1], &[true, false, true, true, true], &[1.0; 5], 0.1, None);
        assert_eq!(l.per_sample[1], 0.0);
        assert_eq!(l.positives, vec![1, 0, 1, 1, 1]);
    }

    #[test]
    fn ce_cases() {
        let logits = array![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]];
        let (v, _) = ce_loss(&logits, &[1, 0], &[true, false]);
        assert!((v - 3f64.ln()).abs() < 1e-12);
        let (v, g) = ce_loss(&logits, &[1, 0], &[false, false]);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (v, _) = ce_loss(&array![[60.0, 0.0]], &[0], &[true]);
        assert!(v < 1e-20);
    }

    #[test]
    fn omega_extremes() {
        let b = total_loss(&[1.0, 2.0], &[0.5, 0.5], &[0.5, 1.0], 3.0, 0.0);
        assert_eq!(b.l_total, 3.0);
        let b = total_loss(&[1.0, 2.0], &[0.5, 0.5], &[0.5, 1.0], 3.0, 1.0);
        assert!((b.l_total - (0.75 + 2.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = array![[1.0, 2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_embeddings(x.view(), 0.0, &mut rng), x);
    }

    #[test]
    fn checkpoint_round_trip() {
        let head = small_head(9);
        let dir = tempfile::tempdir().unwrap();
        save_head(&head, dir.path()).unwrap();
        let back = load_head(dir.path()).unwrap();
        assert_eq!(back.shape(), head.shape());
        for ((_, a), (_, b)) in head.tensors().iter().zip(back.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_head() {
        let mut head = small_head(3);
        let before = head.clone();
        let cfg = TrainConfig { learning_rate: 0.0, batch_size: 4, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let pseudo = PseudoLabelSet::from_soft(crate::learner::softmax_rows(&Array2::from_shape_fn((6, 3), |(i, j)| ((i + j) % 3) as f64)));
        let data = TrainingSet { x, x_aug: None };
        train_epoch(&mut head, &mut Optimizer::default(), &data, &pseudo, &cfg, 0).unwrap();
        assert_eq!(head, before);
        supervised_warmup(&mut head, &mut Optimizer::default(), data.x.view(), &[0, 1, 2, 0, 1, 2], &cfg, 0).unwrap();
        assert_eq!(head, before);
    }
}
