//! Central finite differences over every head parameter.

use imbanid::filter::PseudoLabelSet;
use imbanid::learner::*;
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Cwcl,
    Iwcl,
    Ce,
    All,
}

pub struct Batch {
    pub x: Array2<f64>,
    pub x_aug: Array2<f64>,
    pub labels: Vec<usize>,
    pub clean: Vec<bool>,
    pub confidence: Vec<f64>,
}

impl Batch {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, input: usize, classes: usize) -> Self {
        let x = Array2::from_shape_fn((n, input), |_| rng.random_range(-1.5..1.5));
        let x_aug = &x + &Array2::from_shape_fn((n, input), |_| rng.random_range(-0.2..0.2));
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let clean = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let confidence = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        Self { x, x_aug, labels, clean, confidence }
    }

    pub fn pseudo(&self, classes: usize) -> PseudoLabelSet {
        let mut soft = Array2::zeros((self.labels.len(), classes));
        for (i, &c) in self.labels.iter().enumerate() {
            soft[[i, c]] = 1.0;
        }
        let mut p = PseudoLabelSet::from_soft(soft);
        p.confidence = self.confidence.clone();
        p.clean = self.clean.clone();
        p
    }
}

/// Value and analytic gradient of one loss term.
pub fn term(head: &HeadParameters, b: &Batch, cfg: &TrainConfig, which: Term) -> (f64, HeadParameters) {
    let fwd = head.forward(b.x.view()).unwrap();
    let fwd_aug = head.forward(b.x_aug.view()).unwrap();
    let weights = anchor_weights(&positive_counts(&b.labels, &b.clean), cfg.reduction);
    let zero_z = Array2::zeros(fwd.z.raw_dim());
    match which {
        Term::Cwcl => {
            let l = cwcl_loss(fwd.z.view(), &b.labels, &b.clean, &b.confidence, cfg.tau, Some(&weights));
            (l.value, head.backward(&fwd, &l.grad, None))
        }
        Term::Iwcl => {
            let l = iwcl_loss(fwd.z.view(), fwd_aug.z.view(), cfg.tau, Some(&weights));
            let mut g = head.backward(&fwd, &l.grad, None);
            g.add_scaled(&head.backward(&fwd_aug, l.grad_aug.as_ref().unwrap(), None), 1.0);
            (l.value, g)
        }
        Term::Ce => {
            let (v, dl) = ce_loss(&fwd.logits, &b.labels, &b.clean);
            (v, head.backward(&fwd, &zero_z, Some(&dl)))
        }
        Term::All => {
            let (l, g) =
                batch_objective(head, b.x.view(), b.x_aug.view(), &b.labels, &b.clean, &b.confidence, cfg).unwrap();
            (l.l_total, g)
        }
    }
}

/// `|analytic - numeric|_2 / max(|numeric|_2, 1e-8)` over all parameters.
pub fn relative_error<F: Fn(&HeadParameters) -> f64>(head: &HeadParameters, analytic: &HeadParameters, f: F) -> f64 {
    const STEP: f64 = 1e-5;
    let mut probe = head.clone();
    let mut diff_sq = 0.0;
    let mut norm_sq = 0.0;
    for (t, (_, grad)) in analytic.tensors().iter().enumerate() {
        for idx in 0..grad.len() {
            let original = probe.tensors_mut()[t][idx];
            probe.tensors_mut()[t][idx] = original + STEP;
            let up = f(&probe);
            probe.tensors_mut()[t][idx] = original - STEP;
            let down = f(&probe);
            probe.tensors_mut()[t][idx] = original;
            let numeric = (up - down) / (2.0 * STEP);
            diff_sq += (numeric - grad[idx]).powi(2);
            norm_sq += numeric * numeric;
        }
    }
    diff_sq.sqrt() / norm_sq.sqrt().max(1e-8)
}

pub fn check(head: &HeadParameters, b: &Batch, cfg: &TrainConfig, which: Term) -> f64 {
    let (_, analytic) = term(head, b, cfg, which);
    relative_error(head, &analytic, |h| term(h, b, cfg, which).0)
}

/// Finite-difference gradient of `f` w.r.t. the entries of `z`.
pub fn numeric_grad_z<F: Fn(ArrayView2<'_, f64>) -> f64>(z: &Array2<f64>, f: F) -> Array2<f64> {
    const STEP: f64 = 1e-5;
    let mut probe = z.clone();
    let mut out = Array2::zeros(z.raw_dim());
    for idx in 0..z.len() {
        let (i, j) = (idx / z.ncols(), idx % z.ncols());
        let original = probe[[i, j]];
        probe[[i, j]] = original + STEP;
        let up = f(probe.view());
        probe[[i, j]] = original - STEP;
        let down = f(probe.view());
        probe[[i, j]] = original;
        out[[i, j]] = (up - down) / (2.0 * STEP);
    }
    out
}
