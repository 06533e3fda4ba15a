//! Clean/noisy split of pseudo-labels.
//!
//! A sample is clean when it is among the smallest-loss members of its
//! pseudo-class slice, with a per-class budget proportional to the class
//! prior, or when its pseudo-label confidence exceeds a threshold.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rot::argmax;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    /// Row-stochastic soft labels.
    pub soft: Array2<f64>,
    pub hard: Vec<usize>,
    pub confidence: Vec<f64>,
    pub clean: Vec<bool>,
    pub loss: Option<Vec<f64>>,
}

impl PseudoLabelSet {
    /// Derives hard labels and confidences from soft rows; nothing is clean.
    pub fn from_soft(soft: Array2<f64>) -> Self {
        let hard: Vec<usize> = soft.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
        let confidence = soft.rows().into_iter().zip(&hard).map(|(r, &c)| r[c]).collect();
        let clean = vec![false; soft.nrows()];
        Self { soft, hard, confidence, clean, loss: None }
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.soft.ncols()
    }

    pub fn clean_count(&self) -> usize {
        self.clean.iter().filter(|&&c| c).count()
    }

    /// Replaces row `i` with a certain label: one-hot, confidence 1, clean.
    pub fn pin(&mut self, i: usize, label: usize) {
        self.soft.row_mut(i).fill(0.0);
        self.soft[[i, label]] = 1.0;
        self.hard[i] = label;
        self.confidence[i] = 1.0;
        self.clean[i] = true;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Selection budget.
    pub rho: f64,
    /// Confidence threshold.
    pub tau_g: f64,
    /// Class prior; when `None` the solver's class marginal is used.
    pub class_prior: Option<Vec<f64>>,
    /// Treat every pseudo-label as clean (ablation).
    pub disabled: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { rho: 0.7, tau_g: 0.9, class_prior: None, disabled: false }
    }
}

impl FilterConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.tau_g) {
            return Err(Error::Config(format!("tau_g must be in [0, 1], got {}", self.tau_g)));
        }
        if let Some(r) = &self.class_prior {
            if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Config("class_prior must lie on the simplex".into()));
            }
        }
        Ok(())
    }
}

/// Cross-entropy of each prediction row against its hard pseudo-label.
pub fn per_sample_loss(p: ArrayView2<'_, f64>, pseudo: &PseudoLabelSet, prob_floor: f64) -> Result<Vec<f64>> {
    if p.nrows() != pseudo.len() {
        return Err(Error::LengthMismatch(p.nrows(), pseudo.len()));
    }
    Ok(pseudo.hard.iter().enumerate().map(|(i, &c)| -p[[i, c]].max(prob_floor).ln()).collect())
}

/// Per class `j`, keeps the `min(|s_j|, ceil(N rho r_j))` smallest-loss
/// members of the slice `s_j = {i : c_i = j}`. Returns sorted indices.
pub fn distribution_aware_select(pseudo: &PseudoLabelSet, rho: f64, prior: &[f64]) -> Result<Vec<usize>> {
    let losses = pseudo
        .loss
        .as_ref()
        .ok_or_else(|| Error::Config("per-sample losses must be set before selection".into()))?;
    if prior.len() != pseudo.n_classes() {
        return Err(Error::LengthMismatch(prior.len(), pseudo.n_classes()));
    }
    let n = pseudo.len() as f64;
    let mut slices: Vec<Vec<usize>> = vec![Vec::new(); pseudo.n_classes()];
    for (i, &c) in pseudo.hard.iter().enumerate() {
        slices[c].push(i);
    }
    let mut selected = Vec::new();
    for (j, mut slice) in slices.into_iter().enumerate() {
        // guard against n * rho * r landing a hair above an integer
        let budget = (n * rho * prior[j] - 1e-9).ceil().max(0.0) as usize;
        let keep = slice.len().min(budget);
        slice.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
        selected.extend_from_slice(&slice[..keep]);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// `{i : q_i > tau_g}`
pub fn quality_aware_select(pseudo: &PseudoLabelSet, tau_g: f64) -> Vec<usize> {
    (0..pseudo.len()).filter(|&i| pseudo.confidence[i] > tau_g).collect()
}

/// Marks the union of both selections as clean; other fields are unchanged.
pub fn clean_union(by_distribution: &[usize], by_quality: &[usize], mut pseudo: PseudoLabelSet) -> Result<PseudoLabelSet> {
    let n = pseudo.len();
    pseudo.clean = vec![false; n];
    for &i in by_distribution.iter().chain(by_quality) {
        if i >= n {
            return Err(Error::Shape(format!("index {i} out of range for {n} samples")));
        }
        pseudo.clean[i] = true;
    }
    Ok(pseudo)
}

/// Full filter: losses against `p`, both selections and their union.
/// `prior` is used unless the config carries its own.
pub fn apply(
    p: ArrayView2<'_, f64>,
    mut pseudo: PseudoLabelSet,
    prior: &[f64],
    cfg: &FilterConfig,
    prob_floor: f64,
) -> Result<PseudoLabelSet> {
    cfg.check()?;
    pseudo.loss = Some(per_sample_loss(p, &pseudo, prob_floor)?);
    if cfg.disabled {
        pseudo.clean = vec![true; pseudo.len()];
        return Ok(pseudo);
    }
    let prior = cfg.class_prior.as_deref().unwrap_or(prior);
    let s = distribution_aware_select(&pseudo, cfg.rho, prior)?;
    let a = quality_aware_select(&pseudo, cfg.tau_g);
    clean_union(&s, &a, pseudo)
}
