//! Gaussian-mixture bundles for tests, benchmarks and the demo.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Distance between any two class means, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for GmmSpec {
    fn default() -> Self {
        Self { classes: 20, dim: 32, per_class: 420, separation: 4.0, sigma: 1.0, seed: 0 }
    }
}

/// Class means on scaled coordinate axes, so every pair sits exactly
/// `separation * sigma` apart. Needs `dim >= classes`.
pub fn class_means(spec: &GmmSpec) -> Result<Array2<f64>> {
    if spec.classes == 0 || spec.dim < spec.classes {
        return Err(Error::Config(format!(
            "need 0 < classes <= dim, got {} classes in {} dimensions",
            spec.classes, spec.dim
        )));
    }
    let offset = spec.separation * spec.sigma / std::f64::consts::SQRT_2;
    let mut means = Array2::zeros((spec.classes, spec.dim));
    for k in 0..spec.classes {
        means[[k, k]] = offset;
    }
    Ok(means)
}

/// A balanced, fully labeled source bundle. Every row is tagged
/// UNLABELED_TRAIN and all classes count as known; feed it to the long-tail
/// sampler to get a benchmark split.
pub fn gaussian_mixture(spec: &GmmSpec) -> Result<DatasetBundle> {
    if !(spec.sigma > 0.0) || spec.per_class == 0 {
        return Err(Error::Config("sigma and per_class must be positive".into()));
    }
    let means = class_means(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut labels: Vec<usize> = (0..n).map(|i| i / spec.per_class).collect();
    labels.shuffle(&mut rng);
    let mut x = Array2::<f32>::zeros((n, spec.dim));
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..spec.dim {
            let g: f64 = StandardNormal.sample(&mut rng);
            x[[i, j]] = (means[[c, j]] + spec.sigma * g) as f32;
        }
    }
    DatasetBundle::try_new(
        x,
        None,
        labels.into_iter().map(Some).collect(),
        vec![Split::UnlabeledTrain; n],
        spec.classes,
        (0..spec.classes).collect::<BTreeSet<_>>(),
        None,
    )
}
