//! Long-tailed benchmark construction from a balanced labeled source.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongTailSpec {
    /// Imbalance ratio: largest over smallest class count.
    pub gamma: f64,
    pub known_ratio: f64,
    pub labeled_ratio: f64,
    pub seed: u64,
    pub balanced_test: bool,
    /// Test rows drawn per class.
    pub test_per_class: usize,
    /// Count of the most frequent class; defaults to what the source can
    /// supply after the test quota.
    pub n_max: Option<usize>,
}

impl Default for LongTailSpec {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            known_ratio: 0.75,
            labeled_ratio: 0.1,
            seed: 0,
            balanced_test: true,
            test_per_class: 15,
            n_max: None,
        }
    }
}

impl LongTailSpec {
    pub fn check(&self) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(Error::Config(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        if !(self.known_ratio > 0.0 && self.known_ratio <= 1.0) {
            return Err(Error::Config(format!("known_ratio must be in (0, 1], got {}", self.known_ratio)));
        }
        if !(0.0..=1.0).contains(&self.labeled_ratio) {
            return Err(Error::Config(format!(
                "labeled_ratio must be in [0, 1], got {}",
                self.labeled_ratio
            )));
        }
        Ok(())
    }
}

/// Per-rank class sizes, largest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub Vec<usize>);

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Exponentially decaying class sizes, `floor(n_max * gamma^(-(k-1)/(K-1)))`.
pub fn longtail_counts(n_max: usize, classes: usize, gamma: f64) -> Result<ClassCounts> {
    if n_max == 0 || classes == 0 {
        return Err(Error::Config("n_max and the class count must be positive".into()));
    }
    if !(gamma >= 1.0) {
        return Err(Error::Config(format!("gamma must be >= 1, got {gamma}")));
    }
    if classes == 1 || gamma == 1.0 {
        return Ok(ClassCounts(vec![n_max; classes]));
    }
    let smallest = n_max as f64 / gamma;
    if smallest < 1.0 {
        return Err(Error::Degenerate(smallest));
    }
    let last = (classes - 1) as f64;
    let counts = (0..classes)
        .map(|k| {
            let exact = n_max as f64 * gamma.powf(-(k as f64) / last);
            // absorb representation error such as 100 * 10^-1 = 9.999..
            (exact + 1e-9).floor() as usize
        })
        .collect();
    Ok(ClassCounts(counts))
}

/// Randomly picks `round(known_ratio * K)` known classes; returns (known, novel),
/// each sorted ascending.
pub fn split_known_novel<R: Rng + ?Sized>(
    class_ids: &[usize],
    known_ratio: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = class_ids.to_vec();
    shuffled.shuffle(rng);
    let n_known = ((known_ratio * class_ids.len() as f64).round() as usize).min(class_ids.len());
    let mut known = shuffled[..n_known].to_vec();
    let mut novel = shuffled[n_known..].to_vec();
    known.sort_unstable();
    novel.sort_unstable();
    (known, novel)
}

/// Labeled rows drawn from a known class holding `count` training rows.
pub fn labeled_quota(count: usize, labeled_ratio: f64) -> usize {
    if labeled_ratio <= 0.0 || count == 0 {
        return 0;
    }
    ((labeled_ratio * count as f64 - 1e-9).ceil() as usize).clamp(1, count)
}

/// Builds a long-tailed split from a fully labeled, balanced source bundle.
///
/// Class ranks come from a random permutation, so which classes end up in the
/// head or tail is seed dependent. Every source row is eligible regardless of
/// its split tag.
pub fn sample_longtail(source: &DatasetBundle, spec: &LongTailSpec) -> Result<DatasetBundle> {
    spec.check()?;
    let k = source.num_classes();
    let labels = source.ground_truth_for_evaluation();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (row, label) in labels.iter().enumerate() {
        match label {
            Some(c) => by_class[*c].push(row),
            None => {
                return Err(Error::InvalidBundle(format!(
                    "source row {row} has no label; the sampler needs a fully labeled source"
                )))
            }
        }
    }
    let test_quota = if spec.balanced_test { spec.test_per_class } else { 0 };
    let n_max = match spec.n_max {
        Some(n) => n,
        None => by_class.iter().map(Vec::len).min().unwrap_or(0).saturating_sub(test_quota),
    };
    let counts = longtail_counts(n_max, k, spec.gamma)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_ids: Vec<usize> = (0..k).collect();
    let (known, _novel) = split_known_novel(&class_ids, spec.known_ratio, &mut rng);
    let known: BTreeSet<usize> = known.into_iter().collect();
    let mut rank_of_class = class_ids.clone();
    rank_of_class.shuffle(&mut rng);

    let mut picked: Vec<(usize, usize, Split)> = Vec::new();
    for class in 0..k {
        let n_train = counts.0[rank_of_class[class]];
        let rows = &mut by_class[class];
        let required = n_train + test_quota;
        if rows.len() < required {
            return Err(Error::InsufficientSource { class, available: rows.len(), required });
        }
        rows.shuffle(&mut rng);
        let (test, rest) = rows.split_at(test_quota);
        let train = &rest[..n_train];
        let n_labeled = if known.contains(&class) { labeled_quota(n_train, spec.labeled_ratio) } else { 0 };
        for (j, &row) in train.iter().enumerate() {
            let split = if j < n_labeled { Split::LabeledKnown } else { Split::UnlabeledTrain };
            picked.push((row, class, split));
        }
        picked.extend(test.iter().map(|&row| (row, class, Split::Test)));
    }
    picked.shuffle(&mut rng);

    let dim = source.dim();
    let take = |m: &Array2<f32>| {
        let mut out = Array2::zeros((picked.len(), dim));
        for (dst, (src, _, _)) in picked.iter().enumerate() {
            out.row_mut(dst).assign(&m.row(*src));
        }
        out
    };
    let embeddings = take(source.embeddings());
    let augmented = source.augmented().map(take);
    DatasetBundle::try_new(
        embeddings,
        augmented,
        picked.iter().map(|p| Some(p.1)).collect(),
        picked.iter().map(|p| p.2).collect(),
        k,
        known,
        source.class_names().map(<[String]>::to_vec),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

/// Head/medium/tail tags in 3:4:3 proportion by training frequency, ties
/// broken by class index. Indexed by class.
pub fn group_assignment(counts: &[usize]) -> Vec<Group> {
    let k = counts.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let n_head = (0.3 * k as f64).round() as usize;
    let n_medium = ((0.4 * k as f64).round() as usize).min(k - n_head);
    let mut groups = vec![Group::Tail; k];
    for (rank, &class) in order.iter().enumerate() {
        groups[class] = if rank < n_head {
            Group::Head
        } else if rank < n_head + n_medium {
            Group::Medium
        } else {
            Group::Tail
        };
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_class_counts() {
        // 100 * 10^(-1/2) = 31.62..
        assert_eq!(longtail_counts(100, 3, 10.0).unwrap().0, vec![100, 31, 10]);
    }

    #[test]
    fn balanced_when_gamma_is_one() {
        assert_eq!(longtail_counts(120, 150, 1.0).unwrap().0, vec![120; 150]);
        assert_eq!(longtail_counts(7, 1, 10.0).unwrap().0, vec![7]);
    }

    #[test]
    fn degenerate_tail() {
        assert!(matches!(longtail_counts(5, 4, 10.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn known_novel_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<usize> = (0..150).collect();
        let (known, novel) = split_known_novel(&ids, 0.75, &mut rng);
        assert_eq!((known.len(), novel.len()), (113, 37));
        let ids: Vec<usize> = (0..20).collect();
        let (known, novel) = split_known_novel(&ids, 0.75, &mut rng);
        assert_eq!((known.len(), novel.len()), (15, 5));
        let (known, novel) = split_known_novel(&ids, 1.0, &mut rng);
        assert_eq!((known.len(), novel.len()), (20, 0));
    }

    #[test]
    fn group_proportions() {
        let count = |k: usize, g: Group| {
            let counts: Vec<usize> = (0..k).rev().collect();
            group_assignment(&counts).into_iter().filter(|&x| x == g).count()
        };
        for (k, expected) in [(20, [6, 8, 6]), (10, [3, 4, 3]), (150, [45, 60, 45])] {
            let got = [count(k, Group::Head), count(k, Group::Medium), count(k, Group::Tail)];
            assert_eq!(got, expected, "K={k}");
        }
    }

    #[test]
    fn group_ties_by_index() {
        let groups = group_assignment(&[5; 10]);
        assert_eq!(&groups[..3], &[Group::Head; 3]);
        assert_eq!(&groups[7..], &[Group::Tail; 3]);
    }

    #[test]
    fn labeled_quota_has_minimum_one() {
        assert_eq!(labeled_quota(3, 0.1), 1);
        assert_eq!(labeled_quota(120, 0.1), 12);
        assert_eq!(labeled_quota(121, 0.1), 13);
        assert_eq!(labeled_quota(50, 0.0), 0);
        assert_eq!(labeled_quota(50, 1.0), 50);
    }

    proptest! {
        #[test]
        fn counts_non_increasing_and_ratio(n_max in 10usize..2000, k in 2usize..200, gamma in 1.0f64..10.0) {
            prop_assume!(n_max as f64 / gamma >= 1.0);
            let c = longtail_counts(n_max, k, gamma).unwrap().0;
            prop_assert!(c.windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(c[0], n_max);
            let last = *c.last().unwrap() as f64;
            prop_assert!(last >= 1.0);
            let ratio = n_max as f64 / last;
            prop_assert!(ratio <= gamma * (1.0 + 1.0 / last) + 1e-9);
            prop_assert!(ratio >= gamma * (1.0 - 2.0 / last) - 1e-9);
        }

        #[test]
        fn doubling_n_max_doubles_counts(n_max in 10usize..1000, k in 2usize..100, gamma in 1.0f64..10.0) {
            prop_assume!(n_max as f64 / gamma >= 1.0);
            let a = longtail_counts(n_max, k, gamma).unwrap().0;
            let b = longtail_counts(2 * n_max, k, gamma).unwrap().0;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((2 * x).abs_diff(*y) <= 1);
            }
        }
    }
}
