use std::collections::BTreeSet;

use imbanid::data::{load_bundle, save_bundle, DatasetBundle, Split};
use imbanid::longtail::{labeled_quota, sample_longtail, LongTailSpec};
use imbanid::synthetic::{class_means, gaussian_mixture, GmmSpec};
use ndarray::Array2;
use proptest::prelude::*;

fn arb_bundle() -> impl Strategy<Value = DatasetBundle> {
    (1usize..30, 1usize..6, 2usize..5, any::<bool>(), any::<bool>()).prop_flat_map(|(n, dim, k, aug, names)| {
        (
            prop::collection::vec(-1e3f32..1e3, n * dim),
            prop::collection::vec(-1e3f32..1e3, n * dim),
            prop::collection::vec((0..k, 0u8..3), n),
        )
            .prop_map(move |(e, a, rows)| {
                let known: BTreeSet<usize> = (0..k - 1).collect();
                let mut labels = Vec::new();
                let mut split = Vec::new();
                for (c, s) in rows {
                    let s = match s {
                        0 if known.contains(&c) => Split::LabeledKnown,
                        1 => Split::Test,
                        _ => Split::UnlabeledTrain,
                    };
                    split.push(s);
                    labels.push(Some(c));
                }
                DatasetBundle::from_parts(
                    Array2::from_shape_vec((n, dim), e).unwrap(),
                    aug.then(|| Array2::from_shape_vec((n, dim), a).unwrap()),
                    labels,
                    split,
                    k,
                    known,
                    names.then(|| (0..k).map(|c| format!("class {c}")).collect()),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_round_trip(bundle in arb_bundle()) {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        prop_assert_eq!(back, bundle);
    }

    #[test]
    fn sampled_splits_are_consistent(seed in 0u64..1000, gamma in 1.0f64..8.0, known_ratio in 0.3f64..1.0) {
        let source = gaussian_mixture(&GmmSpec { classes: 8, dim: 8, per_class: 60, seed, ..GmmSpec::default() }).unwrap();
        let spec = LongTailSpec { gamma, known_ratio, seed, test_per_class: 5, ..LongTailSpec::default() };
        let b = sample_longtail(&source, &spec).unwrap();
        prop_assert!(b.validate().is_empty());
        let truth = b.ground_truth_for_evaluation();
        let mut per_class = vec![0usize; 8];
        let mut labeled = vec![0usize; 8];
        let mut test = vec![0usize; 8];
        for (i, s) in b.splits().iter().enumerate() {
            let c = truth[i].unwrap();
            match s {
                Split::LabeledKnown => {
                    prop_assert!(b.known_classes().contains(&c));
                    labeled[c] += 1;
                    per_class[c] += 1;
                }
                Split::UnlabeledTrain => per_class[c] += 1,
                Split::Test => test[c] += 1,
            }
        }
        prop_assert!(test.iter().all(|&t| t == 5));
        for c in 0..8 {
            let expected = if b.known_classes().contains(&c) { labeled_quota(per_class[c], 0.1) } else { 0 };
            prop_assert_eq!(labeled[c], expected);
        }
        let mut sorted = per_class.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let ratio = sorted[0] as f64 / *sorted.last().unwrap() as f64;
        prop_assert!(ratio <= gamma * (1.0 + 1.0 / *sorted.last().unwrap() as f64) + 1e-9);
    }
}

#[test]
fn sampling_is_deterministic() {
    let source = gaussian_mixture(&GmmSpec { classes: 6, dim: 8, per_class: 50, ..GmmSpec::default() }).unwrap();
    let spec = LongTailSpec { test_per_class: 5, ..LongTailSpec::default() };
    assert_eq!(sample_longtail(&source, &spec).unwrap(), sample_longtail(&source, &spec).unwrap());
    let other = LongTailSpec { seed: 1, ..spec };
    assert_ne!(sample_longtail(&source, &spec).unwrap(), sample_longtail(&source, &other).unwrap());
}

#[test]
fn gmm_means_are_equidistant() {
    let spec = GmmSpec { classes: 5, dim: 7, separation: 3.0, sigma: 2.0, ..GmmSpec::default() };
    let m = class_means(&spec).unwrap();
    for a in 0..5 {
        for b in a + 1..5 {
            let d = (&m.row(a) - &m.row(b)).mapv(|x| x * x).sum().sqrt();
            assert!((d - 6.0).abs() < 1e-12);
        }
    }
    assert!(class_means(&GmmSpec { classes: 9, dim: 4, ..GmmSpec::default() }).is_err());
}

#[test]
fn gmm_class_spread_matches_sigma() {
    let spec = GmmSpec { classes: 2, dim: 4, per_class: 4000, sigma: 0.5, ..GmmSpec::default() };
    let b = gaussian_mixture(&spec).unwrap();
    let means = class_means(&spec).unwrap();
    let truth = b.ground_truth_for_evaluation();
    let x = b.gather(&(0..b.len()).collect::<Vec<_>>());
    let mut sq = 0.0;
    for (row, c) in x.rows().into_iter().zip(truth) {
        sq += (&row - &means.row(c.unwrap())).mapv(|v| v * v).sum();
    }
    let var = sq / (b.len() * 4) as f64;
    assert!((var - 0.25).abs() < 0.01, "{var}");
}
