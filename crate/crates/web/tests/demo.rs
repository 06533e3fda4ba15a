use imbanid_web::*;

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[test]
fn curve_export_is_json() {
    let v: serde_json::Value = serde_json::from_str(&longtail_curve(120, 150, 10.0)).unwrap();
    let counts: Vec<usize> = serde_json::from_value(v["counts"].clone()).unwrap();
    assert_eq!(counts.len(), 150);
    assert_eq!(counts[0], 120);
    assert_eq!(v["total"].as_u64().unwrap() as usize, counts.iter().sum::<usize>());
}

#[test]
fn bad_arguments_come_back_as_error_json() {
    let v: serde_json::Value = serde_json::from_str(&longtail_curve(120, 10, 0.5)).unwrap();
    assert!(v["error"].is_string());
    let v: serde_json::Value = serde_json::from_str(&solver_marginals(5, 10.0, 2.0, -1.0, 0)).unwrap();
    assert!(v["error"].is_string());
}

#[test]
fn relaxed_marginal_tracks_the_long_tail() {
    let m = marginals(10, 10.0, 2.5, 2.0, 3).unwrap();
    for beta in [&m.rot, &m.cot, &m.mot] {
        assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(m.cot.iter().all(|b| (b - 0.1).abs() < 1e-6));
    assert!(l1(&m.rot, &m.truth) < l1(&m.cot, &m.truth));
    assert!(m.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn simulated_predictions_follow_counts() {
    let (p, labels) = simulated_predictions(&[3, 2, 1], 1.0, 0);
    assert_eq!(p.dim(), (6, 3));
    assert_eq!(labels, vec![0, 0, 0, 1, 1, 2]);
    for row in p.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn tight_blobs_are_recovered() {
    let b = blobs(4, 30, 0.05, 1).unwrap();
    assert_eq!(b.points.len(), 120);
    assert_eq!(b.centroids.len(), 4);
    assert_eq!(b.acc, 1.0);
    assert!((b.nmi - 1.0).abs() < 1e-12 && (b.ari - 1.0).abs() < 1e-12);
    let again: serde_json::Value = serde_json::from_str(&kmeans_blobs(4, 30, 0.05, 1)).unwrap();
    assert_eq!(again["acc"].as_f64().unwrap(), 1.0);
}
