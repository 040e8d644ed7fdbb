use std::io::Write;

use proptest::prelude::*;

use qepdx::harness::data::{gen_clusters, gen_rhombus, gen_timeseries, load_csv, rhombus_label, u_jump, u_turn, Task, TS_NOISE};
use qepdx::QepError;

#[test]
fn trajectories_at_piece_boundaries() {
    let cases = [(0.0, 1.0, 0.0), (0.5, 1.0, 0.75), (1.0, 1.0, 1.5), (1.2, 0.5, 1.1), (1.5, 0.5, 0.5), (1.6, 2.0, 0.8), (2.0, 2.0, 2.0)];
    for (t, j, turn) in cases {
        assert_eq!(u_jump(t), j, "u_J({t})");
        assert!((u_turn(t) - turn).abs() < 1e-15, "u_T({t})");
    }
    for t in [-0.1, 2.01, 2.5] {
        assert_eq!((u_jump(t), u_turn(t)), (0.0, 0.0));
    }
}

#[test]
fn timeseries_layout_and_noise() {
    let d = gen_timeseries(4);
    assert_eq!((d.train.len(), d.test.len()), (100, 50));
    assert_eq!(d, gen_timeseries(4));
    let truth = d.truth.as_ref().unwrap();
    for (k, &i) in d.test.iter().enumerate() {
        let t = 2.0 * k as f64 / 49.0;
        assert!((d.x[(i, 0)] - t).abs() < 1e-12);
        assert_eq!(truth[(i, 0)], u_jump(t));
        assert_eq!(truth[(i, 1)], u_turn(t));
    }
    let resid = &d.y - truth;
    let sd = (resid.norm_squared() / resid.len() as f64).sqrt();
    assert!((sd / TS_NOISE - 1.0).abs() < 0.15, "noise sd {sd}");
}

proptest! {
    #[test]
    fn rhombus_labels_follow_the_formula(x0 in -4.0f64..4.0, x1 in -4.0f64..4.0, u in 0.0f64..1.0) {
        let want = (0.4 * u * std::f64::consts::PI * (x0.abs() + x1.abs())).cos().round_ties_even() + 1.0;
        let got = rhombus_label(&[x0, x1], u);
        prop_assert_eq!(got as f64, want);
        prop_assert!(got <= 2);
    }
}

#[test]
fn rhombus_class_frequencies_are_reproducible() {
    let count = |s| {
        let d = gen_rhombus(s, 500, 0.8).unwrap();
        let l = d.labels.unwrap();
        (0..3).map(|c| l.iter().filter(|&&v| v == c).count()).collect::<Vec<_>>()
    };
    assert_eq!(count(8), count(8));
    assert_eq!(count(8).iter().sum::<usize>(), 500);
}

#[test]
fn clusters_shape_and_separation() {
    let d = gen_clusters(2);
    assert_eq!(d.y.shape(), (1000, 12));
    let labels = d.labels.as_ref().unwrap();
    let means: Vec<_> = (0..3)
        .map(|c| {
            let rows: Vec<usize> = (0..1000).filter(|&i| labels[i] == c).collect();
            rows.iter().map(|&i| d.y.row(i).transpose()).sum::<nalgebra::DVector<f64>>() / rows.len() as f64
        })
        .collect();
    for a in 0..3 {
        for b in a + 1..3 {
            assert!((&means[a] - &means[b]).norm() >= 5.0, "unit within-cluster sd");
        }
    }
    assert_eq!(d, gen_clusters(2));
}

fn csv_file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

#[test]
fn csv_toy_file_parses_exactly() {
    let f = csv_file("a,b,y\n1,2,3\n4,5,6\n7,8,9.5\n");
    let d = load_csv(f.path(), &["y".into()], Task::Regression, 0.67, 1).unwrap();
    assert_eq!(d.x, nalgebra::DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 4.0, 5.0, 7.0, 8.0]));
    assert_eq!(d.y, nalgebra::DMatrix::from_row_slice(3, 1, &[3.0, 6.0, 9.5]));
    assert_eq!(d.train.len() + d.test.len(), 3);
    let again = load_csv(f.path(), &["y".into()], Task::Regression, 0.67, 1).unwrap();
    assert_eq!((d.train, d.test), (again.train, again.test));
}

#[test]
fn csv_errors_name_the_row() {
    let f = csv_file("a,y\n1,2\n3,x\n");
    match load_csv(f.path(), &["y".into()], Task::Regression, 0.5, 0) {
        Err(QepError::Ingestion { row, .. }) => assert_eq!(row, 3),
        other => panic!("{other:?}"),
    }
    let f = csv_file("a,y\n1,2\n3\n");
    assert!(matches!(load_csv(f.path(), &["y".into()], Task::Regression, 0.5, 0), Err(QepError::Ingestion { row: 3, .. })));
    let f = csv_file("a,y\n1,2\n3,4\n");
    assert!(load_csv(f.path(), &["y".into()], Task::Regression, 1.0, 0).is_err());
}
