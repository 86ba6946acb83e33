use cgdro::{
    load_labeled, load_results, load_unlabeled, save_labeled, save_results, save_unlabeled,
    Covariates, Error, LabeledDataset, ResultDocument, UnlabeledDataset,
};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn labeled(max_rows: usize, d: usize) -> impl Strategy<Value = Vec<(Vec<f64>, usize)>> {
    prop::collection::vec((prop::collection::vec(finite(), d), 0usize..3), 1..max_rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn labeled_csv_round_trip_is_bitwise(d in 1usize..4, rows_a in labeled(12, 3), rows_b in labeled(12, 3)) {
        let build = |rows: &[(Vec<f64>, usize)], id: u32| {
            let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0[..d].to_vec()).collect();
            let y: Vec<usize> = rows.iter().map(|r| r.1).collect();
            LabeledDataset::new(Covariates::from_rows(&x).unwrap(), y, id, 3).unwrap()
        };
        let sources = vec![build(&rows_a, 1), build(&rows_b, 4)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        save_labeled(&sources, &path).unwrap();
        let back = load_labeled(&path).unwrap();
        prop_assert_eq!(back.len(), 2);
        for (a, b) in sources.iter().zip(&back) {
            prop_assert_eq!(a.source_id, b.source_id);
            prop_assert_eq!(&a.y, &b.y);
            let bits = |c: &Covariates| c.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.x), bits(&b.x));
        }
    }

    #[test]
    fn unlabeled_csv_round_trip_is_bitwise(rows in prop::collection::vec(prop::collection::vec(finite(), 2), 1..20)) {
        let target = UnlabeledDataset::new(Covariates::from_rows(&rows).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        save_unlabeled(&target, &path).unwrap();
        let back = load_unlabeled(&path).unwrap();
        let bits = |c: &Covariates| c.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&target.x), bits(&back.x));
    }

    #[test]
    fn result_document_round_trip_is_exact(
        theta in prop::collection::vec(finite(), 0..8),
        gamma in prop::collection::vec(0.0..1.0f64, 1..4),
        gaps in prop::collection::vec(finite(), 0..5),
        iterations in 0usize..100_000,
        ci in prop::collection::vec((finite(), finite()), 0..4),
        filtered_m in 0usize..1000,
        reject in any::<Option<bool>>(),
    ) {
        let doc = ResultDocument {
            theta,
            gamma,
            gap_trace: gaps,
            iterations,
            ci: ci.into_iter().map(|(a, b)| [a, b]).collect(),
            filtered_m,
            method: Some("cgdro".into()),
            converged: Some(true),
            coord: reject.map(|_| 3),
            reject_zero: reject,
            nuisance_diagnostics: None,
            moments: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        save_results(&doc, &path).unwrap();
        let back = load_results(&path).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&doc.theta), bits(&back.theta));
        prop_assert_eq!(bits(&doc.gap_trace), bits(&back.gap_trace));
        prop_assert_eq!(&doc, &back);
    }

    #[test]
    fn bad_value_reports_its_line(n_rows in 1usize..15, bad in 0usize..15) {
        let bad = bad % n_rows;
        let mut text = String::from("source,y,x1,x2\n");
        for i in 0..n_rows {
            let cell = if i == bad { "oops".to_string() } else { format!("{}", i as f64 * 0.5) };
            text.push_str(&format!("1,{},{},1.0\n", i % 2, cell));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, text).unwrap();
        match load_labeled(&path) {
            Err(Error::Parse { line, .. }) => prop_assert_eq!(line, bad as u64 + 2),
            other => prop_assert!(false, "expected parse error, got {:?}", other),
        }
    }
}

#[test]
fn result_json_has_documented_keys() {
    let doc = ResultDocument {
        theta: vec![0.0; 2],
        gamma: vec![1.0],
        gap_trace: vec![1e-5],
        iterations: 25,
        ci: vec![[-1.0, 1.0]],
        filtered_m: 7,
        method: None,
        converged: None,
        coord: None,
        reject_zero: None,
        nuisance_diagnostics: None,
        moments: None,
    };
    let v: serde_json::Value = serde_json::to_value(&doc).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    for k in [
        "theta",
        "gamma",
        "gap_trace",
        "iterations",
        "ci",
        "filtered_m",
    ] {
        assert!(keys.contains(&k), "{k}");
    }
    assert_eq!(keys.len(), 6);
}

#[test]
fn header_mismatch_is_line_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    std::fs::write(&path, "y,source,x1\n0,1,2.0\n").unwrap();
    assert!(matches!(
        load_labeled(&path),
        Err(Error::Parse { line: 1, .. })
    ));
}

#[test]
fn non_finite_values_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.csv");
    std::fs::write(&path, "x1,x2\n1.0,2.0\nNaN,1.0\n").unwrap();
    assert!(matches!(
        load_unlabeled(&path),
        Err(Error::Parse { line: 3, .. })
    ));
}
