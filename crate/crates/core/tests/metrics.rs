use cgdro::datagen::{gen_target, make_spec};
use cgdro::metrics::{
    conditional_entropy, estimation_error, evaluate, non_reducible_loss, source_loss,
    worst_case_loss,
};
use cgdro::{Setting, SettingParams};
use proptest::prelude::*;

fn fig2() -> cgdro::DgpSpec {
    make_spec(Setting::Fig2, SettingParams::default(), 0).unwrap()
}

#[test]
fn non_reducible_loss_estimates_conditional_entropy() {
    let spec = fig2();
    let x = gen_target(&spec, 100_000, 3).unwrap().x;
    for l in 0..spec.l() {
        let nr = non_reducible_loss(&spec, l, &x, 10 + l as u64);
        let h = conditional_entropy(&spec, l, &x);
        assert!((nr - h).abs() <= 0.01, "source {l}: {nr} vs {h}");
    }
}

#[test]
fn worst_case_dominates_entropy_of_maximizing_source() {
    let spec = fig2();
    let x = gen_target(&spec, 20_000, 4).unwrap().x;
    for theta in [
        vec![0.0; 4],
        vec![0.3, 0.3, 0.2, 0.2],
        vec![-1.0, 0.5, 0.0, 2.0],
    ] {
        let (worst, per) = worst_case_loss(&theta, &spec, &x);
        let arg = per.iter().position(|&v| v == worst).unwrap();
        assert!(worst >= conditional_entropy(&spec, arg, &x) - 1e-12);
    }
}

#[test]
fn worst_case_equals_mixture_mesh_maximum() {
    // Linear in the mixture weight, so the 0.001-mesh maximum sits on a vertex.
    let spec = fig2();
    let x = gen_target(&spec, 5000, 5).unwrap().x;
    let theta = [0.4, -0.2, 0.1, 0.3];
    let (worst, per) = worst_case_loss(&theta, &spec, &x);
    let mesh = (0..=1000)
        .map(|i| {
            let g = i as f64 / 1000.0;
            g * per[0] + (1.0 - g) * per[1]
        })
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((worst - mesh).abs() <= 1e-12);
    assert_eq!(worst, per.iter().copied().fold(f64::NEG_INFINITY, f64::max));
}

#[test]
fn zero_parameter_loss_is_log_two() {
    let spec = fig2();
    let x = gen_target(&spec, 100, 6).unwrap().x;
    assert!((source_loss(&[0.0; 4], &spec, 0, &x) - 2f64.ln()).abs() <= 1e-12);
}

#[test]
fn evaluation_report_is_consistent() {
    let spec = fig2();
    let x = gen_target(&spec, 2000, 7).unwrap().x;
    let theta = [0.1, 0.2, 0.3, 0.4];
    let r = evaluate("cgdro", &theta, &spec, &x, Some(&[0.0; 4]), 9);
    assert_eq!(
        r.worst_case_loss,
        r.per_source_loss
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    );
    assert_eq!(r.non_reducible.len(), 2);
    assert!((r.est_error.unwrap() - estimation_error(&theta, &[0.0; 4], 4)).abs() == 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn worst_case_is_convex_along_segments(
        a in prop::collection::vec(-2.0..2.0f64, 4),
        b in prop::collection::vec(-2.0..2.0f64, 4),
        t in 0.0..1.0f64,
    ) {
        let spec = fig2();
        let x = gen_target(&spec, 500, 8).unwrap().x;
        let mid: Vec<f64> = a.iter().zip(&b).map(|(p, q)| t * p + (1.0 - t) * q).collect();
        let f = |th: &[f64]| worst_case_loss(th, &spec, &x).0;
        prop_assert!(f(&mid) <= t * f(&a) + (1.0 - t) * f(&b) + 1e-10);
    }

    #[test]
    fn estimation_error_obeys_triangle_inequality(
        a in prop::collection::vec(-5.0..5.0f64, 6),
        b in prop::collection::vec(-5.0..5.0f64, 6),
        c in prop::collection::vec(-5.0..5.0f64, 6),
    ) {
        let ac = estimation_error(&a, &c, 3);
        let ab = estimation_error(&a, &b, 3);
        let bc = estimation_error(&b, &c, 3);
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert_eq!(estimation_error(&a, &a, 3), 0.0);
    }
}
