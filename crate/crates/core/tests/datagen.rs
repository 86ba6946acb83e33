use cgdro::datagen::{eval_cond_prob, gen_source, gen_sources, gen_target, make_spec};
use cgdro::{Setting, SettingParams};
use proptest::prelude::*;

fn small(setting: Setting) -> SettingParams {
    match setting {
        Setting::S1 | Setting::S3 => SettingParams {
            d: Some(6),
            ..Default::default()
        },
        _ => SettingParams::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conditional_probabilities_form_a_distribution(
        which in 0usize..Setting::ALL.len(),
        seed in 0u64..50,
        x in prop::collection::vec(-4.0..4.0f64, 20),
        source in 0usize..10,
    ) {
        let setting = Setting::ALL[which];
        let spec = make_spec(setting, small(setting), seed).unwrap();
        let l = source % spec.l();
        let p = eval_cond_prob(&spec, &x[..spec.d], l);
        prop_assert_eq!(p.len(), spec.k + 1);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0), "{:?}", p);
    }

    #[test]
    fn generation_is_pure_in_seed(seed in any::<u64>(), n in 1usize..40) {
        let spec = make_spec(Setting::S4, SettingParams::default(), 3).unwrap();
        let sizes: Vec<usize> = (0..spec.l()).map(|l| n + l).collect();
        prop_assert_eq!(gen_sources(&spec, &sizes, seed).unwrap(), gen_sources(&spec, &sizes, seed).unwrap());
        prop_assert_eq!(gen_target(&spec, n, seed).unwrap(), gen_target(&spec, n, seed).unwrap());
    }
}

#[test]
fn fig2_covariate_means_match_their_laws() {
    let spec = make_spec(Setting::Fig2, SettingParams::default(), 0).unwrap();
    let target = gen_target(&spec, 100_000, 1).unwrap();
    for (got, want) in target.x.column_means().iter().zip(&spec.target.mean) {
        assert!((got - want).abs() <= 0.02, "target mean {got} vs {want}");
    }
    let src = gen_source(&spec, 1, 100_000, 2).unwrap();
    for (got, want) in src
        .x
        .column_means()
        .iter()
        .zip(&spec.sources[1].covariates.mean)
    {
        assert!((got - want).abs() <= 0.02, "source mean {got} vs {want}");
    }
}

#[test]
fn label_frequencies_match_conditional_probabilities() {
    let spec = make_spec(Setting::Fig2, SettingParams::default(), 0).unwrap();
    let ds = gen_source(&spec, 0, 50_000, 8).unwrap();
    let expected: f64 =
        ds.x.rows()
            .map(|r| eval_cond_prob(&spec, r, 0)[1])
            .sum::<f64>()
            / ds.len() as f64;
    let observed = ds.class_counts()[1] as f64 / ds.len() as f64;
    // Binomial sd at 50k draws is below 0.0023.
    assert!(
        (observed - expected).abs() < 0.01,
        "{observed} vs {expected}"
    );
}

#[test]
fn sources_use_distinct_streams() {
    let spec = make_spec(Setting::S1, small(Setting::S1), 0).unwrap();
    let both = gen_sources(&spec, &[50, 50], 4).unwrap();
    assert_ne!(both[0].x, both[1].x);
    assert_eq!(both[0].source_id, 1);
    assert_eq!(both[1].source_id, 2);
}
