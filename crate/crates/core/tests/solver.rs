use cgdro::datagen::{gen_source, gen_sources, gen_target, make_spec};
use cgdro::nuisance::fit_softmax_regression;
use cgdro::rng::rng_from;
use cgdro::softmax::NewtonOptions;
use cgdro::solver::{
    cgdro_fit, duality_gap, erm_pooled, grad_s_hat, group_dro, inner_min, mirror_prox,
    solve_moments, CgdroProblem, Method, MirrorProxOptions, ObjectiveContext,
};
use cgdro::{
    Covariates, LabeledDataset, MomentSet, ProblemConfig, Setting, SettingParams, UnlabeledDataset,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn random_target(seed: u64, n: usize, d: usize) -> UnlabeledDataset {
    let mut rng = rng_from(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    UnlabeledDataset::new(Covariates::from_rows(&rows).unwrap()).unwrap()
}

fn random_moments(seed: u64, l: usize, d: usize, k: usize) -> MomentSet {
    let mut rng = rng_from(seed);
    let dk = d * k;
    let mu = (0..l)
        .map(|_| (0..dk).map(|_| rng.random_range(-0.6..0.6)).collect())
        .collect();
    MomentSet::new(
        d,
        k,
        mu,
        vec![DMatrix::identity(dk, dk) * 1e-3; l],
        vec![100; l],
    )
    .unwrap()
}

/// Moments that label laws on `target` could produce: μ_l = −mean(p_l(x) ⊗ x) for random θ_l.
fn realizable_moments(seed: u64, l: usize, target: &UnlabeledDataset, k: usize) -> MomentSet {
    let mut rng = rng_from(seed);
    let d = target.dim();
    let n = target.len() as f64;
    let mu = (0..l)
        .map(|_| {
            let theta: Vec<f64> = (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut acc = vec![0.0; d * k];
            for row in target.x.rows() {
                let s: Vec<f64> = (0..k)
                    .map(|c| (0..d).map(|j| theta[c * d + j] * row[j]).sum())
                    .collect();
                let z = 1.0 + s.iter().map(|v| v.exp()).sum::<f64>();
                for c in 0..k {
                    for j in 0..d {
                        acc[c * d + j] -= s[c].exp() / z * row[j] / n;
                    }
                }
            }
            acc
        })
        .collect();
    MomentSet::new(
        d,
        k,
        mu,
        vec![DMatrix::identity(d * k, d * k) * 1e-3; l],
        vec![100; l],
    )
    .unwrap()
}

/// All points of the simplex with coordinates on a 1/steps grid.
fn simplex_mesh(l: usize, steps: usize) -> Vec<Vec<f64>> {
    fn rec(l: usize, left: usize, steps: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if cur.len() == l - 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / steps as f64).collect());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(l, left - c, steps, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(l, steps, steps, &mut Vec::new(), &mut out);
    out
}

fn s1_problem(n: usize, n_target: usize, d: usize) -> (Vec<LabeledDataset>, UnlabeledDataset) {
    let spec = make_spec(
        Setting::S1,
        SettingParams {
            d: Some(d),
            ..Default::default()
        },
        2,
    )
    .unwrap();
    (
        gen_sources(&spec, &[n, n], 21).unwrap(),
        gen_target(&spec, n_target, 22).unwrap(),
    )
}

#[test]
fn vertex_maximum_matches_simplex_mesh() {
    for (l, steps) in [(2usize, 100usize), (2, 1000), (3, 100)] {
        for seed in 0..10 {
            let m = random_moments(seed, l, 2, 2);
            let target = random_target(seed + 100, 30, 2);
            let ctx = ObjectiveContext::new(&m, &target).unwrap();
            let theta: Vec<f64> = {
                let mut rng = rng_from(seed + 200);
                (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()
            };
            let (vertex, _) = ctx.max_over_gamma(&theta);
            let mesh = simplex_mesh(l, steps)
                .iter()
                .map(|g| ctx.phi(&theta, g))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                (vertex - mesh).abs() <= 1e-12,
                "L={l} seed={seed}: {vertex} vs {mesh}"
            );
        }
    }
}

#[test]
fn vertex_ties_break_to_lowest_index() {
    let mu = vec![vec![0.3, -0.1], vec![0.3, -0.1]];
    let m = MomentSet::new(2, 1, mu, vec![DMatrix::zeros(2, 2); 2], vec![10, 10]).unwrap();
    let target = random_target(1, 5, 2);
    let ctx = ObjectiveContext::new(&m, &target).unwrap();
    assert_eq!(ctx.max_over_gamma(&[1.0, 1.0]).1, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn objective_is_convex_in_theta(
        seed in any::<u64>(),
        a in prop::collection::vec(-3.0..3.0f64, 6),
        b in prop::collection::vec(-3.0..3.0f64, 6),
        t in 0.01..0.99f64,
        w in 0.0..1.0f64,
    ) {
        let m = random_moments(seed, 2, 3, 2);
        let target = random_target(seed ^ 1, 25, 3);
        let ctx = ObjectiveContext::new(&m, &target).unwrap();
        let gamma = [w, 1.0 - w];
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let lhs = ctx.phi(&mid, &gamma);
        let rhs = t * ctx.phi(&a, &gamma) + (1.0 - t) * ctx.phi(&b, &gamma);
        prop_assert!(lhs <= rhs + 1e-10);
    }

    #[test]
    fn duality_gap_is_nonnegative(
        seed in any::<u64>(),
        theta in prop::collection::vec(-2.0..2.0f64, 4),
        raw in prop::collection::vec(0.01..1.0f64, 3),
    ) {
        let target = random_target(seed ^ 7, 40, 2);
        let m = realizable_moments(seed, 3, &target, 2);
        let ctx = ObjectiveContext::new(&m, &target).unwrap();
        let s: f64 = raw.iter().sum();
        let gamma: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let (gap, _) = duality_gap(&theta, &gamma, &ctx, &[0.0; 4], 1e-10).unwrap();
        prop_assert!(gap >= -1e-8);
    }

    #[test]
    fn inner_min_recovers_constructed_stationary_point(
        seed in any::<u64>(),
        theta0 in prop::collection::vec(-1.5..1.5f64, 6),
    ) {
        let target = random_target(seed, 60, 3);
        let g = grad_s_hat(&theta0, &target.x, 2);
        let mu: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = MomentSet::new(3, 2, vec![mu], vec![DMatrix::zeros(6, 6)], vec![60]).unwrap();
        let ctx = ObjectiveContext::new(&m, &target).unwrap();
        let theta = inner_min(&[1.0], &ctx, &[0.0; 6], 1e-11).unwrap();
        for (a, b) in theta.iter().zip(&theta0) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn single_source_inner_min_equals_logistic_mle() {
    let (sources, _) = s1_problem(800, 10, 4);
    let src = &sources[0];
    let target = UnlabeledDataset::new(src.x.clone()).unwrap();
    let config = ProblemConfig {
        no_shift: true,
        ..Default::default()
    };
    let m = cgdro::moments::estimate_moments(std::slice::from_ref(src), &target, None).unwrap();
    let ctx = ObjectiveContext::new(&m, &target).unwrap();
    let theta = inner_min(&[1.0], &ctx, &[0.0; 4], config.inner_tol).unwrap();
    let (mle, gn) = fit_softmax_regression(
        &src.x,
        &src.y,
        2,
        0.0,
        false,
        NewtonOptions {
            tol: 1e-11,
            max_iter: 100,
        },
    )
    .unwrap();
    assert!(gn <= 1e-8);
    for (a, b) in theta.iter().zip(&mle) {
        assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
    }
}

#[test]
fn averaged_gap_trace_is_nonincreasing_on_s1() {
    let (sources, target) = s1_problem(500, 2000, 10);
    let m = cgdro::moments::estimate_moments(&sources, &target, None).unwrap();
    let ctx = ObjectiveContext::new(&m, &target).unwrap();
    let problem = CgdroProblem {
        ctx,
        inner_tol: 1e-10,
    };
    let mut opts = MirrorProxOptions::from_eta(0.1, 2, 1000, 1e-12, 25);
    opts.last_iterate = false;
    let fit = mirror_prox(&problem, opts, Method::Cgdro).unwrap();
    assert_eq!(fit.gap_trace.len(), 40);
    for w in fit.gap_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-8, "gap rose from {} to {}", w[0], w[1]);
    }
    assert!(fit.gap_trace.iter().all(|&g| g >= -1e-8));
}

#[test]
fn weights_stay_interior_and_gap_certifies_exit() {
    let (sources, target) = s1_problem(300, 1000, 5);
    let config = ProblemConfig {
        no_shift: true,
        tol: 1e-5,
        ..Default::default()
    };
    let fit = cgdro_fit(&sources, &target, &config).unwrap();
    assert!(fit.converged);
    assert!(fit.gamma.iter().all(|&g| g > 0.0 && g < 1.0));
    assert!((fit.gamma.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    let gap = fit.final_gap().unwrap();
    assert!((-1e-8..=1e-5).contains(&gap));
    assert_eq!(fit, cgdro_fit(&sources, &target, &config).unwrap());
}

#[test]
fn identical_sources_reduce_to_single_source_fit() {
    let (sources, target) = s1_problem(400, 800, 3);
    let m1 = cgdro::moments::estimate_moments(&sources[..1], &target, None).unwrap();
    let twin = MomentSet::new(
        3,
        1,
        vec![m1.mu_hat[0].clone(), m1.mu_hat[0].clone()],
        vec![m1.cov_hat[0].clone(), m1.cov_hat[0].clone()],
        vec![400, 400],
    )
    .unwrap();
    let config = ProblemConfig {
        tol: 1e-7,
        ..Default::default()
    };
    let single = solve_moments(&m1, &target, &config).unwrap();
    let both = solve_moments(&twin, &target, &config).unwrap();
    assert!(both.gamma.iter().all(|g| (g - 0.5).abs() <= 1e-6));
    for (a, b) in single.theta.iter().zip(&both.theta) {
        assert!((a - b).abs() <= 1e-3);
    }
}

#[test]
fn group_dro_with_one_source_is_erm() {
    let (sources, _) = s1_problem(600, 10, 4);
    let one = &sources[..1];
    // θ error scales like √(gap / curvature), so certify far below the 1e-3 comparison.
    let opts = MirrorProxOptions::from_eta(0.1, 1, 50_000, 1e-10, 25);
    let gd = group_dro(one, opts, 1e-12).unwrap();
    let erm = erm_pooled(one, 0.0).unwrap();
    assert!(gd.converged);
    for (a, b) in gd.theta.iter().zip(&erm) {
        assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
    }
}

#[test]
fn duplicated_source_pulls_erm_toward_it() {
    // 1-D, K = 1, no intercept: source A favors class 1 for x > 0, source B
    // the opposite, so the pooled slope moves toward A when A is duplicated.
    let make = |sign: f64, id: u32| {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let x = (i as f64 - 19.5) / 10.0;
            rows.push(vec![x]);
            let p = 1.0 / (1.0 + (-2.0 * sign * x).exp());
            y.push(usize::from((i * 37 % 100) as f64 / 100.0 < p));
        }
        LabeledDataset::new(Covariates::from_rows(&rows).unwrap(), y, id, 2).unwrap()
    };
    let a = make(1.0, 1);
    let b = make(-0.5, 2);
    let base = erm_pooled(&[a.clone(), b.clone()], 0.0).unwrap()[0];
    let dup = erm_pooled(&[a.clone(), a.clone(), b.clone()], 0.0).unwrap()[0];
    let only_a = erm_pooled(std::slice::from_ref(&a), 0.0).unwrap()[0];
    assert!(only_a > base);
    assert!(dup > base && dup < only_a, "{base} < {dup} < {only_a}");
}

#[test]
fn group_dro_and_cgdro_agree_without_shift() {
    // Target covariates drawn from the (shared) source covariate law.
    let (sources, _) = s1_problem(1500, 1, 3);
    let spec = make_spec(
        Setting::S1,
        SettingParams {
            d: Some(3),
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let target = UnlabeledDataset::new(gen_source(&spec, 0, 3000, 23).unwrap().x).unwrap();
    let config = ProblemConfig {
        no_shift: true,
        tol: 1e-5,
        ..Default::default()
    };
    let cg = cgdro_fit(&sources, &target, &config).unwrap();
    let opts = MirrorProxOptions::from_eta(0.1, 2, 20_000, 1e-5, 25);
    let gd = group_dro(&sources, opts, 1e-10).unwrap();
    let diff = cg
        .theta
        .iter()
        .zip(&gd.theta)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(diff < 0.3, "‖θ_cg − θ_gd‖ = {diff}");
    assert!(gd.final_gap().unwrap() <= 1e-5);
}
