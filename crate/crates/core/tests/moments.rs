use cgdro::datagen::{cond_prob_into, gen_source, gen_target, make_spec};
use cgdro::harness::log_log_slope;
use cgdro::linalg::{min_eigenvalue, psd_project};
use cgdro::metrics::mu_monte_carlo;
use cgdro::moments::{cov_hat_dml, cov_hat_no_shift, estimate_moments, mu_hat_dml};
use cgdro::nuisance::{fit_nuisance, NuisanceOptions};
use cgdro::rng::{derive_path, rng_from};
use cgdro::{Covariates, LabeledDataset, NuisancePair, Setting, SettingParams, UnlabeledDataset};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

/// Two-pass covariance with divisor n on an explicit data matrix.
fn naive_cov(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let dim = rows[0].len();
    let z = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
    let mean = z.row_mean();
    let centered = DMatrix::from_fn(n, dim, |i, j| z[(i, j)] - mean[j]);
    centered.transpose() * centered / n as f64
}

fn kron(weights: &[f64], x: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .flat_map(|w| x.iter().map(move |v| w * v))
        .collect()
}

struct Problem {
    ds: LabeledDataset,
    target: UnlabeledDataset,
    nu: NuisancePair,
}

fn random_problem(seed: u64, n: usize, nq: usize, d: usize, k: usize) -> Problem {
    let mut rng = rng_from(seed);
    let nc = k + 1;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        rows.push(
            (0..d)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect::<Vec<f64>>(),
        );
        y.push(i % nc);
    }
    let target_rows: Vec<Vec<f64>> = (0..nq)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mut probs = |m: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(m * nc);
        for _ in 0..m {
            let raw: Vec<f64> = (0..nc).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            out.extend(raw.iter().map(|v| v / s));
        }
        out
    };
    let source_probs = probs(n);
    let target_probs = probs(nq);
    let ratio: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let ds = LabeledDataset::new(Covariates::from_rows(&rows).unwrap(), y, 1, nc).unwrap();
    let target = UnlabeledDataset::new(Covariates::from_rows(&target_rows).unwrap()).unwrap();
    let nu = NuisancePair::from_predictions(1, nc, source_probs, target_probs, ratio).unwrap();
    Problem { ds, target, nu }
}

fn dml_oracle(p: &Problem) -> DMatrix<f64> {
    let nc = p.nu.n_classes;
    let k = nc - 1;
    let src: Vec<Vec<f64>> = (0..p.ds.len())
        .map(|i| {
            let f = &p.nu.source_probs[i * nc..(i + 1) * nc];
            let w: Vec<f64> = (1..=k)
                .map(|c| p.nu.source_ratio[i] * (f[c] - if p.ds.y[i] == c { 1.0 } else { 0.0 }))
                .collect();
            kron(&w, p.ds.x.row(i))
        })
        .collect();
    let tgt: Vec<Vec<f64>> = (0..p.target.len())
        .map(|j| {
            kron(
                &p.nu.target_probs[j * nc + 1..(j + 1) * nc],
                p.target.x.row(j),
            )
        })
        .collect();
    naive_cov(&src) / p.ds.len() as f64 + naive_cov(&tgt) / p.target.len() as f64
}

#[test]
fn dml_covariance_matches_brute_force() {
    for seed in 0..5 {
        let p = random_problem(seed, 150, 120, 3, 2);
        let got = cov_hat_dml(&p.ds, &p.target, &p.nu).unwrap();
        let want = dml_oracle(&p);
        let err = (&got - &want).abs().max();
        assert!(err <= 1e-12, "seed {seed}: {err:e}");
    }
}

#[test]
fn label_covariance_matches_brute_force() {
    let p = random_problem(9, 200, 10, 4, 2);
    let rows: Vec<Vec<f64>> = (0..p.ds.len())
        .map(|i| {
            let onehot: Vec<f64> = (1..=2)
                .map(|c| if p.ds.y[i] == c { 1.0 } else { 0.0 })
                .collect();
            kron(&onehot, p.ds.x.row(i))
        })
        .collect();
    let want = naive_cov(&rows) / 200.0;
    let got = cov_hat_no_shift(&p.ds).unwrap();
    assert!((&got - &want).abs().max() <= 1e-12);
}

#[test]
fn covariance_scales_quadratically_with_covariates() {
    let p = random_problem(3, 80, 60, 2, 1);
    let double = |c: &Covariates| c.map_values(|v| 2.0 * v);
    let ds2 = LabeledDataset::new(double(&p.ds.x), p.ds.y.clone(), 1, 2).unwrap();
    let t2 = UnlabeledDataset::new(double(&p.target.x)).unwrap();
    let base = cov_hat_dml(&p.ds, &p.target, &p.nu).unwrap();
    let scaled = cov_hat_dml(&ds2, &t2, &p.nu).unwrap();
    assert!((&scaled - &base * 4.0).abs().max() <= 1e-13);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn covariances_are_symmetric_psd(seed in any::<u64>(), n in 4usize..40, d in 1usize..4, k in 1usize..3) {
        let p = random_problem(seed, n, n + 3, d, k);
        for v in [cov_hat_dml(&p.ds, &p.target, &p.nu).unwrap(), cov_hat_no_shift(&p.ds).unwrap()] {
            prop_assert_eq!(&v, &v.transpose());
            prop_assert!(min_eigenvalue(&v) >= -1e-12);
        }
    }

    #[test]
    fn psd_projection_barely_moves_well_conditioned_input(seed in any::<u64>(), dim in 1usize..6) {
        let mut rng = rng_from(seed);
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(dim, dim);
        let proj = psd_project(&m);
        let before = m.clone().symmetric_eigen().eigenvalues;
        let after = proj.symmetric_eigen().eigenvalues;
        let mut b: Vec<f64> = before.iter().copied().collect();
        let mut c: Vec<f64> = after.iter().copied().collect();
        b.sort_by(f64::total_cmp);
        c.sort_by(f64::total_cmp);
        for (x, y) in b.iter().zip(&c) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }
}

#[test]
fn dml_with_true_nuisances_tracks_monte_carlo() {
    let spec = make_spec(Setting::Fig2, SettingParams::default(), 6).unwrap();
    let truth = mu_monte_carlo(&spec, 400_000, 1).unwrap();
    let ds = gen_source(&spec, 0, 20_000, 2).unwrap();
    let target = gen_target(&spec, 20_000, 3).unwrap();
    let nc = spec.k + 1;
    let mut p = vec![0.0; nc];
    let mut probs = |x: &Covariates| -> Vec<f64> {
        x.rows()
            .flat_map(|r| {
                cond_prob_into(&spec, r, 0, &mut p);
                p.clone()
            })
            .collect()
    };
    let source_probs = probs(&ds.x);
    let target_probs = probs(&target.x);
    let ratio: Vec<f64> = ds.x.rows().map(|r| spec.density_ratio(0, r)).collect();
    let nu = NuisancePair::from_predictions(1, nc, source_probs, target_probs, ratio).unwrap();
    let mu = mu_hat_dml(&ds, &target, &nu).unwrap();
    let err = mu
        .iter()
        .zip(&truth[0])
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(err < 0.05, "‖μ̂ − μ_MC‖ = {err}");
}

#[test]
fn dml_error_shrinks_with_sample_size() {
    let spec = make_spec(Setting::Fig2, SettingParams::default(), 6).unwrap();
    let truth = mu_monte_carlo(&spec, 400_000, 1).unwrap();
    let opts = NuisanceOptions {
        ridge: Some(1e-3),
        ratio_clip: [0.05, 20.0],
        p_min: 1e-6,
        no_shift: false,
    };
    let sizes = [500usize, 2000, 8000];
    let reps = 4;
    let errors: Vec<f64> = sizes
        .iter()
        .map(|&n| {
            (0..reps)
                .map(|r| {
                    let s = derive_path(77, &[n as u64, r]);
                    let ds = gen_source(&spec, 0, n, derive_path(s, &[0])).unwrap();
                    let target = gen_target(&spec, n, derive_path(s, &[1])).unwrap();
                    let nu = fit_nuisance(&ds, &target, &opts, derive_path(s, &[2])).unwrap();
                    let m = estimate_moments(&[ds], &target, Some(&[nu])).unwrap();
                    m.mu_hat[0]
                        .iter()
                        .zip(&truth[0])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / reps as f64
        })
        .collect();
    let slope = log_log_slope(&sizes.map(|n| n as f64), &errors);
    assert!(slope <= -0.35, "errors {errors:?}, slope {slope}");
}
