//! Oracle evaluation against a known data-generating process.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Covariates, ProblemConfig};
use crate::datagen::{cond_prob_into, draw_labels, gen_sources, gen_target, DgpSpec};
use crate::error::Result;
use crate::rng::{derive_path, rng_from};
use crate::softmax::probs_and_lse;

/// −(1/N) Σ_i Σ_c P^(l)(c | X_i) log p_c(X_i, θ) for one source.
pub fn source_loss(theta: &[f64], spec: &DgpSpec, l: usize, target_x: &Covariates) -> f64 {
    let k = spec.k;
    let mut truth = vec![0.0; k + 1];
    let mut p = vec![0.0; k];
    let d = target_x.n_cols();
    let mut total = 0.0;
    for row in target_x.rows() {
        cond_prob_into(spec, row, l, &mut truth);
        let lse = probs_and_lse(row, theta, &mut p);
        // log p_0 = −lse, log p_c = θ_cᵀx − lse.
        let mut ce = truth[0] * lse;
        for c in 1..=k {
            let s: f64 = theta[(c - 1) * d..c * d]
                .iter()
                .zip(row)
                .map(|(a, b)| a * b)
                .sum();
            ce -= truth[c] * (s - lse);
        }
        total += ce;
    }
    total / target_x.n_rows() as f64
}

/// Worst case over sources of the expected target cross-entropy, with the
/// per-source values.
pub fn worst_case_loss(theta: &[f64], spec: &DgpSpec, target_x: &Covariates) -> (f64, Vec<f64>) {
    let per: Vec<f64> = (0..spec.l())
        .map(|l| source_loss(theta, spec, l, target_x))
        .collect();
    let worst = per.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (worst, per)
}

/// Average −log P^(l)(Y | X) with Y drawn once from P^(l)(· | X) at the
/// target covariates.
pub fn non_reducible_loss(spec: &DgpSpec, l: usize, target_x: &Covariates, seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    let y = draw_labels(spec, l, target_x, &mut rng);
    let mut p = vec![0.0; spec.k + 1];
    let mut total = 0.0;
    for (row, &yi) in target_x.rows().zip(&y) {
        cond_prob_into(spec, row, l, &mut p);
        total -= p[yi].ln();
    }
    total / target_x.n_rows() as f64
}

/// E_Q[H(P^(l)(· | X))] estimated on the given covariates.
pub fn conditional_entropy(spec: &DgpSpec, l: usize, target_x: &Covariates) -> f64 {
    let mut p = vec![0.0; spec.k + 1];
    let mut total = 0.0;
    for row in target_x.rows() {
        cond_prob_into(spec, row, l, &mut p);
        total -= p
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|v| v * v.ln())
            .sum::<f64>();
    }
    total / target_x.n_rows() as f64
}

/// μ^(l) = −E_Q[P^(l)(· | X) ⊗ X] over classes 1..K, by Monte Carlo on
/// `n_draws` fresh target covariates.
pub fn mu_monte_carlo(spec: &DgpSpec, n_draws: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let x = gen_target(spec, n_draws, seed)?.x;
    let (d, k) = (spec.d, spec.k);
    let mut p = vec![0.0; k + 1];
    let mut out = vec![vec![0.0; d * k]; spec.l()];
    for (l, mu) in out.iter_mut().enumerate() {
        for row in x.rows() {
            cond_prob_into(spec, row, l, &mut p);
            for c in 1..=k {
                for (m, &v) in mu[(c - 1) * d..c * d].iter_mut().zip(row) {
                    *m -= p[c] * v;
                }
            }
        }
        mu.iter_mut().for_each(|m| *m /= n_draws as f64);
    }
    Ok(out)
}

/// ‖θ̂ − θ_ref‖₂ / √d.
pub fn estimation_error(theta_hat: &[f64], theta_ref: &[f64], d: usize) -> f64 {
    let sq: f64 = theta_hat
        .iter()
        .zip(theta_ref)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    sq.sqrt() / (d as f64).sqrt()
}

pub const POPULATION_N: usize = 100_000;
pub const POPULATION_N_TARGET: usize = 200_000;

fn cache_dir() -> PathBuf {
    std::env::var_os("CGDRO_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cgdro-cache"))
}

fn cache_key(
    spec: &DgpSpec,
    n_big: usize,
    n_target: usize,
    seed: u64,
    config: &ProblemConfig,
) -> String {
    let mut h = Sha256::new();
    h.update(spec.fingerprint().as_bytes());
    h.update(format!("|{n_big}|{n_target}|{seed}|").as_bytes());
    h.update(
        serde_json::to_string(config)
            .expect("config serializes")
            .as_bytes(),
    );
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct CachedTheta {
    theta: Vec<f64>,
}

/// Reference θ*: the full estimation pipeline on n_big rows per source and
/// n_target target rows. Results are cached on disk under `$CGDRO_CACHE_DIR`
/// (default: the system temp directory).
pub fn population_theta(
    spec: &DgpSpec,
    n_big: usize,
    n_target: usize,
    seed: u64,
    config: &ProblemConfig,
) -> Result<Vec<f64>> {
    let path = cache_dir().join(format!(
        "theta-{}.json",
        cache_key(spec, n_big, n_target, seed, config)
    ));
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(c) = serde_json::from_str::<CachedTheta>(&text) {
            return Ok(c.theta);
        }
    }
    let sources = gen_sources(spec, &vec![n_big; spec.l()], derive_path(seed, &[0]))?;
    let target = gen_target(spec, n_target, derive_path(seed, &[1]))?;
    let fit = crate::solver::cgdro_fit(&sources, &target, config)?;
    // Cache failures only cost a recomputation next time.
    if std::fs::create_dir_all(cache_dir()).is_ok() {
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        if let Ok(text) = serde_json::to_string(&CachedTheta {
            theta: fit.theta.clone(),
        }) {
            if std::fs::write(&tmp, text).is_ok() {
                let _ = std::fs::rename(&tmp, &path);
            }
        }
    }
    Ok(fit.theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub worst_case_loss: f64,
    pub per_source_loss: Vec<f64>,
    pub non_reducible: Vec<f64>,
    pub est_error: Option<f64>,
}

pub fn evaluate(
    method: &str,
    theta: &[f64],
    spec: &DgpSpec,
    eval_x: &Covariates,
    theta_ref: Option<&[f64]>,
    seed: u64,
) -> EvalReport {
    let (worst_case_loss, per_source_loss) = worst_case_loss(theta, spec, eval_x);
    EvalReport {
        method: method.to_string(),
        worst_case_loss,
        per_source_loss,
        non_reducible: (0..spec.l())
            .map(|l| non_reducible_loss(spec, l, eval_x, derive_path(seed, &[l as u64])))
            .collect(),
        est_error: theta_ref.map(|r| estimation_error(theta, r, spec.d)),
    }
}
