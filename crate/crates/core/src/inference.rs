//! Perturbation-and-filtering confidence intervals for single coordinates of
//! the CG-DRO parameter.
//!
//! Each draw m perturbs the moment vectors with their estimated Gaussian
//! noise, keeps the draw only if no coordinate strays too far, re-solves the
//! weight problem on the perturbed moments, and contributes a normal interval
//! around the refitted θ̂^[m]. The reported set is the union of those intervals.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{LabeledDataset, ProblemConfig, ResultDocument, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, covariance, project_simplex, psd_project, symmetrize};
use crate::moments::MomentSet;
use crate::rng::{derive_path, rng_from};
use crate::softmax::probs_and_lse;
use crate::solver::{
    cgdro_fit_detailed, grad_s_hat, hess_s_hat, inner_min, CgdroFit, FitResult, ObjectiveContext,
};

pub const SAMPLER_JITTER: f64 = 1e-12;
pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const GAMMA_KKT_TOL: f64 = 1e-9;
pub const GAMMA_MAX_ITER: usize = 10_000;
const HESS_JITTER: f64 = 1e-8;

/// Upper q-quantile of the standard normal.
pub fn z_upper(q: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - q)
}

/// Draws μ̂^(l,m) ~ N(μ̂^(l), V̂^(l)) with a Cholesky factor per source.
#[derive(Debug, Clone)]
pub struct PerturbationSampler {
    means: Vec<Vec<f64>>,
    factors: Vec<DMatrix<f64>>,
    seed: u64,
}

impl PerturbationSampler {
    pub fn new(moments: &MomentSet, seed: u64) -> Result<Self> {
        let factors = moments
            .cov_hat
            .iter()
            .map(|c| Ok(cholesky_jittered(c, SAMPLER_JITTER)?.l()))
            .collect::<Result<Vec<_>>>()?;
        Ok(PerturbationSampler {
            means: moments.mu_hat.clone(),
            factors,
            seed,
        })
    }

    /// Draw m; a pure function of (seed, m).
    pub fn draw(&self, m: usize) -> Vec<Vec<f64>> {
        let mut rng = rng_from(derive_path(self.seed, &[m as u64]));
        self.means
            .iter()
            .zip(&self.factors)
            .map(|(mu, chol)| {
                let z: DVector<f64> =
                    DVector::from_fn(mu.len(), |_, _| StandardNormal.sample(&mut rng));
                let e = chol * z;
                mu.iter().zip(e.iter()).map(|(a, b)| a + b).collect()
            })
            .collect()
    }
}

/// M draws of the perturbed moments, indexed [m][l].
pub fn sample_perturbed_moments(
    moments: &MomentSet,
    m_total: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let s = PerturbationSampler::new(moments, seed)?;
    Ok((0..m_total).map(|m| s.draw(m)).collect())
}

/// (1+η₀)·z_{α₀/(dKL)}.
pub fn filter_threshold(moments: &MomentSet, alpha0: f64, eta0: f64) -> f64 {
    let count = (moments.dk() * moments.l()) as f64;
    (1.0 + eta0) * z_upper(alpha0 / count)
}

/// max_{l,j} |μ̂^(l,m)_j − μ̂^(l)_j| / √(V̂^(l)_jj + 1/n_l).
pub fn draw_deviation(draw: &[Vec<f64>], moments: &MomentSet) -> f64 {
    let mut worst = 0.0f64;
    for (l, mu_m) in draw.iter().enumerate() {
        let inv_n = 1.0 / moments.n_per_source[l] as f64;
        for (j, (a, b)) in mu_m.iter().zip(&moments.mu_hat[l]).enumerate() {
            let scale = (moments.cov_hat[l][(j, j)] + inv_n).sqrt();
            worst = worst.max((a - b).abs() / scale);
        }
    }
    worst
}

/// Indices of draws passing the filter.
pub fn filter_indices(
    draws: &[Vec<Vec<f64>>],
    moments: &MomentSet,
    alpha0: f64,
    eta0: f64,
) -> Vec<usize> {
    let thr = filter_threshold(moments, alpha0, eta0);
    (0..draws.len())
        .filter(|&m| draw_deviation(&draws[m], moments) <= thr)
        .collect()
}

/// Inputs to the perturbed weight problem that do not depend on m.
#[derive(Debug, Clone)]
pub struct WeightProblem {
    /// Ĥ(θ̂)⁻¹.
    pub hess_inv: DMatrix<f64>,
    pub grad: DVector<f64>,
    pub theta: DVector<f64>,
}

impl WeightProblem {
    pub fn new(theta_hat: &[f64], hess: &DMatrix<f64>, grad: &[f64]) -> Result<Self> {
        let chol = cholesky_jittered(hess, HESS_JITTER)?;
        Ok(WeightProblem {
            hess_inv: symmetrize(&chol.inverse()),
            grad: DVector::from_column_slice(grad),
            theta: DVector::from_column_slice(theta_hat),
        })
    }

    /// F(γ) = −½(Uγ + g)ᵀĤ⁻¹(Uγ + g) + θ̂ᵀUγ.
    pub fn objective(&self, u: &DMatrix<f64>, gamma: &[f64]) -> f64 {
        let v = u * DVector::from_column_slice(gamma) + &self.grad;
        -0.5 * v.dot(&(&self.hess_inv * &v))
            + self.theta.dot(&(u * DVector::from_column_slice(gamma)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSolution {
    pub gamma: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Projected-gradient residual ‖γ − P_Δ(γ + ∇F(γ))‖_∞.
pub fn kkt_residual(gamma: &[f64], grad: &[f64]) -> f64 {
    let moved: Vec<f64> = gamma.iter().zip(grad).map(|(g, d)| g + d).collect();
    project_simplex(&moved)
        .iter()
        .zip(gamma)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Maximizes F over the simplex. The objective is the concave quadratic
/// −½γᵀQγ + bᵀγ with Q = UᵀĤ⁻¹U and b = Uᵀ(θ̂ − Ĥ⁻¹g); accelerated projected
/// gradient with step 1/λ_max(Q) and restarts, from the uniform point.
pub fn solve_gamma_m(u: &DMatrix<f64>, wp: &WeightProblem) -> Result<GammaSolution> {
    let l = u.ncols();
    let hu = &wp.hess_inv * u;
    let q = symmetrize(&(u.transpose() * &hu));
    let b: Vec<f64> = (u.transpose() * (&wp.theta - &wp.hess_inv * &wp.grad))
        .iter()
        .copied()
        .collect();
    solve_simplex_qp(&q, &b, l)
}

/// max_{γ∈Δ} −½γᵀQγ + bᵀγ for PSD Q.
pub fn solve_simplex_qp(q: &DMatrix<f64>, b: &[f64], l: usize) -> Result<GammaSolution> {
    let grad_at = |g: &[f64]| -> Vec<f64> {
        let qg = q * DVector::from_column_slice(g);
        b.iter().zip(qg.iter()).map(|(bi, v)| bi - v).collect()
    };
    let value = |g: &[f64]| -> f64 {
        let qg = q * DVector::from_column_slice(g);
        b.iter().zip(g).map(|(bi, gi)| bi * gi).sum::<f64>()
            - 0.5 * qg.iter().zip(g).map(|(a, c)| a * c).sum::<f64>()
    };
    let lip = q
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let step = 1.0 / lip;
    let mut x = vec![1.0 / l as f64; l];
    let mut y = x.clone();
    let mut tk = 1.0f64;
    let mut fx = value(&x);
    for it in 0..GAMMA_MAX_ITER {
        let gx = grad_at(&x);
        let res = kkt_residual(&x, &gx);
        if res <= GAMMA_KKT_TOL {
            return Ok(GammaSolution {
                gamma: x,
                kkt_residual: res,
                iterations: it,
            });
        }
        let gy = grad_at(&y);
        let moved: Vec<f64> = y.iter().zip(&gy).map(|(a, g)| a + step * g).collect();
        let x_new = project_simplex(&moved);
        let f_new = value(&x_new);
        if f_new < fx {
            // Momentum overshot: restart from a plain projected step at x.
            let moved: Vec<f64> = x.iter().zip(&gx).map(|(a, g)| a + step * g).collect();
            x = project_simplex(&moved);
            fx = value(&x);
            y = x.clone();
            tk = 1.0;
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let beta = (tk - 1.0) / t_new;
        y = x_new
            .iter()
            .zip(&x)
            .map(|(a, o)| a + beta * (a - o))
            .collect();
        x = x_new;
        fx = f_new;
        tk = t_new;
    }
    let res = kkt_residual(&x, &grad_at(&x));
    if res <= GAMMA_KKT_TOL {
        return Ok(GammaSolution {
            gamma: x,
            kkt_residual: res,
            iterations: GAMMA_MAX_ITER,
        });
    }
    Err(Error::NonConvergence {
        what: "perturbed weight solver",
        iterations: GAMMA_MAX_ITER,
        residual: res,
    })
}

/// θ̂^[m] = argmin_θ Σ_l γ_l θᵀμ̂^(l) + Ŝ(θ) on the unperturbed moments.
pub fn solve_theta_m(
    gamma_m: &[f64],
    ctx: &ObjectiveContext<'_>,
    warm: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    inner_min(gamma_m, ctx, warm, tol)
}

/// Ĥ(θ^[m])⁻¹ Ŵ Ĥ(θ^[m])⁻¹ with Ŵ = Σ_l γ_l² V̂^(l) + (1/N) Cov_Q(p(X, θ^[m]) ⊗ X).
pub fn variance_m(
    gamma_m: &[f64],
    theta_m: &[f64],
    moments: &MomentSet,
    target: &UnlabeledDataset,
) -> Result<DMatrix<f64>> {
    let w = sandwich_middle(gamma_m, theta_m, moments, target);
    let h = hess_s_hat(theta_m, &target.x, moments.k);
    let hinv = symmetrize(&cholesky_jittered(&h, HESS_JITTER)?.inverse());
    Ok(psd_project(&(&hinv * w * &hinv)))
}

/// Ŵ^[m].
pub fn sandwich_middle(
    gamma_m: &[f64],
    theta_m: &[f64],
    moments: &MomentSet,
    target: &UnlabeledDataset,
) -> DMatrix<f64> {
    let (d, k) = (moments.d, moments.k);
    let dk = d * k;
    let mut w = DMatrix::zeros(dk, dk);
    for (g, v) in gamma_m.iter().zip(&moments.cov_hat) {
        w += v * (g * g);
    }
    let nq = target.len();
    let mut p = vec![0.0; k];
    let cq = covariance(nq, dk, |j, buf| {
        let row = target.x.row(j);
        probs_and_lse(row, theta_m, &mut p);
        for c in 0..k {
            for (b, &x) in buf[c * d..(c + 1) * d].iter_mut().zip(row) {
                *b = p[c] * x;
            }
        }
    });
    w + cq / nq as f64
}

/// θ̂_j ± z_{α'/2}·√V̂_jj, with V̂_jj floored at 1e-12.
pub fn interval_m(theta_m: &[f64], v_m: &DMatrix<f64>, coord: usize, alpha_prime: f64) -> [f64; 2] {
    let half = z_upper(alpha_prime / 2.0) * v_m[(coord, coord)].max(VARIANCE_FLOOR).sqrt();
    [theta_m[coord] - half, theta_m[coord] + half]
}

/// Sorted union of closed intervals.
pub fn ci_union(intervals: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut v: Vec<[f64; 2]> = intervals.to_vec();
    v.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut out: Vec<[f64; 2]> = Vec::new();
    for iv in v {
        match out.last_mut() {
            Some(last) if iv[0] <= last[1] => last[1] = last[1].max(iv[1]),
            _ => out.push(iv),
        }
    }
    out
}

pub fn union_length(ci: &[[f64; 2]]) -> f64 {
    ci.iter().map(|iv| iv[1] - iv[0]).sum()
}

pub fn union_contains(ci: &[[f64; 2]], x: f64) -> bool {
    ci.iter().any(|iv| iv[0] <= x && x <= iv[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedDraw {
    pub m: usize,
    pub mu_samples: Vec<Vec<f64>>,
    pub deviation: f64,
    pub kept: bool,
    pub gamma_m: Option<Vec<f64>>,
    pub kkt_residual: Option<f64>,
    pub theta_m: Option<Vec<f64>>,
    #[serde(skip)]
    pub v_m: Option<DMatrix<f64>>,
    /// √V̂^[m]_jj for the requested coordinate.
    pub se_m: Option<f64>,
    pub interval: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub coord: usize,
    pub alpha: f64,
    pub alpha0: f64,
    pub alpha_prime: f64,
    pub fit: FitResult,
    pub draws: Vec<PerturbedDraw>,
    pub ci: Vec<[f64; 2]>,
    pub filtered_m: usize,
    pub reject_zero: bool,
}

impl InferenceResult {
    pub fn intervals(&self) -> Vec<[f64; 2]> {
        self.draws.iter().filter_map(|d| d.interval).collect()
    }

    pub fn width(&self) -> f64 {
        union_length(&self.ci)
    }

    pub fn covers(&self, x: f64) -> bool {
        union_contains(&self.ci, x)
    }

    pub fn to_document(&self) -> ResultDocument {
        let mut doc = self.fit.to_document();
        doc.ci = self.ci.clone();
        doc.filtered_m = self.filtered_m;
        doc.coord = Some(self.coord);
        doc.reject_zero = Some(self.reject_zero);
        doc
    }
}

/// Fit followed by perturbation inference on coordinate `coord` (0-based).
pub fn infer(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
    config: &ProblemConfig,
    coord: usize,
) -> Result<InferenceResult> {
    let fit = cgdro_fit_detailed(sources, target, config)?;
    infer_from_fit(&fit, target, config, coord)
}

/// Inference on an existing fit; draws are processed in parallel over m.
pub fn infer_from_fit(
    fit: &CgdroFit,
    target: &UnlabeledDataset,
    config: &ProblemConfig,
    coord: usize,
) -> Result<InferenceResult> {
    config.validate()?;
    let moments = &fit.moments;
    if coord >= moments.dk() {
        return Err(Error::Validation(format!(
            "coordinate {coord} out of range (θ has {} entries)",
            moments.dk()
        )));
    }
    let ctx = ObjectiveContext::new(moments, target)?;
    let theta_hat = &fit.fit.theta;
    let wp = WeightProblem::new(
        theta_hat,
        &hess_s_hat(theta_hat, &target.x, moments.k),
        &grad_s_hat(theta_hat, &target.x, moments.k),
    )?;
    let sampler = PerturbationSampler::new(moments, derive_path(config.seed, &[2]))?;
    let threshold = filter_threshold(moments, config.alpha0, config.eta0);
    let alpha_prime = config.alpha_prime();

    let draws = (0..config.resamples)
        .into_par_iter()
        .map(|m| -> Result<PerturbedDraw> {
            let mu_samples = sampler.draw(m);
            let deviation = draw_deviation(&mu_samples, moments);
            let mut draw = PerturbedDraw {
                m,
                mu_samples,
                deviation,
                kept: deviation <= threshold,
                gamma_m: None,
                kkt_residual: None,
                theta_m: None,
                v_m: None,
                se_m: None,
                interval: None,
            };
            if !draw.kept {
                return Ok(draw);
            }
            let u = DMatrix::from_fn(moments.dk(), moments.l(), |r, c| draw.mu_samples[c][r]);
            let gs = solve_gamma_m(&u, &wp)?;
            let theta_m = solve_theta_m(&gs.gamma, &ctx, theta_hat, config.inner_tol)?;
            let v_m = variance_m(&gs.gamma, &theta_m, moments, target)?;
            draw.interval = Some(interval_m(&theta_m, &v_m, coord, alpha_prime));
            draw.se_m = Some(v_m[(coord, coord)].max(VARIANCE_FLOOR).sqrt());
            draw.kkt_residual = Some(gs.kkt_residual);
            draw.gamma_m = Some(gs.gamma);
            draw.theta_m = Some(theta_m);
            draw.v_m = Some(v_m);
            Ok(draw)
        })
        .collect::<Result<Vec<_>>>()?;

    let intervals: Vec<[f64; 2]> = draws.iter().filter_map(|d| d.interval).collect();
    if intervals.is_empty() {
        return Err(Error::EmptyFilteredSet);
    }
    let ci = ci_union(&intervals);
    Ok(InferenceResult {
        coord,
        alpha: config.alpha,
        alpha0: config.alpha0,
        alpha_prime,
        fit: fit.fit.clone(),
        filtered_m: intervals.len(),
        reject_zero: !union_contains(&ci, 0.0),
        draws,
        ci,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_quantile_oracle() {
        assert_abs_diff_eq!(z_upper(0.025), 1.959963984540054, epsilon = 1e-9);
        assert_abs_diff_eq!(z_upper(0.02), 2.053748910631823, epsilon = 1e-9);
    }

    #[test]
    fn interval_example() {
        let v = DMatrix::from_element(1, 1, 0.01);
        let iv = interval_m(&[0.5], &v, 0, 0.04);
        assert_abs_diff_eq!(iv[0], 0.294625, epsilon = 1e-5);
        assert_abs_diff_eq!(iv[1], 0.705375, epsilon = 1e-5);
        let z = interval_m(&[0.5], &DMatrix::zeros(1, 1), 0, 0.04);
        assert!(z[1] > z[0] && z[1] - z[0] < 1e-5);
    }

    #[test]
    fn union_examples() {
        assert_eq!(ci_union(&[[0.0, 1.0], [0.5, 2.0]]), vec![[0.0, 2.0]]);
        assert_eq!(
            ci_union(&[[3.0, 4.0], [0.0, 1.0]]),
            vec![[0.0, 1.0], [3.0, 4.0]]
        );
    }

    #[test]
    fn single_group_weight_is_one() {
        let q = DMatrix::from_element(1, 1, 2.0);
        let s = solve_simplex_qp(&q, &[0.3], 1).unwrap();
        assert_eq!(s.gamma, vec![1.0]);
    }
}
