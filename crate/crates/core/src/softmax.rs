//! Multinomial-logistic building blocks with class 0 as reference, and a
//! damped Newton minimizer for objectives of the form
//!
//! `J(θ) = θᵀc + Σ_i w_i log(1 + Σ_k exp(θ_kᵀx_i)) + (λ/2)‖θ_pen‖²`.
//!
//! Both the pooled cross-entropy fits and the CG-DRO inner problem take this
//! shape. θ is stacked class-major: θ[k·d + j].

use nalgebra::{DMatrix, DVector};

use crate::data::Covariates;
use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;

/// Non-reference class probabilities p_1..p_K at one row. Writes into `p` and
/// returns log(1 + Σ_k exp(θ_kᵀx)).
#[inline]
pub fn probs_and_lse(x: &[f64], theta: &[f64], p: &mut [f64]) -> f64 {
    let d = x.len();
    let mut m = 0.0f64;
    for (k, pk) in p.iter_mut().enumerate() {
        let s: f64 = theta[k * d..(k + 1) * d]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum();
        *pk = s;
        m = m.max(s);
    }
    let mut denom = (-m).exp();
    for pk in p.iter_mut() {
        *pk = (*pk - m).exp();
        denom += *pk;
    }
    for pk in p.iter_mut() {
        *pk /= denom;
    }
    m + denom.ln()
}

/// p(x, θ) = (p_1, …, p_K).
pub fn softmax_p(x: &[f64], theta: &[f64], k: usize) -> Vec<f64> {
    let mut p = vec![0.0; k];
    probs_and_lse(x, theta, &mut p);
    p
}

/// Row weights in the log-sum-exp term.
#[derive(Debug, Clone, Copy)]
pub enum Weights<'a> {
    /// 1/n for each of the n rows.
    Uniform,
    PerRow(&'a [f64]),
}

impl Weights<'_> {
    #[inline]
    fn get(&self, i: usize, n: usize) -> f64 {
        match self {
            Weights::Uniform => 1.0 / n as f64,
            Weights::PerRow(w) => w[i],
        }
    }
}

/// `θᵀc + Σ_i w_i lse(θ, x_i) + (λ/2) Σ_{penalized} θ_j²`.
#[derive(Debug, Clone)]
pub struct LseObjective<'a> {
    pub x: &'a Covariates,
    pub weights: Weights<'a>,
    pub linear: Vec<f64>,
    pub k: usize,
    pub ridge: f64,
    /// Coordinates exempt from the ridge (e.g. intercepts).
    pub unpenalized: Vec<usize>,
}

impl<'a> LseObjective<'a> {
    pub fn new(x: &'a Covariates, k: usize, linear: Vec<f64>) -> Self {
        LseObjective {
            x,
            weights: Weights::Uniform,
            linear,
            k,
            ridge: 0.0,
            unpenalized: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.x.n_cols() * self.k
    }

    fn penalty_mask(&self) -> Vec<f64> {
        let mut mask = vec![1.0; self.dim()];
        for &j in &self.unpenalized {
            mask[j] = 0.0;
        }
        mask
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let n = self.x.n_rows();
        let mut p = vec![0.0; self.k];
        let mut v = 0.0;
        for (i, row) in self.x.rows().enumerate() {
            v += self.weights.get(i, n) * probs_and_lse(row, theta, &mut p);
        }
        v += dot(theta, &self.linear);
        if self.ridge > 0.0 {
            let mask = self.penalty_mask();
            v += 0.5 * self.ridge * theta.iter().zip(&mask).map(|(t, m)| m * t * t).sum::<f64>();
        }
        v
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let (_, g) = self.value_grad(theta);
        g
    }

    pub fn value_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let d = self.x.n_cols();
        let n = self.x.n_rows();
        let mut p = vec![0.0; self.k];
        let mut g = self.linear.clone();
        let mut v = dot(theta, &self.linear);
        for (i, row) in self.x.rows().enumerate() {
            let w = self.weights.get(i, n);
            v += w * probs_and_lse(row, theta, &mut p);
            for (k, &pk) in p.iter().enumerate() {
                let c = w * pk;
                for (gj, &xj) in g[k * d..(k + 1) * d].iter_mut().zip(row) {
                    *gj += c * xj;
                }
            }
        }
        if self.ridge > 0.0 {
            let mask = self.penalty_mask();
            for ((gj, &t), &m) in g.iter_mut().zip(theta).zip(&mask) {
                *gj += self.ridge * m * t;
                v += 0.5 * self.ridge * m * t * t;
            }
        }
        (v, g)
    }

    /// Σ_i w_i (diag(p) − ppᵀ) ⊗ x_i x_iᵀ + λ·diag(mask).
    pub fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = self.x.n_cols();
        let n = self.x.n_rows();
        let k = self.k;
        let dk = d * k;
        let mut p = vec![0.0; k];
        // Upper triangles of the K(K+1)/2 blocks, each accumulated as Σ c_i x xᵀ.
        let n_blocks = k * (k + 1) / 2;
        let mut acc = vec![0.0; n_blocks * d * d];
        let mut coef = vec![0.0; n_blocks];
        for (i, row) in self.x.rows().enumerate() {
            let w = self.weights.get(i, n);
            probs_and_lse(row, theta, &mut p);
            let mut bi = 0;
            for a in 0..k {
                for b in a..k {
                    let dab = if a == b {
                        p[a] - p[a] * p[a]
                    } else {
                        -p[a] * p[b]
                    };
                    coef[bi] = w * dab;
                    bi += 1;
                }
            }
            for r in 0..d {
                let xr = row[r];
                if xr == 0.0 {
                    continue;
                }
                for s in r..d {
                    let xx = xr * row[s];
                    for (bi, &c) in coef.iter().enumerate() {
                        acc[bi * d * d + r * d + s] += c * xx;
                    }
                }
            }
        }
        let mut h = DMatrix::zeros(dk, dk);
        let mut bi = 0;
        for a in 0..k {
            for b in a..k {
                let blk = &acc[bi * d * d..(bi + 1) * d * d];
                for r in 0..d {
                    for s in r..d {
                        let v = blk[r * d + s];
                        for (u, w) in [(r, s), (s, r)] {
                            h[(a * d + u, b * d + w)] = v;
                            h[(b * d + w, a * d + u)] = v;
                        }
                    }
                }
                bi += 1;
            }
        }
        if self.ridge > 0.0 {
            let mask = self.penalty_mask();
            for (j, m) in mask.iter().enumerate() {
                h[(j, j)] += self.ridge * m;
            }
        }
        h
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-9,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub theta: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Objective value after each accepted step, starting from the initial point.
    pub objective_trace: Vec<f64>,
}

const ARMIJO: f64 = 1e-4;
const HESS_JITTER: f64 = 1e-8;

/// Damped Newton with Armijo backtracking (halving). Stops when the gradient
/// norm drops to `tol`.
pub fn newton_minimize(
    obj: &LseObjective<'_>,
    init: &[f64],
    opts: NewtonOptions,
) -> Result<NewtonOutcome> {
    let mut theta = init.to_vec();
    let (mut f, mut g) = obj.value_grad(&theta);
    let mut gn = norm(&g);
    let mut trace = vec![f];
    if !f.is_finite() {
        return Err(Error::Numerical(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut it = 0;
    while gn > opts.tol {
        if it == opts.max_iter {
            return Err(Error::NonConvergence {
                what: "Newton solver",
                iterations: it,
                residual: gn,
            });
        }
        it += 1;
        let h = obj.hessian(&theta);
        let chol = cholesky_jittered(&h, HESS_JITTER)?;
        let step = chol.solve(&DVector::from_column_slice(&g));
        let slope = -dot(&g, step.as_slice());
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; theta.len()];
        for _ in 0..60 {
            for ((tr, th), s) in trial.iter_mut().zip(&theta).zip(step.iter()) {
                *tr = th - t * s;
            }
            let (ft, gt) = obj.value_grad(&trial);
            let gtn = norm(&gt);
            let armijo = ft <= f + ARMIJO * t * slope;
            // Near the optimum decreases fall below rounding; a full step that
            // shrinks the gradient without raising the objective is accepted.
            let flat = t == 1.0 && gtn < gn && ft <= f + 1e-13 * f.abs().max(1.0);
            if ft.is_finite() && (armijo || flat) {
                theta.copy_from_slice(&trial);
                f = ft;
                g = gt;
                gn = gtn;
                trace.push(f);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                what: "Newton line search",
                iterations: it,
                residual: gn,
            });
        }
    }
    Ok(NewtonOutcome {
        theta,
        grad_norm: gn,
        iterations: it,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_theta_gives_uniform() {
        let p = softmax_p(&[1.0, -2.0], &[0.0; 6], 3);
        for v in p {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn log_two_score() {
        let p = softmax_p(&[1.0], &[2f64.ln()], 1);
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn saturation_is_finite() {
        let mut p = [0.0];
        let lse = probs_and_lse(&[1.0], &[700.0], &mut p);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert_abs_diff_eq!(lse, 700.0, epsilon = 1e-9);
        let lse = probs_and_lse(&[1.0], &[-800.0], &mut p);
        assert!(p[0] >= 0.0 && lse.abs() < 1e-300_f64.max(1e-12));
    }

    #[test]
    fn newton_recovers_stationary_point() {
        let x = Covariates::from_rows(&[
            vec![1.0, 0.5],
            vec![-0.3, 2.0],
            vec![0.7, -1.2],
            vec![0.1, 0.1],
        ])
        .unwrap();
        let target = [0.4, -0.2, 0.3, 0.1];
        let base = LseObjective::new(&x, 2, vec![0.0; 4]);
        let g0 = base.gradient(&target);
        let obj = LseObjective::new(&x, 2, g0.iter().map(|v| -v).collect());
        let out = newton_minimize(&obj, &[0.0; 4], NewtonOptions::default()).unwrap();
        for (a, b) in out.theta.iter().zip(&target) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-7);
        }
        assert!(out.grad_norm <= 1e-9);
        assert!(out.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}
