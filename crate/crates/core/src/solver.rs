//! The empirical saddle problem min_θ max_{γ∈Δ} Σ_l γ_l θᵀμ̂^(l) + Ŝ(θ), its
//! Mirror Prox solver with duality-gap certificates, and the Group DRO and
//! pooled ERM baselines.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{check_problem, Covariates, LabeledDataset, ProblemConfig, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::moments::{estimate_moments, MomentSet};
use crate::nuisance::{
    fit_nuisance, fit_softmax_regression, NuisanceDiagnostics, NuisanceOptions, NuisancePair,
};
use crate::rng::derive_path;
use crate::softmax::{dot, newton_minimize, LseObjective, NewtonOptions, Weights};

pub use crate::softmax::softmax_p;

/// Ŝ(θ) = (1/N) Σ_j log(1 + Σ_k exp(θ_kᵀX^Q_j)).
pub fn s_hat(theta: &[f64], target: &Covariates, k: usize) -> f64 {
    LseObjective::new(target, k, vec![0.0; theta.len()]).value(theta)
}

/// ∇Ŝ(θ) = (1/N) Σ_j p(X^Q_j, θ) ⊗ X^Q_j.
pub fn grad_s_hat(theta: &[f64], target: &Covariates, k: usize) -> Vec<f64> {
    LseObjective::new(target, k, vec![0.0; theta.len()]).gradient(theta)
}

/// Ĥ(θ) = (1/N) Σ_j (diag(p) − ppᵀ) ⊗ X^Q_j X^Q_jᵀ.
pub fn hess_s_hat(theta: &[f64], target: &Covariates, k: usize) -> DMatrix<f64> {
    LseObjective::new(target, k, vec![0.0; theta.len()]).hessian(theta)
}

/// Moments plus target covariates: everything the CG-DRO objective needs.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub moments: &'a MomentSet,
    pub target: &'a Covariates,
}

impl<'a> ObjectiveContext<'a> {
    pub fn new(moments: &'a MomentSet, target: &'a UnlabeledDataset) -> Result<Self> {
        if target.dim() != moments.d {
            return Err(Error::Validation(format!(
                "target has {} covariates, moments were built for d = {}",
                target.dim(),
                moments.d
            )));
        }
        Ok(ObjectiveContext {
            moments,
            target: &target.x,
        })
    }

    pub fn k(&self) -> usize {
        self.moments.k
    }

    pub fn l(&self) -> usize {
        self.moments.l()
    }

    pub fn dk(&self) -> usize {
        self.moments.dk()
    }

    /// φ̂(θ, γ).
    pub fn phi(&self, theta: &[f64], gamma: &[f64]) -> f64 {
        dot(theta, &self.moments.combine(gamma)) + s_hat(theta, self.target, self.k())
    }

    /// θᵀμ̂^(l) for each l, i.e. ∇_γ φ̂.
    pub fn source_terms(&self, theta: &[f64]) -> Vec<f64> {
        self.moments.mu_hat.iter().map(|m| dot(theta, m)).collect()
    }

    /// max_γ φ̂(θ, γ) with its maximizing vertex (lowest index on ties).
    pub fn max_over_gamma(&self, theta: &[f64]) -> (f64, usize) {
        let terms = self.source_terms(theta);
        let (best, val) = argmax(&terms);
        (val + s_hat(theta, self.target, self.k()), best)
    }

    fn inner_objective(&self, gamma: &[f64]) -> LseObjective<'a> {
        LseObjective::new(self.target, self.k(), self.moments.combine(gamma))
    }
}

fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    (best, v[best])
}

/// argmin_θ Σ_l γ_l θᵀμ̂^(l) + Ŝ(θ) by damped Newton from `theta_init`.
pub fn inner_min(
    gamma: &[f64],
    ctx: &ObjectiveContext<'_>,
    theta_init: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    check_simplex(gamma, ctx.l())?;
    let obj = ctx.inner_objective(gamma);
    let out = newton_minimize(&obj, theta_init, NewtonOptions { tol, max_iter: 200 })?;
    Ok(out.theta)
}

fn check_simplex(gamma: &[f64], l: usize) -> Result<()> {
    let s: f64 = gamma.iter().sum();
    if gamma.len() != l || gamma.iter().any(|&g| !(g >= 0.0)) || (s - 1.0).abs() > 1e-8 {
        return Err(Error::Validation(format!(
            "γ must be a point of the {l}-simplex"
        )));
    }
    Ok(())
}

/// max_γ φ̂(θ, γ) − min_θ' φ̂(θ', γ̂), with the inner minimizer.
pub fn duality_gap(
    theta: &[f64],
    gamma: &[f64],
    ctx: &ObjectiveContext<'_>,
    warm: &[f64],
    tol: f64,
) -> Result<(f64, Vec<f64>)> {
    let (upper, _) = ctx.max_over_gamma(theta);
    let inner = inner_min(gamma, ctx, warm, tol)?;
    Ok((upper - ctx.phi(&inner, gamma), inner))
}

/// Convex–concave problem over θ ∈ R^p and γ ∈ Δ^L with linear dependence on γ.
pub trait SaddleProblem {
    fn theta_dim(&self) -> usize;
    fn n_groups(&self) -> usize;
    /// (∇_θ φ, ∇_γ φ) at (θ, γ).
    fn gradients(&self, theta: &[f64], gamma: &[f64]) -> (Vec<f64>, Vec<f64>);
    fn max_over_gamma(&self, theta: &[f64]) -> f64;
    /// min_θ φ(θ, γ) from a warm start; returns the value.
    fn min_over_theta(&self, gamma: &[f64], warm: &[f64]) -> Result<f64>;
}

/// CG-DRO objective with a fixed inner-solver tolerance.
pub struct CgdroProblem<'a> {
    pub ctx: ObjectiveContext<'a>,
    pub inner_tol: f64,
}

impl SaddleProblem for CgdroProblem<'_> {
    fn theta_dim(&self) -> usize {
        self.ctx.dk()
    }

    fn n_groups(&self) -> usize {
        self.ctx.l()
    }

    fn gradients(&self, theta: &[f64], gamma: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let gt = self.ctx.inner_objective(gamma).gradient(theta);
        (gt, self.ctx.source_terms(theta))
    }

    fn max_over_gamma(&self, theta: &[f64]) -> f64 {
        self.ctx.max_over_gamma(theta).0
    }

    fn min_over_theta(&self, gamma: &[f64], warm: &[f64]) -> Result<f64> {
        let th = inner_min(gamma, &self.ctx, warm, self.inner_tol)?;
        Ok(self.ctx.phi(&th, gamma))
    }
}

/// Per-source average cross-entropy, maximized over source mixtures.
pub struct GroupDroProblem {
    d: usize,
    k: usize,
    /// All source rows stacked.
    x: Covariates,
    /// (start, end) row range of each source in `x`.
    ranges: Vec<(usize, usize)>,
    /// −(1/n_l) Σ onehot(y) ⊗ x per source.
    label_terms: Vec<Vec<f64>>,
    inner_tol: f64,
}

impl GroupDroProblem {
    pub fn new(sources: &[LabeledDataset], inner_tol: f64) -> Result<Self> {
        let first = sources
            .first()
            .ok_or_else(|| Error::Validation("no source datasets".into()))?;
        let (d, k) = (first.dim(), first.k());
        if sources.iter().any(|s| s.dim() != d || s.k() != k) {
            return Err(Error::Validation("sources disagree on d or K".into()));
        }
        let x = Covariates::stack(&sources.iter().map(|s| &s.x).collect::<Vec<_>>())?;
        let mut ranges = Vec::new();
        let mut start = 0;
        for s in sources {
            ranges.push((start, start + s.len()));
            start += s.len();
        }
        let label_terms = sources
            .iter()
            .map(crate::moments::mu_hat_no_shift)
            .collect();
        Ok(GroupDroProblem {
            d,
            k,
            x,
            ranges,
            label_terms,
            inner_tol,
        })
    }

    fn row_weights(&self, gamma: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.x.n_rows()];
        for (&(a, b), &g) in self.ranges.iter().zip(gamma) {
            let v = g / (b - a) as f64;
            w[a..b].fill(v);
        }
        w
    }

    fn mixed_objective<'s>(&'s self, gamma: &[f64], weights: &'s [f64]) -> LseObjective<'s> {
        let mut linear = vec![0.0; self.d * self.k];
        for (g, t) in gamma.iter().zip(&self.label_terms) {
            for (o, v) in linear.iter_mut().zip(t) {
                *o += g * v;
            }
        }
        let mut obj = LseObjective::new(&self.x, self.k, linear);
        obj.weights = Weights::PerRow(weights);
        obj
    }

    /// Average cross-entropy of each source at θ.
    pub fn source_losses(&self, theta: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.k];
        self.ranges
            .iter()
            .zip(&self.label_terms)
            .map(|(&(a, b), t)| {
                let s: f64 = (a..b)
                    .map(|i| crate::softmax::probs_and_lse(self.x.row(i), theta, &mut p))
                    .sum();
                s / (b - a) as f64 + dot(theta, t)
            })
            .collect()
    }
}

impl SaddleProblem for GroupDroProblem {
    fn theta_dim(&self) -> usize {
        self.d * self.k
    }

    fn n_groups(&self) -> usize {
        self.ranges.len()
    }

    fn gradients(&self, theta: &[f64], gamma: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = self.row_weights(gamma);
        let gt = self.mixed_objective(gamma, &w).gradient(theta);
        (gt, self.source_losses(theta))
    }

    fn max_over_gamma(&self, theta: &[f64]) -> f64 {
        argmax(&self.source_losses(theta)).1
    }

    fn min_over_theta(&self, gamma: &[f64], warm: &[f64]) -> Result<f64> {
        let w = self.row_weights(gamma);
        let obj = self.mixed_objective(gamma, &w);
        let out = newton_minimize(
            &obj,
            warm,
            NewtonOptions {
                tol: self.inner_tol,
                max_iter: 200,
            },
        )?;
        Ok(obj.value(&out.theta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorProxOptions {
    pub eta_theta: f64,
    pub eta_gamma: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub gap_check_every: usize,
    /// Also certify the last iterate at each check and report whichever of
    /// (average, last) has the smaller gap.
    pub last_iterate: bool,
}

impl MirrorProxOptions {
    /// η_θ = η and η_γ = η / log L (η when L = 1).
    pub fn from_eta(eta: f64, l: usize, max_iter: usize, tol: f64, gap_check_every: usize) -> Self {
        let eta_gamma = if l >= 2 { eta / (l as f64).ln() } else { eta };
        MirrorProxOptions {
            eta_theta: eta,
            eta_gamma,
            max_iter,
            tol,
            gap_check_every,
            last_iterate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cgdro,
    Gdro,
    Erm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cgdro => "cgdro",
            Method::Gdro => "gdro",
            Method::Erm => "erm",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cgdro" => Ok(Method::Cgdro),
            "gdro" => Ok(Method::Gdro),
            "erm" => Ok(Method::Erm),
            _ => Err(Error::Validation(format!(
                "unknown method `{s}` (cgdro, gdro, erm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gap_trace: Vec<f64>,
    /// Iteration count at each entry of `gap_trace`.
    pub gap_iterations: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub nuisance_diagnostics: Option<Vec<NuisanceDiagnostics>>,
}

impl FitResult {
    pub fn final_gap(&self) -> Option<f64> {
        self.gap_trace.last().copied()
    }

    pub fn to_document(&self) -> crate::data::ResultDocument {
        crate::data::ResultDocument {
            theta: self.theta.clone(),
            gamma: self.gamma.clone(),
            gap_trace: self.gap_trace.clone(),
            iterations: self.iterations,
            ci: Vec::new(),
            filtered_m: 0,
            method: Some(self.method.name().to_string()),
            converged: Some(self.converged),
            coord: None,
            reject_zero: None,
            nuisance_diagnostics: self
                .nuisance_diagnostics
                .as_ref()
                .map(|d| serde_json::to_value(d).expect("diagnostics serialize")),
            moments: None,
        }
    }
}

fn mw_update(gamma: &[f64], grad: &[f64], eta: f64) -> Vec<f64> {
    let m = grad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = gamma
        .iter()
        .zip(grad)
        .map(|(g, v)| g * (eta * (v - m)).exp())
        .collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Optimistic Mirror Prox: Euclidean steps in θ, entropic steps in γ, both
/// steps launched from (θ_t, γ_t), the correction gradient reused as the next
/// intermediate gradient. The duality gap of the running average of the
/// intermediate iterates is checked every `gap_check_every` iterations (and
/// that of the last iterate when `last_iterate` is set); the better certified
/// pair is returned.
pub fn mirror_prox<P: SaddleProblem + ?Sized>(
    problem: &P,
    opts: MirrorProxOptions,
    method: Method,
) -> Result<FitResult> {
    let p = problem.theta_dim();
    let l = problem.n_groups();
    if opts.max_iter == 0 || opts.gap_check_every == 0 || !(opts.tol > 0.0) {
        return Err(Error::Validation(
            "Mirror Prox needs max_iter, gap_check_every and tol positive".into(),
        ));
    }
    let mut theta = vec![0.0; p];
    let mut gamma = vec![1.0 / l as f64; l];
    let (mut g_theta, mut g_gamma) = problem.gradients(&theta, &gamma);
    let mut sum_theta = vec![0.0; p];
    let mut sum_gamma = vec![0.0; l];
    let mut out_theta = vec![0.0; p];
    let mut out_gamma = gamma.clone();
    let mut gap_trace = Vec::new();
    let mut gap_iterations = Vec::new();
    let mut converged = false;
    let mut t = 0;
    let mut bar_theta = vec![0.0; p];

    while t < opts.max_iter {
        for ((b, th), g) in bar_theta.iter_mut().zip(&theta).zip(&g_theta) {
            *b = th - opts.eta_theta * g;
        }
        let bar_gamma = mw_update(&gamma, &g_gamma, opts.eta_gamma);
        let (gt, gg) = problem.gradients(&bar_theta, &bar_gamma);
        for (th, g) in theta.iter_mut().zip(&gt) {
            *th -= opts.eta_theta * g;
        }
        gamma = mw_update(&gamma, &gg, opts.eta_gamma);
        g_theta = gt;
        g_gamma = gg;
        t += 1;

        for (s, b) in sum_theta.iter_mut().zip(&bar_theta) {
            *s += b;
        }
        for (s, b) in sum_gamma.iter_mut().zip(&bar_gamma) {
            *s += b;
        }
        if t % opts.gap_check_every == 0 || t == opts.max_iter {
            let tf = t as f64;
            let mut cand_theta: Vec<f64> = sum_theta.iter().map(|s| s / tf).collect();
            let mut cand_gamma: Vec<f64> = sum_gamma.iter().map(|s| s / tf).collect();
            let norm: f64 = cand_gamma.iter().sum();
            cand_gamma.iter_mut().for_each(|g| *g /= norm);
            let mut gap = certify(problem, &cand_theta, &cand_gamma, t)?;
            if opts.last_iterate {
                let last = certify(problem, &theta, &gamma, t)?;
                if last < gap {
                    gap = last;
                    cand_theta.clone_from(&theta);
                    cand_gamma.clone_from(&gamma);
                }
            }
            out_theta = cand_theta;
            out_gamma = cand_gamma;
            gap_trace.push(gap);
            gap_iterations.push(t);
            if gap <= opts.tol {
                converged = true;
                break;
            }
        }
    }
    Ok(FitResult {
        method,
        theta: out_theta,
        gamma: out_gamma,
        gap_trace,
        gap_iterations,
        iterations: t,
        converged,
        nuisance_diagnostics: None,
    })
}

fn certify<P: SaddleProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    gamma: &[f64],
    t: usize,
) -> Result<f64> {
    let gap = problem.max_over_gamma(theta) - problem.min_over_theta(gamma, theta)?;
    if gap.is_finite() {
        Ok(gap)
    } else {
        Err(Error::Numerical(format!(
            "duality gap became non-finite at iteration {t}"
        )))
    }
}

/// Everything produced while fitting CG-DRO; inference reuses the moments.
#[derive(Debug, Clone)]
pub struct CgdroFit {
    pub fit: FitResult,
    pub moments: MomentSet,
    pub nuisances: Option<Vec<NuisancePair>>,
}

/// Nuisances (unless `no_shift`), moments, then Mirror Prox.
pub fn cgdro_fit_detailed(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
    config: &ProblemConfig,
) -> Result<CgdroFit> {
    config.validate()?;
    check_problem(sources, target)?;
    let nuisances = if config.no_shift {
        None
    } else {
        let opts = NuisanceOptions::from_config(config);
        let pairs = sources
            .iter()
            .enumerate()
            .map(|(l, s)| fit_nuisance(s, target, &opts, derive_path(config.seed, &[1, l as u64])))
            .collect::<Result<Vec<_>>>()?;
        Some(pairs)
    };
    let moments = estimate_moments(sources, target, nuisances.as_deref())?;
    let mut fit = solve_moments(&moments, target, config)?;
    fit.nuisance_diagnostics = nuisances
        .as_ref()
        .map(|ns| ns.iter().map(NuisancePair::diagnostics).collect());
    Ok(CgdroFit {
        fit,
        moments,
        nuisances,
    })
}

pub fn cgdro_fit(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
    config: &ProblemConfig,
) -> Result<FitResult> {
    Ok(cgdro_fit_detailed(sources, target, config)?.fit)
}

/// Mirror Prox on already-estimated moments.
pub fn solve_moments(
    moments: &MomentSet,
    target: &UnlabeledDataset,
    config: &ProblemConfig,
) -> Result<FitResult> {
    let ctx = ObjectiveContext::new(moments, target)?;
    let problem = CgdroProblem {
        ctx,
        inner_tol: config.inner_tol,
    };
    let opts = MirrorProxOptions::from_eta(
        config.eta,
        moments.l(),
        config.max_iter,
        config.tol,
        config.gap_check_every,
    );
    mirror_prox(&problem, opts, Method::Cgdro)
}

/// Mirror Prox on per-source average cross-entropies.
pub fn group_dro(
    sources: &[LabeledDataset],
    opts: MirrorProxOptions,
    inner_tol: f64,
) -> Result<FitResult> {
    let problem = GroupDroProblem::new(sources, inner_tol)?;
    mirror_prox(&problem, opts, Method::Gdro)
}

/// Multinomial logistic fit (no intercept) on the pooled sources.
pub fn erm_pooled(sources: &[LabeledDataset], ridge: f64) -> Result<Vec<f64>> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Validation("no source datasets".into()))?;
    let x = Covariates::stack(&sources.iter().map(|s| &s.x).collect::<Vec<_>>())?;
    let y: Vec<usize> = sources.iter().flat_map(|s| s.y.iter().copied()).collect();
    let (theta, _) = fit_softmax_regression(
        &x,
        &y,
        first.n_classes(),
        ridge,
        false,
        NewtonOptions {
            tol: 1e-10,
            max_iter: 200,
        },
    )?;
    Ok(theta)
}

pub fn erm_result(sources: &[LabeledDataset], ridge: f64) -> Result<FitResult> {
    let theta = erm_pooled(sources, ridge)?;
    let total: usize = sources.iter().map(|s| s.len()).sum();
    Ok(FitResult {
        method: Method::Erm,
        theta,
        gamma: sources
            .iter()
            .map(|s| s.len() as f64 / total as f64)
            .collect(),
        gap_trace: Vec::new(),
        gap_iterations: Vec::new(),
        iterations: 0,
        converged: true,
        nuisance_diagnostics: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn s_hat_examples() {
        let x = Covariates::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        assert_abs_diff_eq!(s_hat(&[0.0; 6], &x, 3), 4f64.ln(), epsilon = 1e-15);
        let one = Covariates::from_rows(&[vec![1.0]]).unwrap();
        assert_abs_diff_eq!(s_hat(&[2f64.ln()], &one, 1), 3f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn derivatives_at_zero_single_row() {
        let x = Covariates::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let g = grad_s_hat(&[0.0, 0.0], &x, 1);
        assert_eq!(g, vec![1.0, -0.5]);
        let h = hess_s_hat(&[0.0, 0.0], &x, 1);
        assert_abs_diff_eq!(h[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h[(0, 1)], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(h[(1, 1)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn multiplicative_weights_stay_uniform_under_equal_gradients() {
        let g = mw_update(&[0.25; 4], &[3.0; 4], 0.7);
        assert!(g.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Cgdro, Method::Gdro, Method::Erm] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
