//! Cross-fitted nuisance models: conditional class probabilities f̂ and
//! covariate density ratios ω̂ = dQ/dP, each fitted on one half of a source
//! and applied to the other.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::softmax::{newton_minimize, probs_and_lse, LseObjective, NewtonOptions};

pub const DEFAULT_RIDGE_GRID: [f64; 3] = [1e-3, 1e-2, 1e-1];

/// Fitted class-probability model over all K+1 classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CondProbModel {
    /// Multinomial logistic; `coef` is class-major over classes 1..K with d
    /// slopes followed by one intercept per class.
    Logistic {
        coef: Vec<f64>,
        d: usize,
        k: usize,
        ridge: f64,
        grad_norm: f64,
    },
    /// Covariate-free class frequencies.
    Constant { probs: Vec<f64> },
}

impl CondProbModel {
    pub fn n_classes(&self) -> usize {
        match self {
            CondProbModel::Logistic { k, .. } => k + 1,
            CondProbModel::Constant { probs } => probs.len(),
        }
    }

    /// Unclipped probabilities of classes 0..K.
    pub fn predict_raw(&self, x: &[f64], out: &mut [f64]) {
        match self {
            CondProbModel::Logistic { coef, d, k, .. } => {
                let mut buf = vec![0.0; d + 1];
                buf[..*d].copy_from_slice(x);
                buf[*d] = 1.0;
                probs_and_lse(&buf, coef, &mut out[1..=*k]);
                out[0] = 1.0 - out[1..=*k].iter().sum::<f64>();
                // Large scores can make the complement round to a tiny negative.
                out[0] = out[0].max(0.0);
            }
            CondProbModel::Constant { probs } => out.copy_from_slice(probs),
        }
    }

    /// Probabilities clipped into [p_min, 1 − p_min].
    pub fn predict(&self, x: &[f64], p_min: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes()];
        self.predict_raw(x, &mut out);
        clip_probs(&mut out, p_min);
        out
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CondProbModel::Constant { .. })
    }

    pub fn ridge(&self) -> Option<f64> {
        match self {
            CondProbModel::Logistic { ridge, .. } => Some(*ridge),
            CondProbModel::Constant { .. } => None,
        }
    }

    pub fn grad_norm(&self) -> Option<f64> {
        match self {
            CondProbModel::Logistic { grad_norm, .. } => Some(*grad_norm),
            CondProbModel::Constant { .. } => None,
        }
    }
}

pub fn clip_probs(p: &mut [f64], p_min: f64) {
    for v in p {
        *v = v.clamp(p_min, 1.0 - p_min);
    }
}

fn with_intercept(x: &Covariates) -> Covariates {
    let d = x.n_cols();
    let mut data = Vec::with_capacity(x.n_rows() * (d + 1));
    for r in x.rows() {
        data.extend_from_slice(r);
        data.push(1.0);
    }
    Covariates::new(data, x.n_rows(), d + 1).expect("finite input stays finite")
}

/// −(1/n) Σ_i onehot(y_i) ⊗ x_i over classes 1..K, weighted by `w` if given.
fn label_moment(x: &Covariates, y: &[usize], k: usize, w: Option<&[f64]>) -> Vec<f64> {
    let d = x.n_cols();
    let n = x.n_rows() as f64;
    let mut c = vec![0.0; d * k];
    for (i, (row, &yi)) in x.rows().zip(y).enumerate() {
        if yi == 0 {
            continue;
        }
        let wi = w.map_or(1.0 / n, |w| w[i]);
        for (cj, &xj) in c[(yi - 1) * d..yi * d].iter_mut().zip(row) {
            *cj -= wi * xj;
        }
    }
    c
}

/// Ridge multinomial logistic regression with intercepts, minimizing the mean
/// cross-entropy plus (λ/2)‖slopes‖² by damped Newton.
pub fn fit_multinomial_logistic(
    x: &Covariates,
    y: &[usize],
    n_classes: usize,
    ridge: f64,
    opts: NewtonOptions,
) -> Result<CondProbModel> {
    let (coef, grad_norm) = fit_softmax_regression(x, y, n_classes, ridge, true, opts)?;
    Ok(CondProbModel::Logistic {
        coef,
        d: x.n_cols(),
        k: n_classes - 1,
        ridge,
        grad_norm,
    })
}

/// Coefficients of a multinomial logistic fit, class-major over classes 1..K;
/// with `intercept` each class block carries a trailing unpenalized intercept.
/// Returns the coefficients and the final gradient norm.
pub fn fit_softmax_regression(
    x: &Covariates,
    y: &[usize],
    n_classes: usize,
    ridge: f64,
    intercept: bool,
    opts: NewtonOptions,
) -> Result<(Vec<f64>, f64)> {
    if x.n_rows() != y.len() || y.is_empty() {
        return Err(Error::Validation(
            "logistic fit needs matching, non-empty x and y".into(),
        ));
    }
    if n_classes < 2 {
        return Err(Error::Validation(
            "logistic fit needs at least two classes".into(),
        ));
    }
    let k = n_classes - 1;
    let mut present = vec![false; n_classes];
    for &c in y {
        if c >= n_classes {
            return Err(Error::Validation(format!("label {c} outside 0..={k}")));
        }
        present[c] = true;
    }
    let all_present = present.iter().all(|&p| p);
    if !all_present && ridge <= 0.0 {
        return Err(Error::Validation(
            "unpenalized logistic fit needs every class present".into(),
        ));
    }
    let design;
    let xa = if intercept {
        design = with_intercept(x);
        &design
    } else {
        x
    };
    let p = xa.n_cols();
    let mut obj = LseObjective::new(xa, k, label_moment(xa, y, k, None));
    obj.ridge = ridge;
    // With a class missing its intercept has no finite optimum unless penalized.
    if intercept && all_present {
        obj.unpenalized = (0..k).map(|c| c * p + p - 1).collect();
    }
    let out = newton_minimize(&obj, &vec![0.0; k * p], opts)?;
    Ok((out.theta, out.grad_norm))
}

fn mean_log_loss(model: &CondProbModel, x: &Covariates, y: &[usize], p_min: f64) -> f64 {
    let mut p = vec![0.0; model.n_classes()];
    let mut s = 0.0;
    for (row, &yi) in x.rows().zip(y) {
        model.predict_raw(row, &mut p);
        s -= p[yi].clamp(p_min, 1.0 - p_min).ln();
    }
    s / y.len() as f64
}

/// Balanced fold labels 0..folds after a seeded shuffle.
pub fn fold_labels(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    let mut lab = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        lab[i] = pos % folds;
    }
    lab
}

/// Picks λ from `grid` by k-fold cross-validated log-loss (ties → smaller λ).
pub fn select_ridge(
    x: &Covariates,
    y: &[usize],
    n_classes: usize,
    grid: &[f64],
    folds: usize,
    seed: u64,
    opts: NewtonOptions,
) -> Result<f64> {
    let n = y.len();
    if grid.len() == 1 || n < 2 * folds {
        return Ok(grid[0]);
    }
    let lab = fold_labels(n, folds, seed);
    let mut best = (f64::INFINITY, grid[0]);
    for &lam in grid {
        let mut loss = 0.0;
        for f in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| lab[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| lab[i] == f).collect();
            let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let yte: Vec<usize> = test.iter().map(|&i| y[i]).collect();
            let m = fit_multinomial_logistic(&x.select(&train), &ytr, n_classes, lam, opts)?;
            loss += mean_log_loss(&m, &x.select(&test), &yte, 1e-6) * test.len() as f64;
        }
        if loss < best.0 {
            best = (loss, lam);
        }
    }
    Ok(best.1)
}

/// Learner for f̂. Implementations must be deterministic in `seed`.
pub trait ProbabilityLearner: Send + Sync {
    fn fit(
        &self,
        x: &Covariates,
        y: &[usize],
        n_classes: usize,
        seed: u64,
    ) -> Result<CondProbModel>;
}

/// Ridge multinomial logistic; λ fixed or chosen by cross-validation.
#[derive(Debug, Clone)]
pub struct LogisticLearner {
    pub ridge: Option<f64>,
    pub grid: Vec<f64>,
    pub cv_folds: usize,
    pub newton: NewtonOptions,
}

impl Default for LogisticLearner {
    fn default() -> Self {
        LogisticLearner {
            ridge: None,
            grid: DEFAULT_RIDGE_GRID.to_vec(),
            cv_folds: 5,
            newton: NewtonOptions {
                tol: 1e-8,
                max_iter: 100,
            },
        }
    }
}

impl LogisticLearner {
    pub fn with_ridge(ridge: Option<f64>) -> Self {
        LogisticLearner {
            ridge,
            ..Default::default()
        }
    }

    fn choose(&self, x: &Covariates, y: &[usize], n_classes: usize, seed: u64) -> Result<f64> {
        match self.ridge {
            Some(l) => Ok(l),
            None => select_ridge(
                x,
                y,
                n_classes,
                &self.grid,
                self.cv_folds,
                seed,
                self.newton,
            ),
        }
    }
}

impl ProbabilityLearner for LogisticLearner {
    fn fit(
        &self,
        x: &Covariates,
        y: &[usize],
        n_classes: usize,
        seed: u64,
    ) -> Result<CondProbModel> {
        let lam = self.choose(x, y, n_classes, seed)?;
        fit_multinomial_logistic(x, y, n_classes, lam, self.newton)
    }
}

/// ω̂(x) = prior · exp(βᵀx + b), clipped, where the logistic domain classifier
/// scores "target" against "source".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRatioModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
    /// n_source / N.
    pub prior_ratio: f64,
    pub clip: [f64; 2],
    pub ridge: f64,
    pub grad_norm: f64,
}

impl DensityRatioModel {
    pub fn predict_unclipped(&self, x: &[f64]) -> f64 {
        let s: f64 = self.coef.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.intercept;
        self.prior_ratio * s.exp()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_unclipped(x).clamp(self.clip[0], self.clip[1])
    }
}

/// Logistic domain classifier on source rows (G = 0) and target rows (G = 1);
/// Bayes' rule turns its odds into dQ/dP after the sample-size correction.
pub fn fit_density_ratio(
    source_x: &Covariates,
    target_x: &Covariates,
    clip: [f64; 2],
    ridge: Option<f64>,
    seed: u64,
) -> Result<DensityRatioModel> {
    if source_x.n_rows() == 0 || target_x.n_rows() == 0 {
        return Err(Error::Validation(
            "density ratio needs non-empty source and target".into(),
        ));
    }
    let merged = Covariates::stack(&[source_x, target_x])?;
    let mut g = vec![0usize; source_x.n_rows()];
    g.resize(merged.n_rows(), 1);
    let learner = LogisticLearner::with_ridge(ridge);
    let model = learner.fit(&merged, &g, 2, seed)?;
    match model {
        CondProbModel::Logistic {
            coef,
            d,
            ridge,
            grad_norm,
            ..
        } => Ok(DensityRatioModel {
            intercept: coef[d],
            coef: coef[..d].to_vec(),
            prior_ratio: source_x.n_rows() as f64 / target_x.n_rows() as f64,
            clip,
            ridge,
            grad_norm,
        }),
        CondProbModel::Constant { .. } => unreachable!("logistic learner returns a logistic model"),
    }
}

/// Which half of the sample-split a source row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fold {
    A,
    B,
}

/// Seeded shuffle; the first ⌊n/2⌋ shuffled rows form fold A.
pub fn split_halves(n: usize, seed: u64) -> Vec<Fold> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    let mut out = vec![Fold::B; n];
    for &i in &idx[..n / 2] {
        out[i] = Fold::A;
    }
    out
}

fn fold_indices(split: &[Fold], which: Fold) -> Vec<usize> {
    (0..split.len()).filter(|&i| split[i] == which).collect()
}

/// Pooled class frequencies over the whole source.
fn constant_model(ds: &LabeledDataset) -> CondProbModel {
    let n = ds.len() as f64;
    CondProbModel::Constant {
        probs: ds.class_counts().iter().map(|&c| c as f64 / n).collect(),
    }
}

/// f̂ fitted on each half with out-of-fold source predictions and averaged
/// target predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondProbCrossFit {
    pub model_a: CondProbModel,
    pub model_b: CondProbModel,
    /// Folds that fell back to the constant model because a class was missing.
    pub fallback: Vec<Fold>,
    /// n × (K+1), row i predicted by the model not trained on row i.
    pub source_probs: Vec<f64>,
    /// N × (K+1), (f̂_A + f̂_B)/2.
    pub target_probs: Vec<f64>,
}

pub fn cross_fit_cond_prob(
    ds: &LabeledDataset,
    target: &UnlabeledDataset,
    split: &[Fold],
    learner: &dyn ProbabilityLearner,
    p_min: f64,
    seed: u64,
) -> Result<CondProbCrossFit> {
    if ds.len() < 4 {
        return Err(Error::Validation(format!(
            "source {} has {} rows; cross-fitting needs at least 4",
            ds.source_id,
            ds.len()
        )));
    }
    let nc = ds.n_classes();
    let mut fallback = Vec::new();
    let mut fit_fold = |which: Fold, s: u64| -> Result<CondProbModel> {
        let idx = fold_indices(split, which);
        let part = ds.select(&idx);
        if part.class_counts().iter().any(|&c| c == 0) {
            fallback.push(which);
            return Ok(constant_model(ds));
        }
        learner.fit(&part.x, &part.y, nc, s)
    };
    let model_a = fit_fold(Fold::A, derive_seed(seed, 0))?;
    let model_b = fit_fold(Fold::B, derive_seed(seed, 1))?;

    let mut source_probs = vec![0.0; ds.len() * nc];
    for (i, row) in ds.x.rows().enumerate() {
        let m = match split[i] {
            Fold::A => &model_b,
            Fold::B => &model_a,
        };
        let out = &mut source_probs[i * nc..(i + 1) * nc];
        m.predict_raw(row, out);
        clip_probs(out, p_min);
    }
    let mut target_probs = vec![0.0; target.len() * nc];
    let mut pa = vec![0.0; nc];
    let mut pb = vec![0.0; nc];
    for (j, row) in target.x.rows().enumerate() {
        model_a.predict_raw(row, &mut pa);
        model_b.predict_raw(row, &mut pb);
        let out = &mut target_probs[j * nc..(j + 1) * nc];
        for c in 0..nc {
            out[c] = 0.5 * (pa[c] + pb[c]);
        }
        clip_probs(out, p_min);
    }
    Ok(CondProbCrossFit {
        model_a,
        model_b,
        fallback,
        source_probs,
        target_probs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRatioCrossFit {
    pub model_a: DensityRatioModel,
    pub model_b: DensityRatioModel,
    /// ω̂ at each source row, from the model fitted on the other half.
    pub source_ratio: Vec<f64>,
}

pub fn cross_fit_density_ratio(
    ds: &LabeledDataset,
    target: &UnlabeledDataset,
    split: &[Fold],
    clip: [f64; 2],
    ridge: Option<f64>,
    seed: u64,
) -> Result<DensityRatioCrossFit> {
    let a = fold_indices(split, Fold::A);
    let b = fold_indices(split, Fold::B);
    let model_a = fit_density_ratio(
        &ds.x.select(&a),
        &target.x,
        clip,
        ridge,
        derive_seed(seed, 0),
    )?;
    let model_b = fit_density_ratio(
        &ds.x.select(&b),
        &target.x,
        clip,
        ridge,
        derive_seed(seed, 1),
    )?;
    let source_ratio =
        ds.x.rows()
            .zip(split)
            .map(|(row, f)| match f {
                Fold::A => model_b.predict(row),
                Fold::B => model_a.predict(row),
            })
            .collect();
    Ok(DensityRatioCrossFit {
        model_a,
        model_b,
        source_ratio,
    })
}

/// Cross-fitted nuisances of one source, reduced to the predictions the
/// moment estimators consume. Fitted models are kept when available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisancePair {
    pub source_id: u32,
    pub n_classes: usize,
    pub split: Vec<Fold>,
    pub cond_prob: Option<CondProbCrossFit>,
    pub density_ratio: Option<DensityRatioCrossFit>,
    /// n × (K+1) out-of-fold f̂ at source rows.
    pub source_probs: Vec<f64>,
    /// N × (K+1) f̂ at target rows.
    pub target_probs: Vec<f64>,
    /// Out-of-fold ω̂ at source rows (all ones without covariate shift).
    pub source_ratio: Vec<f64>,
}

impl NuisancePair {
    /// Nuisances given directly as predictions (oracle or externally fitted).
    pub fn from_predictions(
        source_id: u32,
        n_classes: usize,
        source_probs: Vec<f64>,
        target_probs: Vec<f64>,
        source_ratio: Vec<f64>,
    ) -> Result<Self> {
        if source_probs.len() != source_ratio.len() * n_classes
            || target_probs.len() % n_classes != 0
        {
            return Err(Error::Validation(
                "nuisance prediction shapes disagree".into(),
            ));
        }
        Ok(NuisancePair {
            source_id,
            n_classes,
            split: Vec::new(),
            cond_prob: None,
            density_ratio: None,
            source_probs,
            target_probs,
            source_ratio,
        })
    }

    pub fn diagnostics(&self) -> NuisanceDiagnostics {
        let cp = self.cond_prob.as_ref();
        let dr = self.density_ratio.as_ref();
        NuisanceDiagnostics {
            source_id: self.source_id,
            cond_prob_ridge: cp.map(|c| [c.model_a.ridge(), c.model_b.ridge()]),
            cond_prob_grad_norm: cp.map(|c| [c.model_a.grad_norm(), c.model_b.grad_norm()]),
            constant_fallback: cp.map(|c| c.fallback.clone()).unwrap_or_default(),
            density_ratio_ridge: dr.map(|r| [r.model_a.ridge, r.model_b.ridge]),
            density_ratio_grad_norm: dr.map(|r| [r.model_a.grad_norm, r.model_b.grad_norm]),
            ratio_range: dr.map(|r| {
                let lo = r.source_ratio.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = r
                    .source_ratio
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                [lo, hi]
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceDiagnostics {
    pub source_id: u32,
    pub cond_prob_ridge: Option<[Option<f64>; 2]>,
    pub cond_prob_grad_norm: Option<[Option<f64>; 2]>,
    pub constant_fallback: Vec<Fold>,
    pub density_ratio_ridge: Option<[f64; 2]>,
    pub density_ratio_grad_norm: Option<[f64; 2]>,
    pub ratio_range: Option<[f64; 2]>,
}

/// Settings for [`fit_nuisance`].
#[derive(Debug, Clone)]
pub struct NuisanceOptions {
    pub ridge: Option<f64>,
    pub ratio_clip: [f64; 2],
    pub p_min: f64,
    /// Skip the density ratio and use ω̂ ≡ 1.
    pub no_shift: bool,
}

impl NuisanceOptions {
    pub fn from_config(cfg: &crate::data::ProblemConfig) -> Self {
        NuisanceOptions {
            ridge: cfg.ridge,
            ratio_clip: cfg.density_ratio_clip,
            p_min: cfg.prob_clip,
            no_shift: cfg.no_shift,
        }
    }
}

/// Full cross-fitting for one source with the default logistic learner.
pub fn fit_nuisance(
    ds: &LabeledDataset,
    target: &UnlabeledDataset,
    opts: &NuisanceOptions,
    seed: u64,
) -> Result<NuisancePair> {
    fit_nuisance_with(
        ds,
        target,
        opts,
        &LogisticLearner::with_ridge(opts.ridge),
        seed,
    )
}

pub fn fit_nuisance_with(
    ds: &LabeledDataset,
    target: &UnlabeledDataset,
    opts: &NuisanceOptions,
    learner: &dyn ProbabilityLearner,
    seed: u64,
) -> Result<NuisancePair> {
    let split = split_halves(ds.len(), derive_seed(seed, 0));
    let cp = cross_fit_cond_prob(
        ds,
        target,
        &split,
        learner,
        opts.p_min,
        derive_seed(seed, 1),
    )?;
    let dr = if opts.no_shift {
        None
    } else {
        Some(cross_fit_density_ratio(
            ds,
            target,
            &split,
            opts.ratio_clip,
            opts.ridge,
            derive_seed(seed, 2),
        )?)
    };
    let source_ratio = dr
        .as_ref()
        .map_or_else(|| vec![1.0; ds.len()], |r| r.source_ratio.clone());
    Ok(NuisancePair {
        source_id: ds.source_id,
        n_classes: ds.n_classes(),
        split,
        source_probs: cp.source_probs.clone(),
        target_probs: cp.target_probs.clone(),
        cond_prob: Some(cp),
        density_ratio: dr,
        source_ratio,
    })
}
