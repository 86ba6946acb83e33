//! Per-source moment vectors μ̂^(l) = −E[f^(l)(X) ⊗ X] under the target law and
//! their estimated sampling covariances.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::{covariance, psd_project, smallest_singular_value};
use crate::nuisance::NuisancePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub d: usize,
    pub k: usize,
    pub mu_hat: Vec<Vec<f64>>,
    pub cov_hat: Vec<DMatrix<f64>>,
    /// dK × L, column l is `mu_hat[l]`.
    pub u_hat: DMatrix<f64>,
    /// Smallest singular value of `u_hat`.
    pub sigma_min: f64,
    pub n_per_source: Vec<usize>,
}

impl MomentSet {
    pub fn new(
        d: usize,
        k: usize,
        mu_hat: Vec<Vec<f64>>,
        cov_hat: Vec<DMatrix<f64>>,
        n_per_source: Vec<usize>,
    ) -> Result<Self> {
        let dk = d * k;
        let l = mu_hat.len();
        if l == 0 || cov_hat.len() != l || n_per_source.len() != l {
            return Err(Error::Validation(
                "moment set needs one entry per source".into(),
            ));
        }
        if mu_hat.iter().any(|m| m.len() != dk) || cov_hat.iter().any(|c| c.shape() != (dk, dk)) {
            return Err(Error::Validation(format!(
                "moment shapes must match dK = {dk}"
            )));
        }
        let u_hat = DMatrix::from_fn(dk, l, |r, c| mu_hat[c][r]);
        let sigma_min = smallest_singular_value(&u_hat);
        Ok(MomentSet {
            d,
            k,
            mu_hat,
            cov_hat,
            u_hat,
            sigma_min,
            n_per_source,
        })
    }

    pub fn l(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn dk(&self) -> usize {
        self.d * self.k
    }

    /// Σ_l γ_l μ̂^(l).
    pub fn combine(&self, gamma: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dk()];
        for (g, mu) in gamma.iter().zip(&self.mu_hat) {
            for (o, m) in out.iter_mut().zip(mu) {
                *o += g * m;
            }
        }
        out
    }
}

/// −(1/n) Σ_i 1(y_i = c) x_i, stacked over c = 1..K.
pub fn mu_hat_no_shift(ds: &LabeledDataset) -> Vec<f64> {
    let d = ds.dim();
    let n = ds.len() as f64;
    let mut mu = vec![0.0; d * ds.k()];
    for (row, &y) in ds.x.rows().zip(&ds.y) {
        if y == 0 {
            continue;
        }
        for (m, &x) in mu[(y - 1) * d..y * d].iter_mut().zip(row) {
            *m -= x / n;
        }
    }
    mu
}

fn finish_cov(c: DMatrix<f64>) -> DMatrix<f64> {
    psd_project(&c)
}

/// (1/n) Cov(onehot(y) ⊗ x).
pub fn cov_hat_no_shift(ds: &LabeledDataset) -> Result<DMatrix<f64>> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "source {} needs at least 2 rows for a covariance",
            ds.source_id
        )));
    }
    let d = ds.dim();
    let c = covariance(n, d * ds.k(), |i, buf| {
        buf.fill(0.0);
        let y = ds.y[i];
        if y > 0 {
            buf[(y - 1) * d..y * d].copy_from_slice(ds.x.row(i));
        }
    });
    Ok(finish_cov(c / n as f64))
}

fn check_nuisance(ds: &LabeledDataset, target: &UnlabeledDataset, nu: &NuisancePair) -> Result<()> {
    let nc = ds.n_classes();
    if nu.n_classes != nc
        || nu.source_probs.len() != ds.len() * nc
        || nu.source_ratio.len() != ds.len()
        || nu.target_probs.len() != target.len() * nc
    {
        return Err(Error::Validation(format!(
            "nuisance predictions for source {} do not match the data",
            ds.source_id
        )));
    }
    Ok(())
}

/// Bias-corrected estimator
/// −(1/N) Σ_j f̂_c(X^Q_j) X^Q_j − (1/n) Σ_i ω̂(X_i)(1(Y_i = c) − f̂_c(X_i)) X_i.
pub fn mu_hat_dml(
    ds: &LabeledDataset,
    target: &UnlabeledDataset,
    nu: &NuisancePair,
) -> Result<Vec<f64>> {
    check_nuisance(ds, target, nu)?;
    let d = ds.dim();
    let k = ds.k();
    let nc = k + 1;
    let mut plug = vec![0.0; d * k];
    for (j, row) in target.x.rows().enumerate() {
        let f = &nu.target_probs[j * nc..(j + 1) * nc];
        for c in 1..=k {
            for (m, &x) in plug[(c - 1) * d..c * d].iter_mut().zip(row) {
                *m += f[c] * x;
            }
        }
    }
    let mut corr = vec![0.0; d * k];
    for (i, row) in ds.x.rows().enumerate() {
        let f = &nu.source_probs[i * nc..(i + 1) * nc];
        let w = nu.source_ratio[i];
        for c in 1..=k {
            let r = w * (f64::from(u8::from(ds.y[i] == c)) - f[c]);
            if r == 0.0 {
                continue;
            }
            for (m, &x) in corr[(c - 1) * d..c * d].iter_mut().zip(row) {
                *m += r * x;
            }
        }
    }
    let (nq, n) = (target.len() as f64, ds.len() as f64);
    Ok(plug
        .iter()
        .zip(&corr)
        .map(|(p, q)| -p / nq - q / n)
        .collect())
}

/// Plug-in estimator −(1/N) Σ_j f̂(X^Q_j) ⊗ X^Q_j, without the correction.
pub fn mu_hat_plugin(target: &UnlabeledDataset, target_probs: &[f64], k: usize) -> Vec<f64> {
    let d = target.dim();
    let nc = k + 1;
    let mut mu = vec![0.0; d * k];
    let nq = target.len() as f64;
    for (j, row) in target.x.rows().enumerate() {
        for c in 1..=k {
            let f = target_probs[j * nc + c];
            for (m, &x) in mu[(c - 1) * d..c * d].iter_mut().zip(row) {
                *m -= f * x / nq;
            }
        }
    }
    mu
}

/// (1/n) Cov_P([ω̂(f̂ − y)] ⊗ X) + (1/N) Cov_Q(f̂ ⊗ X).
pub fn cov_hat_dml(
    ds: &LabeledDataset,
    target: &UnlabeledDataset,
    nu: &NuisancePair,
) -> Result<DMatrix<f64>> {
    check_nuisance(ds, target, nu)?;
    let (n, nq) = (ds.len(), target.len());
    if n < 2 || nq < 2 {
        return Err(Error::Validation(format!(
            "source {} covariance needs at least 2 source and 2 target rows",
            ds.source_id
        )));
    }
    let d = ds.dim();
    let k = ds.k();
    let nc = k + 1;
    let src = covariance(n, d * k, |i, buf| {
        let f = &nu.source_probs[i * nc..(i + 1) * nc];
        let row = ds.x.row(i);
        for c in 1..=k {
            let r = nu.source_ratio[i] * (f[c] - f64::from(u8::from(ds.y[i] == c)));
            for (b, &x) in buf[(c - 1) * d..c * d].iter_mut().zip(row) {
                *b = r * x;
            }
        }
    });
    let tgt = covariance(nq, d * k, |j, buf| {
        let f = &nu.target_probs[j * nc..(j + 1) * nc];
        let row = target.x.row(j);
        for c in 1..=k {
            for (b, &x) in buf[(c - 1) * d..c * d].iter_mut().zip(row) {
                *b = f[c] * x;
            }
        }
    });
    Ok(finish_cov(src / n as f64 + tgt / nq as f64))
}

/// Moments for all sources. Without nuisances the label-only estimators are
/// used (sources and target share a covariate law).
pub fn estimate_moments(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
    nuisances: Option<&[NuisancePair]>,
) -> Result<MomentSet> {
    let (d, k) = crate::data::check_problem(sources, target)?;
    let mut mu = Vec::with_capacity(sources.len());
    let mut cov = Vec::with_capacity(sources.len());
    match nuisances {
        None => {
            for s in sources {
                mu.push(mu_hat_no_shift(s));
                cov.push(cov_hat_no_shift(s)?);
            }
        }
        Some(nus) => {
            if nus.len() != sources.len() {
                return Err(Error::Validation(
                    "one nuisance pair per source required".into(),
                ));
            }
            for (s, nu) in sources.iter().zip(nus) {
                mu.push(mu_hat_dml(s, target, nu)?);
                cov.push(cov_hat_dml(s, target, nu)?);
            }
        }
    }
    MomentSet::new(d, k, mu, cov, sources.iter().map(|s| s.len()).collect())
}
