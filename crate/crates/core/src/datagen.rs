//! Simulation designs: Gaussian covariates per domain and softmax class laws
//! driven by linear or nonlinear per-class scores.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Covariates, LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    S1,
    S2,
    S3,
    S4,
    S5,
    Fig2,
    Fig3NonReg,
    Fig3Unstable,
    Fig3Reg,
}

impl Setting {
    pub const ALL: [Setting; 9] = [
        Setting::S1,
        Setting::S2,
        Setting::S3,
        Setting::S4,
        Setting::S5,
        Setting::Fig2,
        Setting::Fig3NonReg,
        Setting::Fig3Unstable,
        Setting::Fig3Reg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::S1 => "S1",
            Setting::S2 => "S2",
            Setting::S3 => "S3",
            Setting::S4 => "S4",
            Setting::S5 => "S5",
            Setting::Fig2 => "FIG2",
            Setting::Fig3NonReg => "FIG3_NONREG",
            Setting::Fig3Unstable => "FIG3_UNSTABLE",
            Setting::Fig3Reg => "FIG3_REG",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase().replace('-', "_");
        Setting::ALL
            .into_iter()
            .find(|k| k.name() == up)
            .ok_or_else(|| {
                let names: Vec<_> = Setting::ALL.iter().map(|k| k.name()).collect();
                Error::Validation(format!(
                    "unknown setting `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Optional overrides for a setting's defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingParams {
    pub delta: Option<f64>,
    pub sigma: Option<f64>,
    pub d: Option<usize>,
    pub l: Option<usize>,
    pub k: Option<usize>,
}

/// Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLaw {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianLaw {
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let std = vec![var.sqrt(); mean.len()];
        GaussianLaw { mean, std }
    }

    pub fn standard(d: usize) -> Self {
        Self::isotropic(vec![0.0; d], 1.0)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((&xi, &m), &sd) in x.iter().zip(&self.mean).zip(&self.std) {
            let z = (xi - m) / sd;
            s += -0.5 * z * z - sd.ln();
        }
        s - 0.5 * (x.len() as f64) * (2.0 * std::f64::consts::PI).ln()
    }

    fn sample_into(&self, rng: &mut impl rand::Rng, out: &mut Vec<f64>) {
        for (&m, &sd) in self.mean.iter().zip(&self.std) {
            let z: f64 = StandardNormal.sample(rng);
            out.push(m + sd * z);
        }
    }
}

/// Per-class score functions φ_0, …, φ_K of one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScoreModel {
    /// φ_c(x) = β_cᵀx; `beta[c]` has length d, `beta[0]` is zero.
    Linear { beta: Vec<Vec<f64>> },
    /// φ_c(x) = a_c + Σ_j w_j exp(−(x_j − c/4)²/4) + b_c x₁x₂ + c_c sin(x₃ − x₄ + c/3)
    /// plus `shift` · x₁ on class 1.
    Nonlinear {
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        w: Vec<f64>,
        shift: f64,
    },
}

impl ScoreModel {
    pub fn n_classes(&self) -> usize {
        match self {
            ScoreModel::Linear { beta } => beta.len(),
            ScoreModel::Nonlinear { a, .. } => a.len(),
        }
    }

    pub fn scores(&self, x: &[f64], out: &mut [f64]) {
        match self {
            ScoreModel::Linear { beta } => {
                for (o, b) in out.iter_mut().zip(beta) {
                    *o = b.iter().zip(x).map(|(u, v)| u * v).sum();
                }
            }
            ScoreModel::Nonlinear { a, b, c, w, shift } => {
                let inter = x[0] * x[1];
                let wave = x[2] - x[3];
                for (k, o) in out.iter_mut().enumerate() {
                    let kf = k as f64;
                    let bumps: f64 = w
                        .iter()
                        .zip(x)
                        .map(|(wj, xj)| wj * (-(xj - kf / 4.0).powi(2) / 4.0).exp())
                        .sum();
                    *o = a[k] + bumps + b[k] * inter + c[k] * (wave + kf / 3.0).sin();
                    if k == 1 {
                        *o += shift * x[0];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceLaw {
    pub covariates: GaussianLaw,
    pub scores: ScoreModel,
}

/// A frozen data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub setting: Setting,
    pub d: usize,
    pub k: usize,
    pub sources: Vec<SourceLaw>,
    pub target: GaussianLaw,
}

impl DgpSpec {
    pub fn l(&self) -> usize {
        self.sources.len()
    }

    /// Stable text fingerprint (used as a cache key).
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    /// True covariate density ratio dQ/dP for source `l` (0-based).
    pub fn density_ratio(&self, l: usize, x: &[f64]) -> f64 {
        (self.target.log_density(x) - self.sources[l].covariates.log_density(x)).exp()
    }
}

fn normal_vec(rng: &mut impl rand::Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>()
}

fn linear(beta: Vec<Vec<f64>>) -> ScoreModel {
    ScoreModel::Linear { beta }
}

/// Builds a setting's spec; all random coefficients are drawn once from `seed`.
pub fn make_spec(setting: Setting, params: SettingParams, seed: u64) -> Result<DgpSpec> {
    let mut rng = rng_from(derive_seed(seed, 0x5EC));
    let invalid = |m: &str| Err(Error::Validation(format!("{setting}: {m}")));
    let fixed = |name: &str, given: Option<usize>, want: usize| -> Result<()> {
        match given {
            Some(v) if v != want => Err(Error::Validation(format!(
                "{setting}: {name} is fixed at {want}, got {v}"
            ))),
            _ => Ok(()),
        }
    };
    let with_reference = |d: usize, rows: Vec<Vec<f64>>| {
        let mut beta = vec![vec![0.0; d]];
        beta.extend(rows);
        linear(beta)
    };

    let (d, k, sources, target) = match setting {
        Setting::S1 => {
            let d = params.d.unwrap_or(20);
            let l = params.l.unwrap_or(2);
            let k = params.k.unwrap_or(1);
            if d == 0 || l == 0 || k == 0 {
                return invalid("d, L and K must be positive");
            }
            let sources = (0..l)
                .map(|_| {
                    let rows = (0..k).map(|_| normal_vec(&mut rng, d, 0.5)).collect();
                    SourceLaw {
                        covariates: GaussianLaw::standard(d),
                        scores: with_reference(d, rows),
                    }
                })
                .collect();
            (d, k, sources, GaussianLaw::isotropic(vec![0.2; d], 1.0))
        }
        Setting::S2 | Setting::S5 => {
            let d = params.d.unwrap_or(5);
            let (l_default, k_default) = if setting == Setting::S2 {
                (4, 3)
            } else {
                (3, 3)
            };
            let l = params.l.unwrap_or(l_default);
            let k = params.k.unwrap_or(k_default);
            if d < 4 {
                return invalid("nonlinear scores need d ≥ 4");
            }
            if l == 0 || k == 0 {
                return invalid("L and K must be positive");
            }
            let delta = match setting {
                Setting::S5 => params.delta.unwrap_or(0.0),
                _ => 0.0,
            };
            if !delta.is_finite() || delta < 0.0 {
                return invalid("delta must be a finite non-negative number");
            }
            let sources = (0..l)
                .map(|li| {
                    let mut u = || {
                        (0..=k)
                            .map(|_| rng.random_range(-0.5..0.5))
                            .collect::<Vec<f64>>()
                    };
                    let (a, b, c) = (u(), u(), u());
                    let g: Vec<f64> = (0..d).map(|_| Exp1.sample(&mut rng)).collect();
                    let total: f64 = g.iter().sum();
                    SourceLaw {
                        covariates: GaussianLaw::standard(d),
                        scores: ScoreModel::Nonlinear {
                            a,
                            b,
                            c,
                            w: g.iter().map(|v| v / total).collect(),
                            shift: if li == 0 { delta } else { 0.0 },
                        },
                    }
                })
                .collect();
            (d, k, sources, GaussianLaw::isotropic(vec![0.2; d], 0.25))
        }
        Setting::S3 => {
            let d = params.d.unwrap_or(20);
            fixed("L", params.l, 2)?;
            fixed("K", params.k, 1)?;
            if d < 6 {
                return invalid("d must be at least 6");
            }
            let delta = params.delta.unwrap_or(0.0);
            if !(0.0..=4.0).contains(&delta) {
                return invalid("delta must lie in [0, 4]");
            }
            let mut b1 = vec![0.0; d];
            b1[..4].copy_from_slice(&[0.5 + delta, 0.5, 0.5, 0.5]);
            let mut b2 = vec![0.0; d];
            b2[4] = 0.5;
            b2[5] = 0.5;
            let sources = [b1, b2]
                .into_iter()
                .map(|b| SourceLaw {
                    covariates: GaussianLaw::standard(d),
                    scores: with_reference(d, vec![b]),
                })
                .collect();
            (d, 1, sources, GaussianLaw::isotropic(vec![0.2; d], 1.0))
        }
        Setting::S4 => {
            let d = params.d.unwrap_or(20);
            let l = params.l.unwrap_or(4);
            let k = params.k.unwrap_or(3);
            let sigma = params.sigma.unwrap_or(0.25);
            if d < 5 {
                return invalid("d must be at least 5");
            }
            if l == 0 || k == 0 {
                return invalid("L and K must be positive");
            }
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return invalid("sigma must be finite and non-negative");
            }
            let sources = (0..l)
                .map(|_| {
                    let rows = (0..k)
                        .map(|_| {
                            let mut b = vec![0.0; d];
                            let noise = normal_vec(&mut rng, 5, sigma);
                            for (j, e) in noise.into_iter().enumerate() {
                                b[j] = if j < 2 { 1.0 } else { 0.0 } + e;
                            }
                            b
                        })
                        .collect();
                    SourceLaw {
                        covariates: GaussianLaw::standard(d),
                        scores: with_reference(d, rows),
                    }
                })
                .collect();
            (d, k, sources, GaussianLaw::isotropic(vec![0.2; d], 1.0))
        }
        Setting::Fig2 => {
            fixed("d", params.d, 4)?;
            fixed("L", params.l, 2)?;
            fixed("K", params.k, 1)?;
            let sources = [vec![-0.4, -0.4, 0.2, 0.2], vec![1.0, 1.0, 0.2, 0.2]]
                .into_iter()
                .map(|b| SourceLaw {
                    covariates: GaussianLaw::standard(4),
                    scores: with_reference(4, vec![b]),
                })
                .collect();
            (
                4,
                1,
                sources,
                GaussianLaw::isotropic(vec![-1.0, -1.0, 1.0, 1.0], 1.0),
            )
        }
        Setting::Fig3NonReg | Setting::Fig3Reg => {
            fixed("d", params.d, 20)?;
            fixed("L", params.l, 2)?;
            fixed("K", params.k, 1)?;
            let d = 20;
            let mut b1 = vec![0.0; d];
            let mut b2 = vec![0.0; d];
            if setting == Setting::Fig3NonReg {
                b1[..4].copy_from_slice(&[6.0, 0.5, 0.5, 0.5]);
                b2[..4].copy_from_slice(&[0.5; 4]);
            } else {
                b1[..2].copy_from_slice(&[0.5; 2]);
                b2[2..4].copy_from_slice(&[0.5; 2]);
            }
            let sources = [b1, b2]
                .into_iter()
                .map(|b| SourceLaw {
                    covariates: GaussianLaw::standard(d),
                    scores: with_reference(d, vec![b]),
                })
                .collect();
            (d, 1, sources, GaussianLaw::isotropic(vec![0.1; d], 1.0))
        }
        Setting::Fig3Unstable => {
            fixed("d", params.d, 4)?;
            fixed("L", params.l, 4)?;
            fixed("K", params.k, 1)?;
            let sources = (0..4)
                .map(|_| {
                    let noise = normal_vec(&mut rng, 4, 0.1);
                    let b: Vec<f64> = [1.0, 1.0, 0.0, 0.0]
                        .iter()
                        .zip(noise)
                        .map(|(m, e)| m + e)
                        .collect();
                    SourceLaw {
                        covariates: GaussianLaw::standard(4),
                        scores: with_reference(4, vec![b]),
                    }
                })
                .collect();
            (4, 1, sources, GaussianLaw::isotropic(vec![0.1; 4], 1.0))
        }
    };
    Ok(DgpSpec {
        setting,
        d,
        k,
        sources,
        target,
    })
}

/// Softmax of a score vector, shifted by its maximum.
pub fn softmax_scores(scores: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in scores.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    scores.iter_mut().for_each(|v| *v /= s);
}

/// P^(l)(Y = · | x) for source `l` (0-based); length K+1.
pub fn eval_cond_prob(spec: &DgpSpec, x: &[f64], l: usize) -> Vec<f64> {
    let mut p = vec![0.0; spec.k + 1];
    cond_prob_into(spec, x, l, &mut p);
    p
}

pub fn cond_prob_into(spec: &DgpSpec, x: &[f64], l: usize, out: &mut [f64]) {
    spec.sources[l].scores.scores(x, out);
    softmax_scores(out);
}

fn draw_category(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (c, &pc) in p.iter().enumerate() {
        acc += pc;
        if u < acc {
            return c;
        }
    }
    p.len() - 1
}

/// Labels drawn from source `l`'s conditional law at the given covariates.
pub fn draw_labels(
    spec: &DgpSpec,
    l: usize,
    x: &Covariates,
    rng: &mut impl rand::Rng,
) -> Vec<usize> {
    let mut p = vec![0.0; spec.k + 1];
    x.rows()
        .map(|row| {
            cond_prob_into(spec, row, l, &mut p);
            draw_category(&p, rng.random::<f64>())
        })
        .collect()
}

/// n i.i.d. labeled rows from source `l` (0-based); the dataset's id is l+1.
pub fn gen_source(spec: &DgpSpec, l: usize, n: usize, seed: u64) -> Result<LabeledDataset> {
    if l >= spec.l() {
        return Err(Error::Validation(format!(
            "source index {l} out of range (L={})",
            spec.l()
        )));
    }
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(n * spec.d);
    for _ in 0..n {
        spec.sources[l].covariates.sample_into(&mut rng, &mut data);
    }
    let x = Covariates::new(data, n, spec.d)?;
    let y = draw_labels(spec, l, &x, &mut rng);
    LabeledDataset::new(x, y, l as u32 + 1, spec.k + 1)
}

/// All L sources with n rows each, seeds derived per source.
pub fn gen_sources(spec: &DgpSpec, n: &[usize], seed: u64) -> Result<Vec<LabeledDataset>> {
    if n.len() != spec.l() {
        return Err(Error::Validation(format!(
            "{} sample sizes for {} sources",
            n.len(),
            spec.l()
        )));
    }
    n.iter()
        .enumerate()
        .map(|(l, &nl)| gen_source(spec, l, nl, derive_seed(seed, l as u64)))
        .collect()
}

pub fn gen_target(spec: &DgpSpec, n: usize, seed: u64) -> Result<UnlabeledDataset> {
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(n * spec.d);
    for _ in 0..n {
        spec.target.sample_into(&mut rng, &mut data);
    }
    UnlabeledDataset::new(Covariates::new(data, n, spec.d)?)
}
