//! Simulation studies producing tidy rows (setting, param, rep, method,
//! metric, value). Replications run in parallel; every random stream is
//! derived from the study seed and the replication index, so output does not
//! depend on the number of worker threads.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, ProblemConfig, UnlabeledDataset};
use crate::datagen::{gen_sources, gen_target, make_spec, DgpSpec, Setting, SettingParams};
use crate::error::{Error, Result};
use crate::inference::{infer_from_fit, z_upper};
use crate::metrics::{estimation_error, non_reducible_loss, population_theta, worst_case_loss};
use crate::rng::derive_path;
use crate::solver::{cgdro_fit, cgdro_fit_detailed, erm_pooled, group_dro, MirrorProxOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub setting: String,
    pub param: String,
    pub rep: usize,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

impl BenchRow {
    fn new(
        setting: Setting,
        param: impl Into<String>,
        rep: usize,
        method: &str,
        metric: impl Into<String>,
        value: f64,
    ) -> Self {
        BenchRow {
            setting: setting.name().to_string(),
            param: param.into(),
            rep,
            method: method.to_string(),
            metric: metric.into(),
            value,
        }
    }
}

pub fn write_rows_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "setting,param,rep,method,metric,value").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:?}",
            r.setting, r.param, r.rep, r.method, r.metric, r.value
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One simulated data set.
#[derive(Debug, Clone)]
pub struct Replication {
    pub sources: Vec<LabeledDataset>,
    pub target: UnlabeledDataset,
}

/// Replication `rep` of a study with base `seed`.
pub fn simulate(
    spec: &DgpSpec,
    n: &[usize],
    n_target: usize,
    seed: u64,
    rep: usize,
) -> Result<Replication> {
    Ok(Replication {
        sources: gen_sources(spec, n, derive_path(seed, &[100, rep as u64, 0]))?,
        target: gen_target(spec, n_target, derive_path(seed, &[100, rep as u64, 1]))?,
    })
}

/// Per-replication config: the study config with its own seed.
fn rep_config(config: &ProblemConfig, seed: u64, tag: u64, rep: usize) -> ProblemConfig {
    ProblemConfig {
        seed: derive_path(seed, &[300, tag, rep as u64]),
        ..config.clone()
    }
}

/// Least-squares slope of log y on log x.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone)]
pub struct MixtureOptions {
    pub grid: Vec<f64>,
    pub total_n: usize,
    pub n_target: usize,
    /// Size of the fresh target sample the losses are evaluated on.
    pub n_eval: usize,
    pub reps: usize,
    pub seed: u64,
    pub config: ProblemConfig,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        MixtureOptions {
            grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            total_n: 4000,
            n_target: 10_000,
            n_eval: 100_000,
            reps: 1,
            seed: 0,
            config: ProblemConfig::default(),
        }
    }
}

/// Worst-case loss of CG-DRO, Group DRO and pooled ERM on the two-source
/// shifted design as the share of the first source varies.
pub fn mixture_study(opts: &MixtureOptions) -> Result<Vec<BenchRow>> {
    let setting = Setting::Fig2;
    let spec = make_spec(setting, SettingParams::default(), opts.seed)?;
    let eval_x = gen_target(&spec, opts.n_eval, derive_path(opts.seed, &[200]))?.x;
    let mut rows: Vec<BenchRow> = (0..spec.l())
        .map(|l| {
            let v = non_reducible_loss(&spec, l, &eval_x, derive_path(opts.seed, &[201, l as u64]));
            BenchRow::new(
                setting,
                "all",
                0,
                "oracle",
                format!("non_reducible_source{}", l + 1),
                v,
            )
        })
        .collect();
    let tasks: Vec<(usize, usize)> = (0..opts.grid.len())
        .flat_map(|g| (0..opts.reps).map(move |r| (g, r)))
        .collect();
    let chunks = tasks
        .par_iter()
        .map(|&(g, rep)| -> Result<Vec<BenchRow>> {
            let mix = opts.grid[g];
            let n1 = (mix * opts.total_n as f64).round() as usize;
            let n = [n1, opts.total_n - n1];
            let task = (g * opts.reps + rep) as u64;
            let data = simulate(&spec, &n, opts.n_target, opts.seed, task as usize)?;
            let cfg = rep_config(&opts.config, opts.seed, 1, task as usize);
            let cg = cgdro_fit(&data.sources, &data.target, &cfg)?;
            let mp = MirrorProxOptions::from_eta(
                cfg.eta,
                spec.l(),
                cfg.max_iter,
                cfg.tol,
                cfg.gap_check_every,
            );
            let gd = group_dro(&data.sources, mp, cfg.inner_tol)?;
            let erm = erm_pooled(&data.sources, 0.0)?;
            let param = format!("mixture={mix}");
            let mut out = Vec::new();
            for (name, theta) in [("cgdro", &cg.theta), ("gdro", &gd.theta), ("erm", &erm)] {
                let (wc, per) = worst_case_loss(theta, &spec, &eval_x);
                out.push(BenchRow::new(
                    setting,
                    param.clone(),
                    rep,
                    name,
                    "worst_case_loss",
                    wc,
                ));
                for (l, v) in per.iter().enumerate() {
                    out.push(BenchRow::new(
                        setting,
                        param.clone(),
                        rep,
                        name,
                        format!("loss_source{}", l + 1),
                        *v,
                    ));
                }
            }
            out.push(BenchRow::new(
                setting,
                param.clone(),
                rep,
                "cgdro",
                "gamma1",
                cg.gamma[0],
            ));
            out.push(BenchRow::new(
                setting,
                param,
                rep,
                "gdro",
                "gamma1",
                gd.gamma[0],
            ));
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    rows.extend(chunks.into_iter().flatten());
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct RateOptions {
    pub setting: Setting,
    pub params: SettingParams,
    pub n_grid: Vec<usize>,
    pub n_target: usize,
    pub reps: usize,
    pub seed: u64,
    pub config: ProblemConfig,
    pub population: (usize, usize),
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions {
            setting: Setting::S1,
            params: SettingParams {
                d: Some(10),
                ..Default::default()
            },
            n_grid: vec![200, 400, 800, 1600],
            n_target: 10_000,
            reps: 50,
            seed: 0,
            config: ProblemConfig::default(),
            population: (
                crate::metrics::POPULATION_N,
                crate::metrics::POPULATION_N_TARGET,
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RateSummary {
    pub rows: Vec<BenchRow>,
    pub theta_ref: Vec<f64>,
    pub mean_error: Vec<f64>,
    pub slope: f64,
}

/// Estimation error against the large-sample reference as n grows.
pub fn rate_study(opts: &RateOptions) -> Result<RateSummary> {
    let spec = make_spec(opts.setting, opts.params, opts.seed)?;
    let pop_cfg = rep_config(&opts.config, opts.seed, 2, 0);
    let theta_ref = population_theta(
        &spec,
        opts.population.0,
        opts.population.1,
        derive_path(opts.seed, &[400]),
        &pop_cfg,
    )?;
    let tasks: Vec<(usize, usize)> = (0..opts.n_grid.len())
        .flat_map(|g| (0..opts.reps).map(move |r| (g, r)))
        .collect();
    let errs = tasks
        .par_iter()
        .map(|&(g, rep)| -> Result<f64> {
            let n = opts.n_grid[g];
            let task = g * opts.reps + rep;
            let data = simulate(&spec, &vec![n; spec.l()], opts.n_target, opts.seed, task)?;
            let fit = cgdro_fit(
                &data.sources,
                &data.target,
                &rep_config(&opts.config, opts.seed, 3, task),
            )?;
            Ok(estimation_error(&fit.theta, &theta_ref, spec.d))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut mean_error = Vec::new();
    for (g, &n) in opts.n_grid.iter().enumerate() {
        let slice = &errs[g * opts.reps..(g + 1) * opts.reps];
        for (rep, &e) in slice.iter().enumerate() {
            rows.push(BenchRow::new(
                opts.setting,
                format!("n={n}"),
                rep,
                "cgdro",
                "est_error",
                e,
            ));
        }
        mean_error.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    let ns: Vec<f64> = opts.n_grid.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&ns, &mean_error);
    Ok(RateSummary {
        rows,
        theta_ref,
        mean_error,
        slope,
    })
}

#[derive(Debug, Clone)]
pub struct CoverageOptions {
    pub setting: Setting,
    pub params: SettingParams,
    pub n: usize,
    pub n_target: usize,
    pub reps: usize,
    pub coord: usize,
    pub seed: u64,
    pub config: ProblemConfig,
    pub population: (usize, usize),
}

impl Default for CoverageOptions {
    fn default() -> Self {
        CoverageOptions {
            setting: Setting::S3,
            params: SettingParams {
                d: Some(10),
                delta: Some(2.0),
                ..Default::default()
            },
            n: 300,
            n_target: 3000,
            reps: 100,
            coord: 0,
            seed: 0,
            config: ProblemConfig {
                resamples: 300,
                ..Default::default()
            },
            population: (
                crate::metrics::POPULATION_N,
                crate::metrics::POPULATION_N_TARGET,
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoverageSummary {
    pub rows: Vec<BenchRow>,
    pub theta_star: f64,
    pub coverage: f64,
    pub mean_width: f64,
    /// Coverage of θ̂_j ± z_{α/2}·sd, sd taken across replications.
    pub normality_coverage: f64,
    pub estimates: Vec<f64>,
}

/// Coverage and width of the union interval over replications.
pub fn coverage_study(opts: &CoverageOptions) -> Result<CoverageSummary> {
    let spec = make_spec(opts.setting, opts.params, opts.seed)?;
    let pop_cfg = rep_config(&opts.config, opts.seed, 4, 0);
    let theta_ref = population_theta(
        &spec,
        opts.population.0,
        opts.population.1,
        derive_path(opts.seed, &[500]),
        &pop_cfg,
    )?;
    let theta_star = theta_ref[opts.coord];
    let per_rep = (0..opts.reps)
        .into_par_iter()
        .map(|rep| -> Result<(f64, bool, f64, usize)> {
            let data = simulate(
                &spec,
                &vec![opts.n; spec.l()],
                opts.n_target,
                opts.seed,
                rep,
            )?;
            let cfg = rep_config(&opts.config, opts.seed, 5, rep);
            let fit = cgdro_fit_detailed(&data.sources, &data.target, &cfg)?;
            let res = infer_from_fit(&fit, &data.target, &cfg, opts.coord)?;
            Ok((
                fit.fit.theta[opts.coord],
                res.covers(theta_star),
                res.width(),
                res.filtered_m,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let reps = per_rep.len() as f64;
    let estimates: Vec<f64> = per_rep.iter().map(|r| r.0).collect();
    let mean = estimates.iter().sum::<f64>() / reps;
    let sd =
        (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1.0).max(1.0)).sqrt();
    let z = z_upper(opts.config.alpha / 2.0);
    let param = format!(
        "delta={},sigma={},n={}",
        opts.params.delta.unwrap_or(0.0),
        opts.params.sigma.unwrap_or(0.0),
        opts.n
    );
    let mut rows = Vec::new();
    let mut normal_hits = 0usize;
    for (rep, &(est, covered, width, kept)) in per_rep.iter().enumerate() {
        let normal = (est - theta_star).abs() <= z * sd;
        normal_hits += usize::from(normal);
        rows.push(BenchRow::new(
            opts.setting,
            param.clone(),
            rep,
            "proposed",
            "covered",
            f64::from(u8::from(covered)),
        ));
        rows.push(BenchRow::new(
            opts.setting,
            param.clone(),
            rep,
            "proposed",
            "width",
            width,
        ));
        rows.push(BenchRow::new(
            opts.setting,
            param.clone(),
            rep,
            "proposed",
            "filtered_m",
            kept as f64,
        ));
        rows.push(BenchRow::new(
            opts.setting,
            param.clone(),
            rep,
            "cgdro",
            "theta_hat",
            est,
        ));
        rows.push(BenchRow::new(
            opts.setting,
            param.clone(),
            rep,
            "normality",
            "covered",
            f64::from(u8::from(normal)),
        ));
    }
    Ok(CoverageSummary {
        rows,
        theta_star,
        coverage: per_rep.iter().filter(|r| r.1).count() as f64 / reps,
        mean_width: per_rep.iter().map(|r| r.2).sum::<f64>() / reps,
        normality_coverage: normal_hits as f64 / reps,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert_abs_diff_eq!(log_log_slope(&x, &y), -0.5, epsilon = 1e-12);
    }
}
