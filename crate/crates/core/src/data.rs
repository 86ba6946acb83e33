//! Datasets, run configuration and file formats.
//!
//! Labeled source data travels as CSV with header `source,y,x1,…,xd`; target
//! covariates as CSV with header `x1,…,xd`. Results are JSON documents whose
//! floats round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major covariate matrix (one observation per row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    data: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
}

impl Covariates {
    pub fn new(data: Vec<f64>, n_rows: usize, n_cols: usize) -> Result<Self> {
        if n_cols == 0 {
            return Err(Error::Validation(
                "covariates need at least one column".into(),
            ));
        }
        if data.len() != n_rows * n_cols {
            return Err(Error::Validation(format!(
                "covariate buffer has {} entries, expected {}×{}",
                data.len(),
                n_rows,
                n_cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite covariate at row {}, column {}",
                pos / n_cols,
                pos % n_cols
            )));
        }
        Ok(Covariates {
            data,
            n_rows,
            n_cols,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Validation("ragged covariate rows".into()));
        }
        Self::new(rows.concat(), rows.len(), n_cols)
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.n_cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Rows picked by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Covariates {
        let mut data = Vec::with_capacity(idx.len() * self.n_cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Covariates {
            data,
            n_rows: idx.len(),
            n_cols: self.n_cols,
        }
    }

    /// Vertical concatenation.
    pub fn stack(parts: &[&Covariates]) -> Result<Covariates> {
        let n_cols = parts.first().map_or(0, |p| p.n_cols);
        if parts.iter().any(|p| p.n_cols != n_cols) {
            return Err(Error::Validation(
                "cannot stack covariates of different widths".into(),
            ));
        }
        let data: Vec<f64> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        let n_rows = parts.iter().map(|p| p.n_rows).sum();
        Ok(Covariates {
            data,
            n_rows,
            n_cols,
        })
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Covariates {
        Covariates {
            data: self.data.iter().map(|&v| f(v)).collect(),
            n_rows: self.n_rows,
            n_cols: self.n_cols,
        }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n_cols];
        for r in self.rows() {
            for (a, &v) in m.iter_mut().zip(r) {
                *a += v;
            }
        }
        let n = self.n_rows.max(1) as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

/// Labeled observations from one source domain. Labels are dense class indices
/// `0..=n_classes-1`, class 0 being the reference category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub x: Covariates,
    pub y: Vec<usize>,
    pub source_id: u32,
    n_classes: usize,
}

impl LabeledDataset {
    pub fn new(x: Covariates, y: Vec<usize>, source_id: u32, n_classes: usize) -> Result<Self> {
        if x.n_rows() != y.len() {
            return Err(Error::Validation(format!(
                "source {source_id}: {} covariate rows but {} labels",
                x.n_rows(),
                y.len()
            )));
        }
        if y.is_empty() {
            return Err(Error::Validation(format!("source {source_id} has no rows")));
        }
        if n_classes < 2 {
            return Err(Error::Validation(
                "need at least two classes (K ≥ 1)".into(),
            ));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Validation(format!(
                "source {source_id}: label {bad} outside 0..={}",
                n_classes - 1
            )));
        }
        Ok(LabeledDataset {
            x,
            y,
            source_id,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.n_cols()
    }

    /// K: number of non-reference classes.
    pub fn k(&self) -> usize {
        self.n_classes - 1
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: self.x.select(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            source_id: self.source_id,
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }
}

/// Unlabeled target-domain covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledDataset {
    pub x: Covariates,
}

impl UnlabeledDataset {
    pub fn new(x: Covariates) -> Result<Self> {
        if x.n_rows() == 0 {
            return Err(Error::Validation("target sample is empty".into()));
        }
        Ok(UnlabeledDataset { x })
    }

    pub fn len(&self) -> usize {
        self.x.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.n_rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.n_cols()
    }
}

/// Checks that sources share d and K and agree with the target.
pub fn check_problem(
    sources: &[LabeledDataset],
    target: &UnlabeledDataset,
) -> Result<(usize, usize)> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Validation("no source datasets".into()))?;
    let (d, k) = (first.dim(), first.k());
    for s in sources {
        if s.dim() != d || s.k() != k {
            return Err(Error::Validation(format!(
                "source {} has (d={}, K={}), expected (d={d}, K={k})",
                s.source_id,
                s.dim(),
                s.k()
            )));
        }
    }
    if target.dim() != d {
        return Err(Error::Validation(format!(
            "target has {} covariates, sources have {d}",
            target.dim()
        )));
    }
    Ok((d, k))
}

fn default_alpha() -> f64 {
    0.05
}
fn default_alpha0() -> f64 {
    0.01
}
fn default_eta0() -> f64 {
    0.1
}
fn default_resamples() -> usize {
    500
}
fn default_eta() -> f64 {
    0.1
}
fn default_max_iter() -> usize {
    100_000
}
fn default_tol() -> f64 {
    1e-4
}
fn default_seed() -> u64 {
    0
}
fn default_gap_every() -> usize {
    25
}
fn default_inner_tol() -> f64 {
    1e-9
}
fn default_ratio_clip() -> [f64; 2] {
    [0.05, 20.0]
}
fn default_prob_clip() -> f64 {
    1e-6
}

/// Run configuration. Field names double as TOML/JSON config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Significance level of the confidence interval.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Filtering budget, carved out of `alpha`.
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    /// Slack on the filtering threshold.
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    /// Number of perturbation draws.
    #[serde(default = "default_resamples", rename = "M", alias = "m")]
    pub resamples: usize,
    /// Mirror Prox learning-rate scale.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Duality-gap tolerance.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Nuisance ridge penalty; `None` selects it by cross-validation.
    #[serde(default)]
    pub ridge: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Treat sources and target as sharing one covariate law (ω ≡ 1).
    #[serde(default)]
    pub no_shift: bool,
    #[serde(default = "default_gap_every")]
    pub gap_check_every: usize,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_ratio_clip")]
    pub density_ratio_clip: [f64; 2],
    #[serde(default = "default_prob_clip")]
    pub prob_clip: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            alpha: default_alpha(),
            alpha0: default_alpha0(),
            eta0: default_eta0(),
            resamples: default_resamples(),
            eta: default_eta(),
            max_iter: default_max_iter(),
            tol: default_tol(),
            ridge: None,
            seed: default_seed(),
            no_shift: false,
            gap_check_every: default_gap_every(),
            inner_tol: default_inner_tol(),
            density_ratio_clip: default_ratio_clip(),
            prob_clip: default_prob_clip(),
        }
    }
}

impl ProblemConfig {
    /// α' = α − α₀, the level left for the per-draw intervals.
    pub fn alpha_prime(&self) -> f64 {
        self.alpha - self.alpha0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return bad(format!("alpha must lie in (0, 0.5), got {}", self.alpha));
        }
        if !(self.alpha0 > 0.0 && self.alpha0 <= 0.01) {
            return bad(format!("alpha0 must lie in (0, 0.01], got {}", self.alpha0));
        }
        if self.alpha <= self.alpha0 {
            return bad("alpha must exceed alpha0".into());
        }
        if !(self.eta0 > 0.0) {
            return bad("eta0 must be positive".into());
        }
        if self.resamples == 0 {
            return bad("M must be positive".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive".into());
        }
        if self.max_iter == 0 || self.gap_check_every == 0 {
            return bad("max_iter and gap_check_every must be positive".into());
        }
        if !(self.tol > 0.0) || !(self.inner_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0) {
                return bad(format!("ridge must be ≥ 0, got {r}"));
            }
        }
        let [lo, hi] = self.density_ratio_clip;
        if !(lo > 0.0 && hi > lo) {
            return bad("density_ratio_clip must satisfy 0 < lo < hi".into());
        }
        if !(self.prob_clip > 0.0 && self.prob_clip < 0.5) {
            return bad("prob_clip must lie in (0, 0.5)".into());
        }
        Ok(())
    }

    /// Reads a TOML (`.toml`) or JSON (anything else) config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ProblemConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.into(),
                line: e
                    .span()
                    .map_or(0, |s| text[..s.start].lines().count() as u64),
                message: e.message().to_string(),
            })?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.into(),
                line: e.line() as u64,
                message: e.to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Validation(format!("{}: {other:?}", path.display())),
        })
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

fn read_record(
    path: &Path,
    r: std::result::Result<csv::StringRecord, csv::Error>,
) -> Result<csv::StringRecord> {
    r.map_err(|e| {
        let line = e.position().map_or(0, |p| p.line());
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            csv::ErrorKind::UnequalLengths {
                expected_len, len, ..
            } => parse_err(
                path,
                line,
                format!("expected {expected_len} fields, found {len}"),
            ),
            other => parse_err(path, line, format!("{other:?}")),
        }
    })
}

/// Loads labeled source data, one dataset per distinct `source` id (sorted).
/// K is inferred as the largest label present.
pub fn load_labeled(path: &Path) -> Result<Vec<LabeledDataset>> {
    load_labeled_with_classes(path, None)
}

/// As [`load_labeled`], but with a declared K; labels above it are rejected.
pub fn load_labeled_with_classes(
    path: &Path,
    declared_k: Option<usize>,
) -> Result<Vec<LabeledDataset>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "source" || &headers[1] != "y" {
        return Err(parse_err(path, 1, "header must be `source,y,x1,…,xd`"));
    }
    let d = headers.len() - 2;

    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
    let mut max_label = 0usize;
    for rec in rdr.records() {
        let rec = read_record(path, rec)?;
        let line = rec.position().map_or(0, |p| p.line());
        let source: u32 = rec[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad source id `{}`", &rec[0])))?;
        let y: usize = rec[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad label `{}`", &rec[1])))?;
        if let Some(k) = declared_k {
            if y > k {
                return Err(Error::Validation(format!(
                    "{}, line {line}: label {y} outside 0..={k}",
                    path.display()
                )));
            }
        }
        max_label = max_label.max(y);
        let entry = groups.entry(source).or_default();
        for j in 0..d {
            let v: f64 = rec[j + 2].parse().map_err(|_| {
                parse_err(
                    path,
                    line,
                    format!("bad value `{}` in column x{}", &rec[j + 2], j + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    path,
                    line,
                    format!("non-finite value in column x{}", j + 1),
                ));
            }
            entry.0.push(v);
        }
        entry.1.push(y);
    }
    if groups.is_empty() {
        return Err(Error::Validation(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    let k = declared_k.unwrap_or(max_label).max(1);
    groups
        .into_iter()
        .map(|(id, (x, y))| {
            let n = y.len();
            LabeledDataset::new(Covariates::new(x, n, d)?, y, id, k + 1)
        })
        .collect()
}

/// Loads target covariates from `x1,…,xd` CSV. A labeled-format file is also
/// accepted; its `source` and `y` columns are ignored.
pub fn load_unlabeled(path: &Path) -> Result<UnlabeledDataset> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let skip = if headers.len() >= 2 && &headers[0] == "source" && &headers[1] == "y" {
        2
    } else {
        0
    };
    let d = headers.len() - skip;
    if d == 0 {
        return Err(parse_err(path, 1, "no covariate columns"));
    }
    let mut x = Vec::new();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = read_record(path, rec)?;
        let line = rec.position().map_or(0, |p| p.line());
        for j in 0..d {
            let v: f64 = rec[j + skip]
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad value `{}`", &rec[j + skip])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, "non-finite value"));
            }
            x.push(v);
        }
        n += 1;
    }
    UnlabeledDataset::new(Covariates::new(x, n, d)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes sources in the `source,y,x1,…,xd` format. Floats use the shortest
/// representation that parses back to the same value.
pub fn save_labeled(sources: &[LabeledDataset], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let d = sources.first().map_or(0, |s| s.dim());
    let io = |e| Error::io(path, e);
    let mut header = String::from("source,y");
    for j in 1..=d {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for s in sources {
        for (row, &y) in s.x.rows().zip(&s.y) {
            write!(w, "{},{}", s.source_id, y).map_err(io)?;
            for v in row {
                write!(w, ",{v:?}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn save_unlabeled(target: &UnlabeledDataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let header: Vec<String> = (1..=target.dim()).map(|j| format!("x{j}")).collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in target.x.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// On-disk result document shared by `fit` and `infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gap_trace: Vec<f64>,
    pub iterations: usize,
    pub ci: Vec<[f64; 2]>,
    pub filtered_m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coord: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_zero: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuisance_diagnostics: Option<serde_json::Value>,
    /// Estimated moments (μ̂, their covariances, σ_min) behind a CG-DRO fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<serde_json::Value>,
}

pub fn save_results(doc: &ResultDocument, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, doc)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_results(path: &Path) -> Result<ResultDocument> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}
