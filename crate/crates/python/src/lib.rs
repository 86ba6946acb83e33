//! Python bindings for the `cgdro` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cgdro::data as core_data;
use cgdro::datagen::{make_spec, Setting, SettingParams};
use cgdro::solver::{cgdro_fit_detailed, erm_result, MirrorProxOptions};

fn to_py(e: cgdro::Error) -> PyErr {
    match e {
        cgdro::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_numerical() => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn covariates(rows: Vec<Vec<f64>>) -> PyResult<core_data::Covariates> {
    core_data::Covariates::from_rows(&rows).map_err(to_py)
}

/// Labeled rows from one source.
#[pyclass(frozen, skip_from_py_object, module = "cgdro_py")]
#[derive(Clone)]
struct LabeledDataset {
    inner: core_data::LabeledDataset,
}

#[pymethods]
impl LabeledDataset {
    #[new]
    #[pyo3(signature = (x, y, source_id=1, n_classes=None))]
    fn new(x: Vec<Vec<f64>>, y: Vec<usize>, source_id: u32, n_classes: Option<usize>) -> PyResult<Self> {
        let nc = n_classes.unwrap_or_else(|| y.iter().copied().max().unwrap_or(0) + 1).max(2);
        let inner = core_data::LabeledDataset::new(covariates(x)?, y, source_id, nc).map_err(to_py)?;
        Ok(LabeledDataset { inner })
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.inner.x.rows().map(<[f64]>::to_vec).collect()
    }

    #[getter]
    fn y(&self) -> Vec<usize> {
        self.inner.y.clone()
    }

    #[getter]
    fn source_id(&self) -> u32 {
        self.inner.source_id
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "LabeledDataset(source_id={}, n={}, d={}, n_classes={})",
            self.inner.source_id,
            self.inner.len(),
            self.inner.dim(),
            self.inner.n_classes()
        )
    }
}

/// Unlabeled target covariates.
#[pyclass(frozen, skip_from_py_object, module = "cgdro_py")]
#[derive(Clone)]
struct UnlabeledDataset {
    inner: core_data::UnlabeledDataset,
}

#[pymethods]
impl UnlabeledDataset {
    #[new]
    fn new(x: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = core_data::UnlabeledDataset::new(covariates(x)?).map_err(to_py)?;
        Ok(UnlabeledDataset { inner })
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.inner.x.rows().map(<[f64]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("UnlabeledDataset(n={}, d={})", self.inner.len(), self.inner.dim())
    }
}

/// Solver, nuisance and inference settings. Keyword arguments use the same
/// names as the TOML/JSON config file (`M` for the number of draws).
#[pyclass(skip_from_py_object, module = "cgdro_py")]
#[derive(Clone)]
struct ProblemConfig {
    inner: core_data::ProblemConfig,
}

#[pymethods]
impl ProblemConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner = match kwargs {
            None => core_data::ProblemConfig::default(),
            Some(kw) => {
                let text: String = py.import("json")?.call_method1("dumps", (kw,))?.extract()?;
                serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?
            }
        };
        inner.validate().map_err(to_py)?;
        Ok(ProblemConfig { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let inner = core_data::ProblemConfig::from_file(&path).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(ProblemConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("ProblemConfig({})", self.to_json())
    }
}

/// θ̂, γ̂ and the solver trace of one fit.
#[pyclass(frozen, module = "cgdro_py")]
struct FitResult {
    doc: core_data::ResultDocument,
}

#[pymethods]
impl FitResult {
    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.doc.theta.clone()
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.doc.gamma.clone()
    }

    #[getter]
    fn gap_trace(&self) -> Vec<f64> {
        self.doc.gap_trace.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.doc.iterations
    }

    #[getter]
    fn converged(&self) -> Option<bool> {
        self.doc.converged
    }

    /// The result document as JSON.
    fn to_json(&self) -> String {
        serde_json::to_string(&self.doc).expect("result serializes")
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(method={}, iterations={}, theta={:?})",
            self.doc.method.as_deref().unwrap_or("?"),
            self.doc.iterations,
            self.doc.theta
        )
    }
}

/// Union confidence interval for one coordinate of θ.
#[pyclass(frozen, module = "cgdro_py")]
struct InferenceResult {
    doc: core_data::ResultDocument,
    width: f64,
}

#[pymethods]
impl InferenceResult {
    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.doc.theta.clone()
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.doc.gamma.clone()
    }

    #[getter]
    fn ci(&self) -> Vec<(f64, f64)> {
        self.doc.ci.iter().map(|iv| (iv[0], iv[1])).collect()
    }

    #[getter]
    fn filtered_m(&self) -> usize {
        self.doc.filtered_m
    }

    #[getter]
    fn reject_zero(&self) -> bool {
        self.doc.reject_zero.unwrap_or(false)
    }

    #[getter]
    fn width(&self) -> f64 {
        self.width
    }

    fn covers(&self, value: f64) -> bool {
        cgdro::inference::union_contains(&self.doc.ci, value)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.doc).expect("result serializes")
    }

    fn __repr__(&self) -> String {
        format!("InferenceResult(ci={:?}, filtered_m={})", self.doc.ci, self.doc.filtered_m)
    }
}

fn unwrap_sources(sources: &[PyRef<'_, LabeledDataset>]) -> Vec<core_data::LabeledDataset> {
    sources.iter().map(|s| s.inner.clone()).collect()
}

fn config_or_default(config: Option<PyRef<'_, ProblemConfig>>) -> core_data::ProblemConfig {
    config.map(|c| c.inner.clone()).unwrap_or_default()
}

/// Fits `method` ("cgdro", "gdro" or "erm") on the sources; the target is
/// used by CG-DRO only.
#[pyfunction]
#[pyo3(signature = (sources, target, config=None, method="cgdro"))]
fn fit(
    py: Python<'_>,
    sources: Vec<PyRef<'_, LabeledDataset>>,
    target: PyRef<'_, UnlabeledDataset>,
    config: Option<PyRef<'_, ProblemConfig>>,
    method: &str,
) -> PyResult<FitResult> {
    let method: cgdro::solver::Method = method.parse().map_err(to_py)?;
    let src = unwrap_sources(&sources);
    let tgt = target.inner.clone();
    let cfg = config_or_default(config);
    let doc = py
        .detach(move || -> cgdro::Result<core_data::ResultDocument> {
            cfg.validate()?;
            Ok(match method {
                cgdro::solver::Method::Cgdro => {
                    let f = cgdro_fit_detailed(&src, &tgt, &cfg)?;
                    let mut doc = f.fit.to_document();
                    doc.moments = Some(serde_json::to_value(&f.moments).expect("moments serialize"));
                    doc
                }
                cgdro::solver::Method::Gdro => {
                    let opts =
                        MirrorProxOptions::from_eta(cfg.eta, src.len(), cfg.max_iter, cfg.tol, cfg.gap_check_every);
                    cgdro::group_dro(&src, opts, cfg.inner_tol)?.to_document()
                }
                cgdro::solver::Method::Erm => erm_result(&src, 0.0)?.to_document(),
            })
        })
        .map_err(to_py)?;
    Ok(FitResult { doc })
}

/// CG-DRO fit plus the perturbation interval for θ[coord] (0-based).
#[pyfunction]
#[pyo3(signature = (sources, target, coord, config=None))]
fn infer(
    py: Python<'_>,
    sources: Vec<PyRef<'_, LabeledDataset>>,
    target: PyRef<'_, UnlabeledDataset>,
    coord: usize,
    config: Option<PyRef<'_, ProblemConfig>>,
) -> PyResult<InferenceResult> {
    let src = unwrap_sources(&sources);
    let tgt = target.inner.clone();
    let cfg = config_or_default(config);
    let res = py
        .detach(move || cgdro::infer(&src, &tgt, &cfg, coord))
        .map_err(to_py)?;
    Ok(InferenceResult {
        width: res.width(),
        doc: res.to_document(),
    })
}

/// One replication of a built-in setting: (sources, target).
#[pyfunction]
#[pyo3(signature = (setting, n, n_target, seed=0, rep=0, delta=None, sigma=None, d=None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    setting: &str,
    n: usize,
    n_target: usize,
    seed: u64,
    rep: usize,
    delta: Option<f64>,
    sigma: Option<f64>,
    d: Option<usize>,
) -> PyResult<(Vec<LabeledDataset>, UnlabeledDataset)> {
    let setting: Setting = setting.parse().map_err(to_py)?;
    let params = SettingParams {
        delta,
        sigma,
        d,
        ..Default::default()
    };
    let data = py
        .detach(move || -> cgdro::Result<_> {
            let spec = make_spec(setting, params, seed)?;
            cgdro::harness::simulate(&spec, &vec![n; spec.l()], n_target, seed, rep)
        })
        .map_err(to_py)?;
    Ok((
        data.sources.into_iter().map(|inner| LabeledDataset { inner }).collect(),
        UnlabeledDataset { inner: data.target },
    ))
}

/// Reads a `source,y,x1,…,xd` CSV into one dataset per source.
#[pyfunction]
fn load_labeled(path: PathBuf) -> PyResult<Vec<LabeledDataset>> {
    let sets = core_data::load_labeled(&path).map_err(to_py)?;
    Ok(sets.into_iter().map(|inner| LabeledDataset { inner }).collect())
}

#[pyfunction]
fn load_unlabeled(path: PathBuf) -> PyResult<UnlabeledDataset> {
    let inner = core_data::load_unlabeled(&path).map_err(to_py)?;
    Ok(UnlabeledDataset { inner })
}

#[pymodule]
fn cgdro_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<LabeledDataset>()?;
    m.add_class::<UnlabeledDataset>()?;
    m.add_class::<ProblemConfig>()?;
    m.add_class::<FitResult>()?;
    m.add_class::<InferenceResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(load_labeled, m)?)?;
    m.add_function(wrap_pyfunction!(load_unlabeled, m)?)?;
    Ok(())
}
