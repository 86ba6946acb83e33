use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cgdro::data::{load_labeled, load_unlabeled, save_labeled, save_results, save_unlabeled, ProblemConfig};
use cgdro::datagen::{make_spec, Setting, SettingParams};
use cgdro::harness::{
    coverage_study, mixture_study, rate_study, simulate, write_rows_csv, CoverageOptions, MixtureOptions, RateOptions,
};
use cgdro::inference::infer_from_fit;
use cgdro::solver::{cgdro_fit_detailed, erm_result, group_dro, MirrorProxOptions};
use cgdro::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

/// Field names of the result document, hashed into the version string so
/// consumers can detect schema changes.
const RESULT_SCHEMA: &str =
    "theta,gamma,gap_trace,iterations,ci,filtered_m,method,converged,coord,reject_zero,nuisance_diagnostics,moments";

fn version_string() -> &'static str {
    static VERSION: std::sync::OnceLock<String> = std::sync::OnceLock::new();
    VERSION.get_or_init(|| {
        let digest = Sha256::digest(RESULT_SCHEMA.as_bytes());
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("{} (schema {hex})", env!("CARGO_PKG_VERSION"))
    })
}

#[derive(Parser, Debug)]
#[command(name = "cgdro", version = version_string(), about = "Conditional group DRO: fitting, inference and simulation")]
struct Cli {
    /// Worker threads for replication- and draw-level parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    /// TOML or JSON file with problem settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Progress lines on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit CG-DRO, Group DRO or pooled ERM.
    Fit(FitArgs),
    /// Fit CG-DRO and build a perturbation confidence interval for one coordinate.
    Infer(InferArgs),
    /// Write simulated replications as CSV.
    Simulate(SimulateArgs),
    /// Run a simulation study and write tidy CSV.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct SolverFlags {
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Nuisance ridge; cross-validated when absent.
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sources and target share one covariate law.
    #[arg(long)]
    no_shift: bool,
}

#[derive(Args, Debug, Default)]
struct InferenceFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    eta0: Option<f64>,
    /// Number of perturbation draws.
    #[arg(long = "M")]
    resamples: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    sources: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Cgdro)]
    method: MethodArg,
    #[command(flatten)]
    solver: SolverFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Cgdro,
    Gdro,
    Erm,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    sources: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// 0-based index into the stacked θ.
    #[arg(long)]
    coord: usize,
    #[command(flatten)]
    inference: InferenceFlags,
    #[command(flatten)]
    solver: SolverFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy)]
struct SettingFlags {
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
}

impl SettingFlags {
    fn params(self) -> SettingParams {
        SettingParams {
            delta: self.delta,
            sigma: self.sigma,
            d: self.d,
            l: self.l,
            k: self.k,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    setting: Setting,
    #[command(flatten)]
    params: SettingFlags,
    /// Rows per source.
    #[arg(long)]
    n: usize,
    /// Target rows.
    #[arg(long = "N", default_value_t = 2000)]
    n_target: usize,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Study {
    Mixture,
    Rate,
    Coverage,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum)]
    study: Study,
    /// Shares of the first source (mixture study).
    #[arg(long, value_delimiter = ',')]
    mixture_grid: Option<Vec<f64>>,
    /// Source sizes (rate study).
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    /// Rows per source (coverage study) or total source rows (mixture study).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "N")]
    n_target: Option<usize>,
    #[arg(long)]
    setting: Option<Setting>,
    #[command(flatten)]
    params: SettingFlags,
    #[arg(long, default_value_t = 0)]
    coord: usize,
    /// Sizes (per-source, target) of the reference fit.
    #[arg(long, value_delimiter = ',')]
    population: Option<Vec<usize>>,
    #[command(flatten)]
    inference: InferenceFlags,
    #[command(flatten)]
    solver: SolverFlags,
    #[arg(long)]
    out: PathBuf,
}

/// Where a failure happened, reported alongside the error class.
#[derive(Clone, Copy)]
enum Stage {
    Config,
    Data,
    Solver,
    Inference,
    Datagen,
    Metrics,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Data => "data_model",
            Stage::Solver => "solver",
            Stage::Inference => "inference",
            Stage::Datagen => "datagen",
            Stage::Metrics => "metrics",
        }
    }
}

struct Failure {
    stage: Stage,
    error: Error,
}

trait At<T> {
    fn at(self, stage: Stage) -> Result<T, Failure>;
}

impl<T> At<T> for cgdro::Result<T> {
    fn at(self, stage: Stage) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

struct Log {
    verbose: bool,
    start: Instant,
}

impl Log {
    fn event(&self, event: &str, fields: &[(&str, String)]) {
        if self.verbose {
            let kv: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
            eprintln!("t={:.3} event={event} {}", self.start.elapsed().as_secs_f64(), kv.join(" "));
        }
    }
}

fn base_config(path: Option<&Path>) -> Result<ProblemConfig, Failure> {
    match path {
        Some(p) => ProblemConfig::from_file(p).at(Stage::Config),
        None => Ok(ProblemConfig::default()),
    }
}

fn apply_solver(cfg: &mut ProblemConfig, f: &SolverFlags) {
    if let Some(v) = f.eta {
        cfg.eta = v;
    }
    if let Some(v) = f.max_iter {
        cfg.max_iter = v;
    }
    if let Some(v) = f.tol {
        cfg.tol = v;
    }
    if f.ridge.is_some() {
        cfg.ridge = f.ridge;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if f.no_shift {
        cfg.no_shift = true;
    }
}

fn apply_inference(cfg: &mut ProblemConfig, f: &InferenceFlags) {
    if let Some(v) = f.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = f.alpha0 {
        cfg.alpha0 = v;
    }
    if let Some(v) = f.eta0 {
        cfg.eta0 = v;
    }
    if let Some(v) = f.resamples {
        cfg.resamples = v;
    }
}

fn run_fit(args: &FitArgs, cfg_path: Option<&Path>, log: &Log) -> Result<(), Failure> {
    let mut cfg = base_config(cfg_path)?;
    apply_solver(&mut cfg, &args.solver);
    cfg.validate().at(Stage::Config)?;
    let sources = load_labeled(&args.sources).at(Stage::Data)?;
    let target = load_unlabeled(&args.target).at(Stage::Data)?;
    log.event("loaded", &[("sources", sources.len().to_string()), ("target_rows", target.len().to_string())]);
    let doc = match args.method {
        MethodArg::Cgdro => {
            let fit = cgdro_fit_detailed(&sources, &target, &cfg).at(Stage::Solver)?;
            let mut doc = fit.fit.to_document();
            doc.moments = Some(serde_json::to_value(&fit.moments).expect("moments serialize"));
            doc
        }
        MethodArg::Gdro => {
            let l = sources.len();
            let opts = MirrorProxOptions::from_eta(cfg.eta, l, cfg.max_iter, cfg.tol, cfg.gap_check_every);
            group_dro(&sources, opts, cfg.inner_tol).at(Stage::Solver)?.to_document()
        }
        MethodArg::Erm => erm_result(&sources, 0.0).at(Stage::Solver)?.to_document(),
    };
    log.event(
        "fitted",
        &[("method", format!("{:?}", args.method).to_lowercase()), ("iterations", doc.iterations.to_string())],
    );
    save_results(&doc, &args.out).at(Stage::Data)
}

fn run_infer(args: &InferArgs, cfg_path: Option<&Path>, log: &Log) -> Result<(), Failure> {
    let mut cfg = base_config(cfg_path)?;
    apply_solver(&mut cfg, &args.solver);
    apply_inference(&mut cfg, &args.inference);
    cfg.validate().at(Stage::Config)?;
    let sources = load_labeled(&args.sources).at(Stage::Data)?;
    let target = load_unlabeled(&args.target).at(Stage::Data)?;
    let fit = cgdro_fit_detailed(&sources, &target, &cfg).at(Stage::Solver)?;
    log.event("fitted", &[("iterations", fit.fit.iterations.to_string())]);
    let res = infer_from_fit(&fit, &target, &cfg, args.coord).at(Stage::Inference)?;
    log.event(
        "inferred",
        &[("kept", res.filtered_m.to_string()), ("reject_zero", res.reject_zero.to_string())],
    );
    let mut doc = res.to_document();
    doc.moments = Some(serde_json::to_value(&fit.moments).expect("moments serialize"));
    save_results(&doc, &args.out).at(Stage::Data)
}

fn run_simulate(args: &SimulateArgs, log: &Log) -> Result<(), Failure> {
    use rayon::prelude::*;
    let spec = make_spec(args.setting, args.params.params(), args.seed).at(Stage::Datagen)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::Io {
            path: args.out_dir.clone(),
            source: e,
        })
        .at(Stage::Data)?;
    let sizes = vec![args.n; spec.l()];
    (0..args.reps).into_par_iter().try_for_each(|rep| -> Result<(), Failure> {
        let data = simulate(&spec, &sizes, args.n_target, args.seed, rep).at(Stage::Datagen)?;
        save_labeled(&data.sources, &args.out_dir.join(format!("rep{rep}_sources.csv"))).at(Stage::Data)?;
        save_unlabeled(&data.target, &args.out_dir.join(format!("rep{rep}_target.csv"))).at(Stage::Data)
    })?;
    log.event("simulated", &[("setting", spec.setting.name().into()), ("reps", args.reps.to_string())]);
    Ok(())
}

fn run_bench(args: &BenchArgs, cfg_path: Option<&Path>, log: &Log) -> Result<(), Failure> {
    let mut cfg = base_config(cfg_path)?;
    apply_solver(&mut cfg, &args.solver);
    apply_inference(&mut cfg, &args.inference);
    cfg.validate().at(Stage::Config)?;
    let seed = cfg.seed;
    let population = match args.population.as_deref() {
        None => None,
        Some(&[n, n_target]) => Some((n, n_target)),
        Some(_) => return Err(Error::Validation("--population takes two sizes: n,N".into())).at(Stage::Config),
    };
    let rows = match args.study {
        Study::Mixture => {
            let mut o = MixtureOptions {
                seed,
                config: cfg,
                ..Default::default()
            };
            if let Some(g) = &args.mixture_grid {
                o.grid.clone_from(g);
            }
            if let Some(r) = args.reps {
                o.reps = r;
            }
            if let Some(n) = args.n {
                o.total_n = n;
            }
            if let Some(n) = args.n_target {
                o.n_target = n;
            }
            mixture_study(&o).at(Stage::Metrics)?
        }
        Study::Rate => {
            let mut o = RateOptions {
                seed,
                config: cfg,
                ..Default::default()
            };
            if let Some(s) = args.setting {
                o.setting = s;
                o.params = args.params.params();
            } else if args.params.params() != SettingParams::default() {
                o.params = args.params.params();
            }
            if let Some(g) = &args.n_grid {
                o.n_grid.clone_from(g);
            }
            if let Some(r) = args.reps {
                o.reps = r;
            }
            if let Some(n) = args.n_target {
                o.n_target = n;
            }
            if let Some(p) = population {
                o.population = p;
            }
            rate_study(&o).at(Stage::Metrics)?.rows
        }
        Study::Coverage => {
            let defaults = CoverageOptions::default();
            let mut o = CoverageOptions {
                seed,
                config: ProblemConfig {
                    resamples: args.inference.resamples.unwrap_or(defaults.config.resamples),
                    ..cfg
                },
                ..defaults
            };
            if let Some(s) = args.setting {
                o.setting = s;
                o.params = args.params.params();
            } else if args.params.params() != SettingParams::default() {
                o.params = SettingParams {
                    d: args.params.d.or(o.params.d),
                    delta: args.params.delta.or(o.params.delta),
                    ..args.params.params()
                };
            }
            if let Some(r) = args.reps {
                o.reps = r;
            }
            if let Some(n) = args.n {
                o.n = n;
            }
            if let Some(n) = args.n_target {
                o.n_target = n;
            }
            if let Some(p) = population {
                o.population = p;
            }
            o.coord = args.coord;
            coverage_study(&o).at(Stage::Metrics)?.rows
        }
    };
    log.event("bench", &[("rows", rows.len().to_string())]);
    write_rows_csv(&rows, &args.out).at(Stage::Data)
}

fn report(f: &Failure, json: bool) {
    if json {
        let v = serde_json::json!({
            "error": f.error.kind(),
            "module": f.stage.name(),
            "message": f.error.to_string(),
            "exit_code": exit_code(&f.error),
        });
        eprintln!("{v}");
    } else {
        eprintln!("error [{}/{}]: {}", f.stage.name(), f.error.kind(), f.error);
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let log = Log {
        verbose: cli.verbose,
        start: Instant::now(),
    };
    let run = || -> Result<(), Failure> {
        let cfg = cli.config.as_deref();
        match &cli.command {
            Command::Fit(a) => run_fit(a, cfg, &log),
            Command::Infer(a) => run_infer(a, cfg, &log),
            Command::Simulate(a) => run_simulate(a, &log),
            Command::Bench(a) => run_bench(a, cfg, &log),
        }
    };
    let outcome = match cli.workers {
        Some(0) => Err(Failure {
            stage: Stage::Config,
            error: Error::Validation("--workers must be at least 1".into()),
        }),
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(Failure {
                stage: Stage::Config,
                error: Error::Validation(format!("cannot start worker pool: {e}")),
            }),
        },
        None => run(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f, cli.json_errors);
            ExitCode::from(exit_code(&f.error))
        }
    }
}
