//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataset::{load_csv, standardize, write_csv, Dataset, StandardizationRecord};
use crate::error::{Error, Result};
use crate::estimator::{fit, multi_start_fit, FitOptions, FitResult, IndexCoefficient, StartOutcome};
use crate::inference::{estimate_covariance, GramAverage, InferenceReport};
use crate::kernels::{Bandwidths, KernelSpec};
use crate::report::write_json;
use crate::selection::{cv_select, rule_of_thumb, select_bandwidths, CvMode, CvOptions, CvPlan, CvResult};
use crate::simulation::{simulate, Design};
use crate::smoother::{central_grid, linspace, LinkSmoother, EVAL_GRID_POINTS};
use crate::study::{final_fit, run_study, BandwidthChoice, StudyOptions};

#[derive(Debug, Parser)]
#[command(name = "fsim", version, about = "Functional single-index models for sparse longitudinal data")]
pub struct Cli {
    /// Cap on worker threads (output does not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the direction, its covariance and the surface.
    Fit(FitArgs),
    /// Cross-validate the bandwidth pair.
    Cv(CvArgs),
    /// Generate a simulated dataset.
    Simulate(SimulateArgs),
    /// Monte Carlo study over a simulation design.
    Study(StudyArgs),
    /// Evaluate the surface for a given direction and bandwidths.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// 1-based covariate columns to standardize, or `all`.
    #[arg(long)]
    pub standardize: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BandwidthArgs {
    #[arg(long)]
    pub ht: Option<f64>,
    #[arg(long)]
    pub hz: Option<f64>,
    #[arg(long = "cv-m", default_value_t = 10)]
    pub cv_m: usize,
    #[arg(long = "cv-mode", default_value = "full")]
    pub cv_mode: CvMode,
    /// Explicit comma-separated time bandwidth candidates.
    #[arg(long = "ht-grid", value_delimiter = ',')]
    pub ht_grid: Option<Vec<f64>>,
    /// Explicit comma-separated index bandwidth candidates.
    #[arg(long = "hz-grid", value_delimiter = ',')]
    pub hz_grid: Option<Vec<f64>>,
    /// Use the default 6×6 grid around the rule-of-thumb scale.
    #[arg(long = "grid-default")]
    pub grid_default: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FitControl {
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: KernelSpec,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long = "max-iter", default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub bandwidth: BandwidthArgs,
    #[command(flatten)]
    pub control: FitControl,
    /// Average standing in for `G(z)`: `own`, `anchor` or `local`.
    #[arg(long = "gram", default_value = "own")]
    pub gram: GramAverage,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub bandwidth: BandwidthArgs,
    #[command(flatten)]
    pub control: FitControl,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "I")]
    pub design: Design,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    #[arg(long, default_value = "I")]
    pub design: Design,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Number of cross-validation folds (ignored with fixed bandwidths).
    #[arg(long, default_value_t = 10)]
    pub cv: usize,
    #[arg(long = "cv-mode", default_value = "full")]
    pub cv_mode: CvMode,
    #[arg(long)]
    pub ht: Option<f64>,
    #[arg(long)]
    pub hz: Option<f64>,
    #[command(flatten)]
    pub control: FitControl,
    /// Also estimate the sandwich covariance in each replicate.
    #[arg(long)]
    pub covariance: bool,
    #[arg(long = "gram", default_value = "own")]
    pub gram: GramAverage,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Comma-separated direction (normalized before use).
    #[arg(long, value_delimiter = ',', required = true)]
    pub beta: Vec<f64>,
    #[arg(long)]
    pub ht: f64,
    #[arg(long)]
    pub hz: f64,
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: KernelSpec,
    /// Points per grid axis.
    #[arg(long = "grid-points", default_value_t = EVAL_GRID_POINTS)]
    pub grid_points: usize,
    /// Time range `lo,hi`; defaults to the central 90% of the data.
    #[arg(long = "t-range", value_delimiter = ',')]
    pub t_range: Option<Vec<f64>>,
    /// Index range `lo,hi`; defaults to the central 90% of the data.
    #[arg(long = "u-range", value_delimiter = ',')]
    pub u_range: Option<Vec<f64>>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// How the bandwidth pair is obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    Fixed(Bandwidths),
    DefaultGrid,
    Grid { h_t: Vec<f64>, h_z: Vec<f64> },
}

/// Validated settings shared by the data-driven commands.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<PathBuf>,
    pub kernel: KernelSpec,
    pub bandwidth: BandwidthMode,
    pub cv_m: usize,
    pub cv_mode: CvMode,
    pub tol: f64,
    pub max_iter: usize,
    pub starts: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn from_parts(
        command: &str,
        input: Option<&Path>,
        bw: &BandwidthArgs,
        control: &FitControl,
        out: &Path,
    ) -> Result<Self> {
        let fixed = match (bw.ht, bw.hz) {
            (Some(ht), Some(hz)) => Some(Bandwidths::new(ht, hz)?),
            (None, None) => None,
            _ => return Err(Error::InvalidInput("--ht and --hz must be given together".into())),
        };
        let explicit_grid = bw.ht_grid.is_some() || bw.hz_grid.is_some();
        let bandwidth = match fixed {
            Some(h) => {
                if explicit_grid || bw.grid_default {
                    return Err(Error::InvalidInput(
                        "fixed bandwidths (--ht/--hz) exclude grid flags".into(),
                    ));
                }
                BandwidthMode::Fixed(h)
            }
            None if explicit_grid => {
                if bw.grid_default {
                    return Err(Error::InvalidInput("--grid-default excludes --ht-grid/--hz-grid".into()));
                }
                match (&bw.ht_grid, &bw.hz_grid) {
                    (Some(t), Some(z)) if !t.is_empty() && !z.is_empty() => {
                        for &h in t.iter().chain(z) {
                            Bandwidths::new(h, h)?;
                        }
                        BandwidthMode::Grid {
                            h_t: t.clone(),
                            h_z: z.clone(),
                        }
                    }
                    _ => return Err(Error::InvalidInput("--ht-grid and --hz-grid must be given together".into())),
                }
            }
            None => BandwidthMode::DefaultGrid,
        };
        if !(control.tol > 0.0) {
            return Err(Error::InvalidInput("--tol must be positive".into()));
        }
        if control.max_iter == 0 {
            return Err(Error::InvalidInput("--max-iter must be at least 1".into()));
        }
        if control.starts == 0 {
            return Err(Error::InvalidInput("--starts must be at least 1".into()));
        }
        if bw.cv_m < 2 {
            return Err(Error::InvalidInput("--cv-m must be at least 2".into()));
        }
        Ok(RunConfig {
            command: command.to_string(),
            input: input.map(Path::to_path_buf),
            kernel: control.kernel,
            bandwidth,
            cv_m: bw.cv_m,
            cv_mode: bw.cv_mode,
            tol: control.tol,
            max_iter: control.max_iter,
            starts: control.starts,
            seed: control.seed,
            out: out.to_path_buf(),
        })
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

fn parse_columns(spec: &str, p: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..p).collect());
    }
    spec.split(',')
        .map(|s| {
            let c: usize = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad column {s:?} in --standardize")))?;
            if c == 0 || c > p {
                return Err(Error::InvalidInput(format!("--standardize column {c} out of 1..={p}")));
            }
            Ok(c - 1)
        })
        .collect()
}

fn load_input(args: &InputArgs) -> Result<(Dataset, Option<StandardizationRecord>)> {
    let ds = load_csv(&args.input)?;
    match &args.standardize {
        Some(spec) => {
            let cols = parse_columns(spec, ds.p())?;
            let (ds, rec) = standardize(&ds, &cols)?;
            Ok((ds, Some(rec)))
        }
        None => Ok((ds, None)),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn explicit_grid(h_t: &[f64], h_z: &[f64]) -> Vec<Bandwidths> {
    h_t.iter()
        .flat_map(|&t| h_z.iter().map(move |&z| Bandwidths { h_t: t, h_z: z }))
        .collect()
}

const FOLD_FIT: FitOptions = FitOptions {
    tol: 1e-3,
    max_iter: 15,
};

/// Cross-validates according to `cfg` and returns the result with the pilot direction.
fn run_cv(ds: &Dataset, cfg: &RunConfig) -> Result<(CvResult, FitResult)> {
    match &cfg.bandwidth {
        BandwidthMode::Fixed(_) => Err(Error::InvalidInput("cross-validation needs a grid".into())),
        BandwidthMode::DefaultGrid => {
            let sel = select_bandwidths(ds, cfg.cv_m, cfg.cv_mode, cfg.kernel, cfg.seed, cfg.fit_options(), FOLD_FIT)?;
            Ok((sel.cv, sel.pilot))
        }
        BandwidthMode::Grid { h_t, h_z } => {
            let init = IndexCoefficient::uniform(ds.p());
            let pilot = fit(ds, &init, rule_of_thumb(ds, &init), cfg.kernel, cfg.fit_options())?;
            let plan = CvPlan::new(ds, cfg.cv_m, cfg.seed, explicit_grid(h_t, h_z), cfg.cv_mode)?;
            let opts = CvOptions {
                fit: FOLD_FIT,
                init: pilot.beta_hat.clone(),
                pilot_beta: Some(pilot.beta_hat.clone()),
            };
            Ok((cv_select(ds, &plan, cfg.kernel, &opts)?, pilot))
        }
    }
}

#[derive(Debug, Serialize)]
struct FitReport<'a> {
    config: &'a RunConfig,
    n_subjects: usize,
    n_obs: usize,
    p: usize,
    starts: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    start_outcomes: Vec<StartOutcome>,
    fit: &'a FitResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv_chosen: Option<Bandwidths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    standardization: Option<StandardizationRecord>,
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let cfg = RunConfig::from_parts("fit", Some(&args.input.input), &args.bandwidth, &args.control, &args.out)?;
    let average = args.gram;
    let (ds, record) = load_input(&args.input)?;
    ensure_dir(&cfg.out)?;

    let (h, pilot, cv) = match &cfg.bandwidth {
        BandwidthMode::Fixed(h) => (*h, None, None),
        _ => {
            let (cv, pilot) = run_cv(&ds, &cfg)?;
            cv.write_csv(cfg.out.join("cv.csv"))?;
            (cv.chosen, Some(pilot.beta_hat), Some(cv.chosen))
        }
    };
    let (result, start_outcomes) = if cfg.starts > 1 {
        let ms = multi_start_fit(&ds, h, cfg.kernel, cfg.starts, cfg.seed, cfg.fit_options())?;
        (ms.best, ms.starts)
    } else {
        let opts = StudyOptions {
            kernel: cfg.kernel,
            fit: cfg.fit_options(),
            ..StudyOptions::default()
        };
        (final_fit(&ds, h, &opts, pilot.as_ref(), cfg.seed)?, Vec::new())
    };

    let report = FitReport {
        config: &cfg,
        n_subjects: ds.n_subjects(),
        n_obs: ds.n_obs(),
        p: ds.p(),
        starts: cfg.starts,
        start_outcomes,
        fit: &result,
        cv_chosen: cv,
        standardization: record,
    };
    write_json(&report, cfg.out.join("fit.json"))?;

    if !result.converged {
        eprintln!(
            "warning: direction did not converge in {} iterations; reporting the best iterate",
            result.iterations
        );
    }
    let cov = estimate_covariance(&ds, &result, h, cfg.kernel, average)?;
    if cov.excluded > 0 {
        eprintln!("warning: {} observations excluded from the covariance estimate", cov.excluded);
    }
    InferenceReport::new(&cov, &result, ds.n_obs()).write_json(cfg.out.join("inference.json"))?;

    let (t_grid, u_grid) = central_grid(&ds, &result.beta_hat, EVAL_GRID_POINTS);
    LinkSmoother::new(&ds, &result.beta_hat, h, cfg.kernel)
        .surface(&t_grid, &u_grid)?
        .write_csv(cfg.out.join("surface.csv"))
}

#[derive(Debug, Serialize)]
struct CvReport<'a> {
    config: &'a RunConfig,
    pilot_beta: &'a IndexCoefficient,
    chosen: Bandwidths,
    candidates: usize,
    admissible: usize,
}

pub fn cmd_cv(args: &CvArgs) -> Result<()> {
    let cfg = RunConfig::from_parts("cv", Some(&args.input.input), &args.bandwidth, &args.control, &args.out)?;
    if matches!(cfg.bandwidth, BandwidthMode::Fixed(_)) {
        return Err(Error::InvalidInput("cv needs a grid, not fixed --ht/--hz".into()));
    }
    let (ds, _) = load_input(&args.input)?;
    ensure_dir(&cfg.out)?;
    let (cv, pilot) = run_cv(&ds, &cfg)?;
    cv.write_csv(cfg.out.join("cv.csv"))?;
    let report = CvReport {
        config: &cfg,
        pilot_beta: &pilot.beta_hat,
        chosen: cv.chosen,
        candidates: cv.candidates.len(),
        admissible: cv.candidates.iter().filter(|c| c.admissible).count(),
    };
    write_json(&report, cfg.out.join("cv.json"))
}

#[derive(Debug, Serialize)]
struct TruthReport {
    design: Design,
    n: usize,
    seed: u64,
    beta0: Vec<f64>,
    domain: (f64, f64),
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let (ds, truth) = simulate(args.design, args.n, args.seed)?;
    ensure_dir(&args.out)?;
    write_csv(&ds, args.out.join("simulated.csv"))?;
    let report = TruthReport {
        design: args.design,
        n: args.n,
        seed: args.seed,
        beta0: truth.beta0.into_vec(),
        domain: truth.domain,
    };
    write_json(&report, args.out.join("truth.json"))
}

pub fn cmd_study(args: &StudyArgs) -> Result<()> {
    let choice = match (args.ht, args.hz) {
        (Some(ht), Some(hz)) => BandwidthChoice::Fixed(Bandwidths::new(ht, hz)?),
        (None, None) => BandwidthChoice::Cv(args.cv),
        _ => return Err(Error::InvalidInput("--ht and --hz must be given together".into())),
    };
    let opts = StudyOptions {
        kernel: args.control.kernel,
        fit: FitOptions {
            tol: args.control.tol,
            max_iter: args.control.max_iter,
        },
        cv_mode: args.cv_mode,
        starts: args.control.starts,
        covariance: args.covariance,
        gram: args.gram,
        ..StudyOptions::default()
    };
    let result = run_study(args.design, args.n, args.reps, choice, args.control.seed, &opts)?;
    ensure_dir(&args.out)?;
    result.write_csv(args.out.join("study.csv"))?;
    write_json(&result, args.out.join("study.json"))
}

fn range_arg(r: &Option<Vec<f64>>, name: &str) -> Result<Option<(f64, f64)>> {
    match r.as_deref() {
        None => Ok(None),
        Some([lo, hi]) if lo < hi => Ok(Some((*lo, *hi))),
        Some(_) => Err(Error::InvalidInput(format!("--{name} expects lo,hi with lo < hi"))),
    }
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (ds, _) = load_input(&args.input)?;
    if args.beta.len() != ds.p() {
        return Err(Error::InvalidInput(format!(
            "--beta has {} entries, data have p = {}",
            args.beta.len(),
            ds.p()
        )));
    }
    if args.grid_points < 2 {
        return Err(Error::InvalidInput("--grid-points must be at least 2".into()));
    }
    let beta = crate::estimator::normalize_direction(&args.beta)?;
    let h = Bandwidths::new(args.ht, args.hz)?;
    let (mut t_grid, mut u_grid) = central_grid(&ds, &beta, args.grid_points);
    if let Some((lo, hi)) = range_arg(&args.t_range, "t-range")? {
        t_grid = linspace(lo, hi, args.grid_points);
    }
    if let Some((lo, hi)) = range_arg(&args.u_range, "u-range")? {
        u_grid = linspace(lo, hi, args.grid_points);
    }
    ensure_dir(&args.out)?;
    LinkSmoother::new(&ds, &beta, h, args.kernel)
        .surface(&t_grid, &u_grid)?
        .write_csv(args.out.join("surface.csv"))
}

/// Parses nothing; runs an already parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidInput("--threads must be at least 1".into()));
        }
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Study(a) => cmd_study(a),
        Command::Predict(a) => cmd_predict(a),
    }
}

/// Exit code for a finished run, printing a one-line diagnostic on failure.
pub fn exit_code(outcome: Result<()>) -> i32 {
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
